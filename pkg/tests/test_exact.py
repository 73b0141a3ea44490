import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from conftest import SX, dense_tfim, kron_sites, random_vector
from ptvmc.exact import (
    ExactPropagator,
    PlanPropagator,
    apply_plan_exact,
    exact_evolve,
    fidelity_exact,
    infidelity_exact,
)
from ptvmc.lattice import ExactBackendSizeError, LatticeSpec
from ptvmc.operators import build_tfim, magnetization_x, split_diag_offdiag
from ptvmc.schemes import SUPPORTED, DiagonalExp, OffDiagLinear, build_plan, verify_order


def test_two_spin_ising_magnetization_oscillates():
    # from |++> under -J ZZ the x magnetization is cos(2Jt)
    lat = LatticeSpec(1, 2)
    H = build_tfim(lat, 1.0, 0.0)
    plus = np.full(4, 0.5, dtype=complex)
    mx = magnetization_x(2).to_dense()
    for t in np.linspace(0, 3, 13):
        psi = exact_evolve(plus, H, t)
        assert np.vdot(psi, mx @ psi).real == pytest.approx(np.cos(2 * t), abs=1e-12)


def test_single_spin_field_precession():
    H = build_tfim(LatticeSpec(1, 1), 0.0, 0.7)
    up = np.array([1, 0], dtype=complex)
    psi = exact_evolve(up, H, 1.3)
    assert np.allclose(psi, [np.cos(0.7 * 1.3), 1j * np.sin(0.7 * 1.3)])


@pytest.mark.parametrize("lat", [LatticeSpec(2, 2), LatticeSpec(2, 3)], ids=str)
def test_matches_dense_expm(lat, rng):
    H = build_tfim(lat, 1.0, 2.1)
    psi = random_vector(lat.n_sites, rng)
    ref = sla.expm(-0.37j * dense_tfim(lat, 1.0, 2.1)) @ psi
    assert np.allclose(exact_evolve(psi, H, 0.37), ref, atol=1e-12)
    assert np.allclose(exact_evolve(psi, H, 0.0), psi)


def test_large_system_uses_krylov_path(rng):
    lat = LatticeSpec(1, 13)
    H = build_tfim(lat, 1.0, 1.0)
    prop = ExactPropagator(H)
    assert prop._eig is None
    psi = random_vector(13, rng)
    psi /= np.linalg.norm(psi)
    out = prop.evolve(psi, 0.2)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-10)
    back = prop.evolve(out, -0.2)
    assert np.allclose(back, psi, atol=1e-9)


def test_unitarity_and_group_property(rng):
    H = build_tfim(LatticeSpec(3, 3), 1.0, 6.088)
    prop = ExactPropagator(H)
    psi = random_vector(9, rng)
    a = prop.evolve(prop.evolve(psi, 0.2), 0.3)
    assert np.allclose(a, prop.evolve(psi, 0.5), atol=1e-11)
    assert np.linalg.norm(a) == pytest.approx(np.linalg.norm(psi), rel=1e-12)


def test_size_limit():
    with pytest.raises(ExactBackendSizeError):
        ExactPropagator(build_tfim(LatticeSpec(3, 3), 1.0, 1.0), limit=6)


def test_state_shape_checked():
    with pytest.raises(ValueError, match="shape"):
        exact_evolve(np.ones(3), build_tfim(LatticeSpec(1, 2), 1.0, 1.0), 0.1)


def test_fidelity_properties(rng):
    psi, phi = random_vector(4, rng), random_vector(4, rng)
    f = fidelity_exact(psi, phi)
    assert 0 <= f <= 1
    assert f == pytest.approx(fidelity_exact(phi, psi), abs=1e-15)
    assert fidelity_exact(psi, 3j * psi) == pytest.approx(1.0, abs=1e-14)
    assert infidelity_exact(psi, phi) == pytest.approx(1 - f, abs=1e-14)
    e0, e1 = np.eye(4)[0], np.eye(4)[1]
    assert fidelity_exact(e0, e1) == 0
    assert fidelity_exact(e0, e0 + e1) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fidelity_exact(np.zeros(4), e0)


def test_infidelity_keeps_small_values(rng):
    psi = random_vector(6, rng)
    eps = 1e-9 * random_vector(6, rng)
    inf = infidelity_exact(psi, psi + eps)
    assert 0 < inf < 1e-15
    p = psi / np.linalg.norm(psi)
    perp = eps - np.vdot(p, eps) * p
    assert inf == pytest.approx(np.linalg.norm(perp) ** 2 / np.linalg.norm(psi + eps) ** 2, rel=1e-5)


def _dense_plan(plan, lat, J, h, dt):
    Hd = dense_tfim(lat, J, h)
    Z = np.diag(np.diag(Hd))
    X = Hd - Z
    gen = X if plan.is_split else Hd
    eye = np.eye(Hd.shape[0])
    U = eye.astype(complex)
    for f in plan.factors:
        if isinstance(f, DiagonalExp):
            F = sla.expm(-1j * f.alpha * dt * Z)
        elif isinstance(f, OffDiagLinear):
            F = eye - 1j * f.a * dt * gen
        else:
            F = np.linalg.solve(eye - 1j * f.b * dt * gen, eye - 1j * f.a * dt * gen)
        U = F @ U
    return U


@pytest.mark.parametrize("kind,order", [(k, o) for k, os in SUPPORTED.items() for o in os])
def test_plan_propagator_matches_dense_product(kind, order, rng):
    lat = LatticeSpec(2, 2)
    plan = build_plan(kind, order)
    split = split_diag_offdiag(build_tfim(lat, 1.0, 1.5))
    prop = PlanPropagator(plan, split, 0.07)
    ref = _dense_plan(plan, lat, 1.0, 1.5, 0.07)
    assert np.allclose(prop.step_matrix(), ref, atol=1e-12)
    psi = random_vector(4, rng)
    assert np.allclose(apply_plan_exact(psi, plan, split, 0.07), ref @ psi, atol=1e-12)


def test_plan_with_zero_dt_is_identity(rng):
    lat = LatticeSpec(2, 2)
    psi = random_vector(4, rng)
    split = split_diag_offdiag(build_tfim(lat, 1.0, 1.0))
    assert np.array_equal(apply_plan_exact(psi, build_plan("SPPE", 4), split, 0.0), psi)


def test_gmres_path_matches_direct(rng):
    lat = LatticeSpec(1, 13)
    split = split_diag_offdiag(build_tfim(lat, 1.0, 1.0))
    plan = build_plan("PPE", 4)
    psi = random_vector(13, rng)
    out = PlanPropagator(plan, split, 0.02).apply(psi)
    # reapply with the inverse Pade factors as a residual check
    H = build_tfim(lat, 1.0, 1.0).to_sparse()
    back = out.copy()
    for f in reversed(plan.factors):
        num = back - 1j * f.b * 0.02 * (H @ back)
        A = spla.LinearOperator(H.shape, matvec=lambda v, a=f.a: v - 1j * a * 0.02 * (H @ v), dtype=complex)
        back, info = spla.gmres(A, num, rtol=1e-13, atol=0.0)
        assert info == 0
    assert np.allclose(back, psi, atol=1e-9)


def test_verify_order_runs_on_uniform_state():
    H = build_tfim(LatticeSpec(2, 2), 1.0, 2.0)
    check = verify_order(build_plan("LPE", 2), H, 0.5, [0.05, 0.025, 0.0125])
    assert check.slope == pytest.approx(2.0, abs=0.1)
    assert all(np.diff(check.errors) < 0)
    with pytest.raises(ValueError, match="divide"):
        verify_order(build_plan("LPE", 2), H, 0.5, [0.3])


def test_mx_expectation_via_kron(rng):
    psi = random_vector(3, rng)
    psi /= np.linalg.norm(psi)
    mx = magnetization_x(3).to_dense()
    ref = sum(np.vdot(psi, kron_sites(3, {i: SX}) @ psi).real for i in range(3)) / 3
    assert np.vdot(psi, mx @ psi).real == pytest.approx(ref)
