import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import dense_tfim, random_model_state
from ptvmc import driver
from ptvmc.ansatz import LogStateVector, VariationalState, constant_state, random_state
from ptvmc.driver import (
    AnsatzSpec,
    CompressionDivergedError,
    OptimizerConfig,
    QuenchSpec,
    _seed_for,
    compress,
    exact_trajectory,
    initial_target,
    prepare_initial,
    run_quench,
    step,
)
from ptvmc.exact import apply_plan_exact, evaluate_ansatz_dense, infidelity_exact
from ptvmc.lattice import LatticeSpec
from ptvmc.operators import build_tfim, shift_scale, split_diag_offdiag
from ptvmc.sampling import SamplerConfig, SamplingError
from ptvmc.schemes import build_plan

LAT = LatticeSpec(2, 2)
LSV = AnsatzSpec(kind="LogStateVector")


def _lsv_state(vec):
    return VariationalState(LogStateVector(int(np.log2(vec.size))),
                            np.concatenate([np.log(np.abs(vec)), np.angle(vec)]))


def test_compress_lsv_onto_random_target():
    target = random_model_state("lsv", LAT, seed=3, scale=0.8)
    start = constant_state(LogStateVector(4))
    cfg = OptimizerConfig(max_iters=200, target=1e-12)
    out, diag = compress(start, (None, target), cfg)
    assert diag.converged
    assert infidelity_exact(evaluate_ansatz_dense(out), evaluate_ansatz_dense(target)) < 1e-12
    assert diag.history[0]["loss"] == pytest.approx(diag.initial_infidelity)
    assert len(diag.lambdas) == diag.iterations


def test_compress_with_operator_target():
    psi = random_model_state("lsv", LAT, seed=4)
    U = shift_scale(build_tfim(LAT, 1.0, 1.0), -1j, 0.05)
    out, diag = compress(psi, (U, psi), OptimizerConfig(max_iters=200, target=1e-12))
    ref = U.to_dense() @ evaluate_ansatz_dense(psi)
    assert infidelity_exact(evaluate_ansatz_dense(out), ref) < 1e-12


def test_compress_stops_immediately_at_target():
    psi = random_model_state("jastrow", LAT, seed=5)
    out, diag = compress(psi, (None, psi), OptimizerConfig(max_iters=50))
    assert diag.iterations == 0 and diag.converged
    assert np.array_equal(out.theta, psi.theta)


def test_compress_callback_and_fixed_lambda():
    target = random_model_state("lsv", LAT, seed=6)
    seen = []
    cfg = OptimizerConfig(max_iters=5, target=-math.inf, fixed_lambda=1e-3)
    _, diag = compress(constant_state(LogStateVector(4)), (None, target), cfg,
                       callback=lambda it, pair, loss: seen.append((it, loss)))
    assert [s[0] for s in seen] == list(range(6))
    assert all(h["alpha"] == 0.05 for h in diag.history[:-1])
    assert all(h["lambda"] == 1e-3 for h in diag.history[:-1])


def test_sampled_compression_is_deterministic():
    target = random_model_state("jastrow", LAT, seed=7)
    start = random_model_state("jastrow", LAT, seed=8)
    cfg = OptimizerConfig(max_iters=5, target=-math.inf, full_summation=False,
                          sampler=SamplerConfig(4, 32, 10, 1))
    a, _ = compress(start, (None, target), cfg, seed=3)
    b, _ = compress(start, (None, target), cfg, seed=3)
    assert np.array_equal(a.theta, b.theta)


def test_zero_target_is_rejected():
    phi = VariationalState(LogStateVector(4), np.concatenate([np.full(16, -np.inf), np.zeros(16)]))
    with pytest.raises(SamplingError, match="zero"):
        compress(constant_state(LogStateVector(4)), (None, phi), OptimizerConfig(max_iters=3))


def test_nonfinite_loss_raises_with_history(monkeypatch):
    monkeypatch.setattr(driver, "pair_loss", lambda *args: float("nan"))
    target = random_model_state("lsv", LAT, seed=6)
    with pytest.raises(CompressionDivergedError) as info:
        compress(constant_state(LogStateVector(4)), (None, target), OptimizerConfig(max_iters=3))
    assert info.value.diagnostics.history[-1]["iteration"] == 0
    assert not math.isfinite(info.value.diagnostics.history[-1]["loss"])


@pytest.mark.parametrize("scheme,order", [("LPE", 2), ("PPE", 2), ("SLPE", 2), ("SPPE", 3)])
def test_step_with_exact_ansatz_matches_plan(scheme, order):
    H = build_tfim(LAT, 1.0, 2.0)
    split = split_diag_offdiag(H)
    plan = build_plan(scheme, order)
    psi = random_model_state("lsv", LAT, seed=9, scale=0.2)
    cfg = OptimizerConfig(max_iters=100, target=1e-14)
    out, subs = step(psi, plan, split, 0.05, cfg)
    assert len(subs) == plan.substep_count
    ref = apply_plan_exact(evaluate_ansatz_dense(psi), plan, split, 0.05)
    assert infidelity_exact(evaluate_ansatz_dense(out), ref) < 1e-12


def test_step_skips_compressions_without_offdiagonal_part():
    H = build_tfim(LAT, 1.0, 0.0)
    split = split_diag_offdiag(H)
    psi = random_model_state("jastrow", LAT, seed=10)
    out, subs = step(psi, build_plan("SPPE", 2), split, 0.1)
    assert subs == []
    ref = np.exp(-0.1j * np.diag(dense_tfim(LAT, 1.0, 0.0))) * evaluate_ansatz_dense(psi)
    assert infidelity_exact(evaluate_ansatz_dense(out), ref) < 1e-14


def test_quench_two_spins_follows_cosine():
    spec = QuenchSpec(LatticeSpec(1, 2), h_final=0.0, scheme="SPPE", order=2, dt=0.1, t_final=0.5,
                      ansatz=AnsatzSpec("JastrowNet", backbone=False),
                      optimizer=OptimizerConfig(max_iters=50))
    rec = run_quench(spec)
    assert rec.complete
    assert np.allclose(rec.mx, np.cos(2 * np.asarray(rec.times)), atol=1e-10)
    assert max(rec.exact_infidelity) < 1e-12


def test_quench_matches_exact_with_lsv(tmp_path):
    spec = QuenchSpec(LAT, h_final=2.0, scheme="SPPE", order=2, dt=0.02, t_final=0.1, ansatz=LSV,
                      optimizer=OptimizerConfig(max_iters=100, target=1e-13))
    rec = run_quench(spec, out_dir=tmp_path)
    assert rec.complete and len(rec.times) == 6
    assert rec.exact_infidelity[0] < 1e-12
    # remaining error is the second-order time discretisation
    assert 0 < rec.exact_infidelity[-1] < 1e-6
    assert rec.mx_err == [0.0] * 6
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [f"step_{k:05d}.json" for k in range(6)]
    # an exactly representable ansatz reproduces the scheme applied to dense vectors
    split = split_diag_offdiag(build_tfim(LAT, 1.0, 2.0))
    plan = build_plan("SPPE", 2)
    mx_op = np.mean([np.kron(np.eye(1 << (3 - i)), np.kron(np.array([[0, 1], [1, 0]]), np.eye(1 << i)))
                     for i in range(4)], axis=0)
    psi = np.full(16, 0.25, dtype=complex)
    ref = [1.0]
    for _ in range(5):
        psi = apply_plan_exact(psi, plan, split, 0.02)
        ref.append(np.vdot(psi, mx_op @ psi).real / np.vdot(psi, psi).real)
    assert np.allclose(rec.mx, ref, atol=1e-10)
    times, mx, fid = exact_trajectory(spec)
    assert np.allclose(times, rec.times)
    assert np.allclose(rec.mx, mx, atol=1e-3)
    assert fid[0] == pytest.approx(1.0)


def test_quench_stops_on_diverged_substep(monkeypatch):
    def boom(*args, **kwargs):
        raise CompressionDivergedError("synthetic", None, substep=0)

    monkeypatch.setattr(driver, "step", boom)
    spec = QuenchSpec(LAT, dt=0.1, t_final=0.3, ansatz=LSV)
    rec = run_quench(spec)
    assert not rec.complete
    assert "step 1" in rec.error and len(rec.times) == 1


def test_initial_target_finite_field_is_ground_state():
    spec = QuenchSpec(LAT, h_initial=1.5, ansatz=LSV)
    state, dense = initial_target(spec)
    H = dense_tfim(LAT, 1.0, 1.5)
    e0 = np.linalg.eigvalsh(H)[0]
    assert np.vdot(dense, H @ dense).real == pytest.approx(e0)
    assert infidelity_exact(evaluate_ansatz_dense(state), dense) < 1e-14


def test_prepare_initial_reaches_uniform_state():
    spec = QuenchSpec(LAT, ansatz=AnsatzSpec(channels=(2, 2)))
    state, diag = prepare_initial(spec, spec.ansatz.build(LAT))
    assert diag.converged
    amps = evaluate_ansatz_dense(state)
    assert infidelity_exact(amps, np.ones(16)) < 1e-8


def test_spec_validation():
    with pytest.raises(ValueError, match="multiple"):
        QuenchSpec(LAT, dt=0.03, t_final=0.1).n_steps
    with pytest.raises(ValueError):
        QuenchSpec(LAT, dt=0.0)
    with pytest.raises(ValueError):
        QuenchSpec(LAT, h_initial=0.0)
    with pytest.raises(ValueError, match="gradient"):
        OptimizerConfig(gradient="natural")
    with pytest.raises(ValueError, match="solver"):
        OptimizerConfig(solver="cg")
    with pytest.raises(ValueError):
        OptimizerConfig(fixed_lambda=0.0)


def test_resolved_target():
    assert OptimizerConfig().resolved_target == 1e-8
    assert OptimizerConfig(full_summation=False).resolved_target == 1e-4
    assert OptimizerConfig(target=1e-3).resolved_target == 1e-3


def test_seed_derivation():
    assert _seed_for(1, 2, 3) == _seed_for(1, 2, 3)
    assert len({_seed_for(0, k) for k in range(100)}) == 100
    assert _seed_for(0, 1, 2) != _seed_for(0, 2, 1)


def test_ansatz_spec_builds_each_kind():
    assert AnsatzSpec("LogStateVector").build(LAT).n_complex == 16
    assert AnsatzSpec("PeriodicConvNet", (2,)).build(LAT).kind.value == "PeriodicConvNet"
    j = AnsatzSpec("JastrowNet", backbone=False).build(LAT)
    assert j.backbone is None
    with pytest.raises(ValueError):
        AnsatzSpec("MLP").build(LAT)


def test_random_start_differs_from_constant():
    model = AnsatzSpec().build(LAT)
    assert np.any(random_state(model, 0, 0.1).theta != 0)
    assert replace(QuenchSpec(LAT), seed=3).seed == 3
