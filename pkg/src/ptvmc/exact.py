"""Dense state-vector oracle.

Exact evolution uses a full eigendecomposition up to ``DENSE_LIMIT`` sites and
``scipy.sparse.linalg.expm_multiply`` above. Pade factors are inverted with a
sparse LU factorisation up to the same size and with GMRES beyond it.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import check_exact_size, enumerate_configurations
from .operators import OperatorSplit, SparseOperator
from .schemes import DiagonalExp, OffDiagLinear, OffDiagPade, SchemePlan

DENSE_LIMIT = 12
PADE_TOL = 1e-12


class PadeSolveError(RuntimeError):
    pass


class AnsatzOverflowError(OverflowError):
    pass


def _as_state(state, n_sites: int) -> np.ndarray:
    psi = np.asarray(state, dtype=complex)
    if psi.shape != (1 << n_sites,):
        raise ValueError(f"state has shape {psi.shape}, expected ({1 << n_sites},)")
    return psi


class ExactPropagator:
    """Caches what is needed to apply ``exp(-iHt)`` repeatedly."""

    def __init__(self, hamiltonian: SparseOperator, limit: int | None = None):
        check_exact_size(hamiltonian.n_sites, limit)
        self.n_sites = hamiltonian.n_sites
        self.matrix = hamiltonian.to_sparse(limit)
        self._eig = None
        if self.n_sites <= DENSE_LIMIT:
            self._eig = np.linalg.eigh(self.matrix.toarray())

    def evolve(self, state, t: float) -> np.ndarray:
        psi = _as_state(state, self.n_sites)
        if t == 0:
            return psi.copy()
        if self._eig is not None:
            w, v = self._eig
            return v @ (np.exp(-1j * w * t) * (v.conj().T @ psi))
        return spla.expm_multiply(-1j * t * self.matrix, psi)


def exact_evolve(state, hamiltonian: SparseOperator, t: float, limit: int | None = None) -> np.ndarray:
    """``exp(-iHt)|state>``."""
    return ExactPropagator(hamiltonian, limit).evolve(state, t)


class PlanPropagator:
    """One step of ``plan`` applied exactly, with per-``dt`` operators cached."""

    def __init__(self, plan: SchemePlan, split: OperatorSplit, dt: float, limit: int | None = None):
        n = split.x_part.n_sites
        check_exact_size(n, limit)
        self.n_sites = n
        self.plan = plan
        self.dt = float(dt)
        configs = enumerate_configurations(n, limit)
        self._diag = split.z_part(configs) if split.z_part.zstrings else np.zeros(1 << n, dtype=complex)
        self._x = split.x_part.to_sparse(limit)
        if not plan.is_split:
            # unsplit factors act with the whole generator
            self._x = (self._x + sp.diags(self._diag)).tocsr()
        eye = sp.identity(1 << n, dtype=complex, format="csc")
        self._ops = []
        for i, f in enumerate(plan.factors):
            if isinstance(f, DiagonalExp):
                self._ops.append(("diag", np.exp(f.alpha * (-1j) * self._diag * self.dt)))
            elif isinstance(f, OffDiagLinear):
                self._ops.append(("lin", (eye + f.a * (-1j) * self.dt * self._x).tocsr()))
            elif isinstance(f, OffDiagPade):
                num = (eye + f.a * (-1j) * self.dt * self._x).tocsr()
                den = (eye + f.b * (-1j) * self.dt * self._x).tocsc()
                lu = spla.splu(den) if n <= DENSE_LIMIT else None
                self._ops.append(("pade", (num, den, lu, i)))
            else:
                raise TypeError(f"unknown factor {f!r}")

    def apply(self, state) -> np.ndarray:
        psi = _as_state(state, self.n_sites).copy()
        return self._apply(psi)

    def step_matrix(self) -> np.ndarray:
        """Dense matrix of one full step (dense regime only)."""
        if self.n_sites > DENSE_LIMIT:
            raise ValueError(f"step_matrix is limited to {DENSE_LIMIT} sites")
        return self._apply(np.eye(1 << self.n_sites, dtype=complex))

    def _apply(self, psi):
        for kind, data in self._ops:
            if kind == "diag":
                psi = data.reshape((-1,) + (1,) * (psi.ndim - 1)) * psi
            elif kind == "lin":
                psi = data @ psi
            else:
                psi = self._pade(psi, *data)
        return psi

    def _pade(self, psi, num, den, lu, index):
        rhs = num @ psi
        if lu is not None:
            out = lu.solve(rhs)
        else:
            dim = rhs.size
            out, info = spla.gmres(den, rhs, rtol=PADE_TOL, atol=0.0, maxiter=10 * dim)
            if info != 0:
                raise PadeSolveError(f"GMRES failed on Pade factor {index} ({self.plan.factors[index]})")
        scale = max(np.linalg.norm(rhs), 1e-300)
        res = np.linalg.norm(den @ out - rhs) / scale
        if not res < PADE_TOL * 10:
            raise PadeSolveError(
                f"Pade factor {index} ({self.plan.factors[index]}) left residual {res:.2e}"
            )
        return out


def apply_plan_exact(state, plan: SchemePlan, split: OperatorSplit, dt: float,
                     limit: int | None = None) -> np.ndarray:
    """One time step of ``plan`` applied exactly to a dense state."""
    if dt == 0:
        return _as_state(state, split.x_part.n_sites).copy()
    return PlanPropagator(plan, split, dt, limit).apply(state)


def fidelity_exact(psi, phi) -> float:
    """``|<psi|phi>|^2 / (<psi|psi><phi|phi>)``."""
    psi = np.asarray(psi, dtype=complex)
    phi = np.asarray(phi, dtype=complex)
    npsi = np.vdot(psi, psi).real
    nphi = np.vdot(phi, phi).real
    if npsi == 0 or nphi == 0:
        raise ValueError("fidelity_exact: zero-norm state")
    return float(abs(np.vdot(psi, phi)) ** 2 / (npsi * nphi))


def infidelity_exact(psi, phi) -> float:
    """``1 - F``, computed from the residual so small values keep precision."""
    psi = np.asarray(psi, dtype=complex)
    phi = np.asarray(phi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    phi = phi / np.linalg.norm(phi)
    ov = np.vdot(psi, phi)
    # 1 - |<psi|phi>|^2 = ||phi - <psi|phi> psi||^2 for unit vectors
    return float(np.linalg.norm(phi - ov * psi) ** 2)


def evaluate_ansatz_dense(vstate, rescale: bool = False, limit: int | None = None) -> np.ndarray:
    """Amplitudes ``exp(log psi(x))`` over the full basis.

    With ``rescale`` the largest real part of the log amplitudes is
    subtracted first, which changes only the global scale.
    """
    configs = enumerate_configurations(vstate.n_sites, limit)
    logpsi = vstate.log_amplitude(configs)
    if rescale:
        logpsi = logpsi - np.max(logpsi.real)
    with np.errstate(over="ignore", invalid="ignore"):
        amps = np.exp(logpsi)
    if not np.all(np.isfinite(amps)):
        raise AnsatzOverflowError(
            "amplitude overflow while exponentiating log amplitudes; "
            "call evaluate_ansatz_dense(..., rescale=True)"
        )
    return amps
