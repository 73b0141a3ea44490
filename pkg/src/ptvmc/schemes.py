"""Product-expansion integrators for ``exp(Lambda dt)``, ``Lambda = -iH``.

Four families are supported:

* LPE-o   : ``prod_i (1 + a_i Lambda dt)``, o substeps.
* PPE-o   : ``prod_i (1 + b_i Lambda dt)^-1 (1 + a_i Lambda dt)``, o/2 substeps.
* S-LPE-o : linear factors on the off-diagonal part X interleaved with exact
  diagonal exponentials ``exp(alpha_i Z dt)``.
* S-PPE-o : the same with Pade factors on X, plus a trailing diagonal factor.

A plan lists its factors in the order they are applied to the state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class SchemeKind(str, enum.Enum):
    LPE = "LPE"
    PPE = "PPE"
    SLPE = "SLPE"
    SPPE = "SPPE"

    @classmethod
    def parse(cls, name) -> "SchemeKind":
        if isinstance(name, cls):
            return name
        key = str(name).upper().replace("-", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise UnsupportedSchemeError(
                f"unknown scheme {name!r}; supported: {supported_schemes_text()}"
            ) from None


class UnsupportedSchemeError(ValueError):
    pass


class CoefficientSolverError(RuntimeError):
    pass


# factor descriptors -----------------------------------------------------------


@dataclass(frozen=True)
class DiagonalExp:
    alpha: complex


@dataclass(frozen=True)
class OffDiagLinear:
    a: complex


@dataclass(frozen=True)
class OffDiagPade:
    a: complex
    b: complex


def pade_factor(a: complex, b: complex):
    """Pade factor, normalised to a linear one when ``b == 0``."""
    if b == 0:
        return OffDiagLinear(complex(a))
    return OffDiagPade(complex(a), complex(b))


@dataclass(frozen=True)
class SchemePlan:
    kind: SchemeKind
    order: int
    factors: tuple = field(default_factory=tuple)

    @property
    def substep_count(self) -> int:
        """Number of compressions (non-diagonal factors) the plan induces."""
        return sum(not isinstance(f, DiagonalExp) for f in self.factors)

    @property
    def is_split(self) -> bool:
        return self.kind in (SchemeKind.SLPE, SchemeKind.SPPE)

    @property
    def name(self) -> str:
        label = {"SLPE": "S-LPE", "SPPE": "S-PPE"}.get(self.kind.value, self.kind.value)
        return f"{label}-{self.order}"


# symmetric polynomials --------------------------------------------------------


def elementary_symmetric(values, k: int) -> complex:
    values = list(values)
    if k == 0:
        return 1.0 + 0j
    if k > len(values):
        return 0j
    # coefficients of prod(1 + v t)
    poly = np.array([1.0 + 0j])
    for v in values:
        poly = np.convolve(poly, [1.0, v])
    return complex(poly[k])


def complete_homogeneous(values, k: int) -> complex:
    values = list(values)
    if k == 0:
        return 1.0 + 0j
    # coefficients of prod 1/(1 - v t), truncated at t^k
    series = np.zeros(k + 1, dtype=complex)
    series[0] = 1.0
    for v in values:
        nxt = np.zeros_like(series)
        acc = 0j
        for n in range(k + 1):
            acc = acc * v + series[n]
            nxt[n] = acc
        series = nxt
    return complex(series[k])


def lpe_residuals(a) -> np.ndarray:
    s = len(a)
    return np.array([elementary_symmetric(a, k) - 1.0 / math.factorial(k) for k in range(1, s + 1)])


def ppe_residuals(a, b) -> np.ndarray:
    """Residuals of ``sum_j (-1)^(k-j) e_j(a) h_(k-j)(b) = 1/k!`` for ``k = 1..2s``."""
    s = len(a)
    out = []
    for k in range(1, 2 * s + 1):
        acc = sum(
            (-1) ** (k - j) * elementary_symmetric(a, j) * complete_homogeneous(b, k - j)
            for j in range(k + 1)
        )
        out.append(acc - 1.0 / math.factorial(k))
    return np.array(out)


def canonical_sort(values) -> list[complex]:
    vals = [complex(v) for v in values]
    return sorted(vals, key=lambda z: (round(z.real, 10), round(z.imag, 10)))


# solvers ----------------------------------------------------------------------


def solve_lpe_coefficients(order: int) -> list[complex]:
    """Coefficients ``a_i`` of LPE-``order`` with ``e_k(a) = 1/k!``.

    ``prod_i (1 + a_i z)`` must equal the degree-``s`` Taylor polynomial of
    ``exp(z)``, so ``a_i = -1/r_i`` for the roots ``r_i`` of that polynomial.
    """
    if order not in (1, 2, 3, 4):
        raise UnsupportedSchemeError(f"LPE solver supports orders 1..4, got {order}")
    taylor = [1.0 / math.factorial(k) for k in range(order, -1, -1)]
    roots = np.roots(taylor)
    a = [-1.0 / r for r in roots]
    a = _conjugate_clean(a)
    res = np.max(np.abs(lpe_residuals(a)))
    if not res < 1e-10:
        raise CoefficientSolverError(f"LPE-{order} root finding did not converge (residual {res:.2e})")
    return canonical_sort(a)


def _conjugate_clean(values, tol: float = 1e-9) -> list[complex]:
    """Snap near-real values to the real axis."""
    out = []
    for v in values:
        v = complex(v)
        out.append(complex(v.real, 0.0) if abs(v.imag) < tol else v)
    return out


def _ppe_reduced_system(a: np.ndarray) -> np.ndarray:
    # With b = -a each Pade factor is (1 + a z)/(1 - a z); the odd order
    # conditions k = 1, 3, ..., 2s-1 fix a, the even ones then follow.
    return ppe_residuals(a, -a)[0::2]


def solve_ppe_coefficients(substeps: int, seed: int = 0, max_restarts: int = 100):
    """``(a, b)`` for PPE with ``substeps`` Pade factors (order ``2*substeps``).

    Damped Newton on the complex system with the ``b = -a`` ansatz, restarted
    from random complex points until every order condition is met.
    """
    s = int(substeps)
    if s not in (1, 2, 3):
        raise UnsupportedSchemeError(f"PPE solver supports 1..3 substeps, got {substeps}")
    rng = np.random.default_rng(seed)
    step = 1e-7
    for _ in range(max_restarts):
        a = 0.5 / s + 0.3 * (rng.normal(size=s) + 1j * rng.normal(size=s))
        res = _ppe_reduced_system(a)
        for _ in range(200):
            norm = np.linalg.norm(res)
            if norm < 1e-15:
                break
            jac = np.empty((s, s), dtype=complex)
            for j in range(s):
                e = np.zeros(s, dtype=complex)
                e[j] = step
                jac[:, j] = (_ppe_reduced_system(a + e) - _ppe_reduced_system(a - e)) / (2 * step)
            try:
                delta = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-4:
                trial = a + t * delta
                trial_res = _ppe_reduced_system(trial)
                if np.linalg.norm(trial_res) < norm:
                    break
                t *= 0.5
            else:
                break
            a, res = trial, trial_res
        a = np.array(_conjugate_clean(a))
        if np.all(a.real > 0) and np.max(np.abs(ppe_residuals(a, -a))) < 1e-12:
            a = canonical_sort(a)
            return a, [-x for x in a]
    raise CoefficientSolverError(f"PPE solver failed after {max_restarts} restarts (s={s})")


# tabulated split schemes ------------------------------------------------------

_R3 = math.sqrt(3.0)
_R15 = math.sqrt(15.0)
# (3 -+ sqrt3)/12 reproduce the 4-decimal S-LPE-3 entries 0.1057 and 0.3943.
_P = (3 - _R3) / 12
_Q = (3 + _R3) / 12

_SLPE_TABLE = {
    1: [1.0 + 0j],
    2: [(1 - 1j) / 2, (1 + 1j) / 2],
    3: [complex(_P, -_Q), complex(_Q, _P), complex(_Q, -_P), complex(_P, _Q)],
}

# (a, b, alpha); alpha has one more entry than a.
_SPPE_TABLE = {
    2: ([0.5 + 0j], [-0.5 + 0j], [0.5 + 0j, 0.5 + 0j]),
    3: (
        [(3 + _R3 * 1j) / 12, (3 - _R3 * 1j) / 12],
        [(-3 - _R3 * 1j) / 12, (-3 + _R3 * 1j) / 12],
        [(3 + _R3 * 1j) / 12, 0.5 + 0j, (3 - _R3 * 1j) / 12],
    ),
    4: (
        [(3 - _R15 * 1j) / 24, 0.25 + 0j, (3 + _R15 * 1j) / 24],
        [(-3 + _R15 * 1j) / 24, -0.25 + 0j, (-3 - _R15 * 1j) / 24],
        [(3 - _R15 * 1j) / 24, (9 - _R15 * 1j) / 24, (9 + _R15 * 1j) / 24, (3 + _R15 * 1j) / 24],
    ),
}

SUPPORTED = {
    SchemeKind.LPE: (1, 2, 3, 4),
    SchemeKind.PPE: (2, 4, 6),
    SchemeKind.SLPE: tuple(_SLPE_TABLE),
    SchemeKind.SPPE: tuple(_SPPE_TABLE),
}


def supported_schemes_text() -> str:
    return ", ".join(
        f"{k.value}{list(v)}" for k, v in SUPPORTED.items()
    )


def split_coefficients(kind, order: int):
    """Tabulated ``(a, b, alpha)`` for S-LPE / S-PPE (``b`` is empty for S-LPE)."""
    kind = SchemeKind.parse(kind)
    if kind is SchemeKind.SLPE and order in _SLPE_TABLE:
        a = list(_SLPE_TABLE[order])
        return a, [], list(a)
    if kind is SchemeKind.SPPE and order in _SPPE_TABLE:
        a, b, alpha = _SPPE_TABLE[order]
        return list(a), list(b), list(alpha)
    raise UnsupportedSchemeError(
        f"no tabulated coefficients for ({kind.value}, {order}); supported: "
        f"SLPE{list(_SLPE_TABLE)}, SPPE{list(_SPPE_TABLE)}"
    )


def lookup_split_coefficients(kind, order: int) -> SchemePlan:
    kind = SchemeKind.parse(kind)
    a, b, alpha = split_coefficients(kind, order)
    factors = []
    if kind is SchemeKind.SLPE:
        for ai, al in zip(a, alpha):
            factors += [DiagonalExp(complex(al)), OffDiagLinear(complex(ai))]
    else:
        factors.append(DiagonalExp(complex(alpha[0])))
        for i, (ai, bi) in enumerate(zip(a, b)):
            factors += [pade_factor(ai, bi), DiagonalExp(complex(alpha[i + 1]))]
    return SchemePlan(kind, order, tuple(factors))


def build_plan(kind, order: int) -> SchemePlan:
    kind = SchemeKind.parse(kind)
    order = int(order)
    if order not in SUPPORTED[kind]:
        raise UnsupportedSchemeError(
            f"unsupported order {order} for {kind.value}; supported: {supported_schemes_text()}"
        )
    if kind is SchemeKind.LPE:
        factors = tuple(OffDiagLinear(a) for a in solve_lpe_coefficients(order))
    elif kind is SchemeKind.PPE:
        a, b = solve_ppe_coefficients(order // 2)
        factors = tuple(pade_factor(ai, bi) for ai, bi in zip(a, b))
    else:
        return lookup_split_coefficients(kind, order)
    return SchemePlan(kind, order, factors)


# order verification -----------------------------------------------------------


@dataclass(frozen=True)
class OrderCheck:
    dts: tuple
    errors: tuple
    slope: float | None
    fit_mask: tuple


# Double precision leaves roughly 1e-16 of rounding per step; errors below
# ROUNDING_PER_STEP * n_steps are not trusted for the fit.
ROUNDING_PER_STEP = 2e-15
FIT_POINTS = 3


def fit_loglog_slope(dts, errors, floors=None, points: int | None = FIT_POINTS):
    """Least-squares slope of ``log(err)`` against ``log(dt)``.

    Only errors above their rounding ``floors`` are used, and of those only
    the ``points`` smallest step sizes (the asymptotic window). Returns
    ``(slope, mask)``; the slope is ``None`` with fewer than two usable points.
    """
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    floors = np.zeros_like(errors) if floors is None else np.asarray(floors, dtype=float)
    mask = np.isfinite(errors) & (errors > floors)
    if points is not None:
        usable = np.flatnonzero(mask)
        keep = usable[np.argsort(dts[usable])][:points]
        mask = np.zeros_like(mask)
        mask[keep] = True
    if mask.sum() < 2:
        return None, mask
    slope = np.polyfit(np.log(dts[mask]), np.log(errors[mask]), 1)[0]
    return float(slope), mask


def verify_order(plan: SchemePlan, hamiltonian, t_final: float, dt_grid, state=None,
                 limit: int | None = None) -> OrderCheck:
    """Global L2 error at ``t_final`` of ``plan`` against exact evolution.

    ``state`` defaults to the normalised uniform state (the ``h = inf``
    ground state). Every ``dt`` must divide ``t_final`` into an integer
    number of steps.
    """
    from .exact import DENSE_LIMIT, ExactPropagator, PlanPropagator
    from .operators import split_diag_offdiag

    n = hamiltonian.n_sites
    if state is None:
        state = np.full(1 << n, 2.0 ** (-n / 2), dtype=complex)
    state = np.asarray(state, dtype=complex)
    reference = ExactPropagator(hamiltonian, limit=limit).evolve(state, t_final)
    split = split_diag_offdiag(hamiltonian)
    errors = []
    floors = []
    dts = [float(d) for d in dt_grid]
    for dt in dts:
        steps = int(round(t_final / dt))
        if steps < 1 or abs(steps * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
            raise ValueError(f"dt={dt} does not divide t_final={t_final}")
        prop = PlanPropagator(plan, split, dt, limit=limit)
        if n <= DENSE_LIMIT:
            # repeated squaring keeps accumulated rounding far below the step count
            psi = np.linalg.matrix_power(prop.step_matrix(), steps) @ state
        else:
            psi = state.copy()
            for _ in range(steps):
                psi = prop.apply(psi)
        errors.append(float(np.linalg.norm(psi - reference)))
        floors.append(ROUNDING_PER_STEP * steps)
    slope, mask = fit_loglog_slope(dts, errors, floors)
    return OrderCheck(tuple(dts), tuple(errors), slope, tuple(bool(m) for m in mask))
