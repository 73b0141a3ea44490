"""Fidelity and fidelity-gradient estimators.

Samples always come from the bare states ``psi`` and ``phi``; the operators
``V`` and ``U`` of ``F(V psi, U phi)`` enter through importance weights
``|V psi(x) / psi(x)|^2`` and ``|U phi(y) / phi(y)|^2``. When ``psi_source``
is set, the x-samples are taken to come from that state instead of ``psi``
and are reweighted accordingly.

Two pairings are supported. ``joint`` pairs ``x_i`` with ``y_i`` (Monte
Carlo), ``product`` averages over every ``(x, y)`` combination through the
factorisation ``A(x, y) = R(x) S(y)`` (exact for full summation).

All ratios are formed from log amplitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .lattice import basis_configurations, configs_to_indices
from .sampling import SampleSet

DEFAULT_C = -0.5
_JAC_CHUNK = 4_000_000
_TABLE_BUDGET = 20_000_000


class DegenerateReweightingError(ValueError):
    pass


class ZeroAmplitudeError(ZeroDivisionError):
    pass


class EstimatorCapabilityError(TypeError):
    pass


def _log_sum(vals, logq):
    """``log sum_k vals_k exp(logq_k)`` row by row."""
    re = np.where(vals != 0, logq.real, -np.inf)
    shift = np.max(re, axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        s = np.sum(vals * np.exp(logq - shift[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        return shift + np.log(s)


def transformed_log_amplitude(vstate, op, xs):
    """``log (op psi)(x)`` from the connected elements of ``op``; ``op=None`` is the identity."""
    if op is None:
        return vstate.log_amplitude(xs)
    xps, vals = op.connected_batch(xs)
    b, m, n = xps.shape
    logq = vstate.log_amplitude(xps.reshape(b * m, n)).reshape(b, m)
    return _log_sum(vals, logq)


def transformed_jacobian(vstate, op, xs, log_tilde=None):
    """``d log (op psi)(x) / d theta`` for each row of ``xs``."""
    if op is None:
        return vstate.jacobian_raw(xs)
    xs = np.asarray(xs)
    xps, vals = op.connected_batch(xs)
    b, m, n = xps.shape
    logq = vstate.log_amplitude(xps.reshape(b * m, n)).reshape(b, m)
    if log_tilde is None:
        log_tilde = _log_sum(vals, logq)
    with np.errstate(over="ignore", invalid="ignore"):
        coef = vals * np.exp(logq - log_tilde[:, None])
    table = vstate.holomorphic_table() if isinstance(vstate, _Tabulated) else None
    if table is not None:
        cols = configs_to_indices(xps).ravel()
        rows = np.repeat(np.arange(b), m)
        mix = sp.csr_matrix((coef.ravel(), (rows, cols)), shape=(b, table.shape[0]))
        g = np.asarray(mix @ table)
        return np.concatenate([g, 1j * g], axis=1)
    p = vstate.n_params
    out = np.empty((b, p), dtype=complex)
    step = max(1, _JAC_CHUNK // max(1, m * p))
    for lo in range(0, b, step):
        hi = min(b, lo + step)
        jac = vstate.jacobian_raw(xps[lo:hi].reshape(-1, n)).reshape(hi - lo, m, p)
        out[lo:hi] = np.einsum("bm,bmp->bp", coef[lo:hi], jac)
    return out


class _Tabulated:
    """A variational state evaluated once on the whole basis and then looked up.

    Used when both sample sets are exact, so every connected configuration
    is already a basis element. The table of holomorphic derivatives is
    built only when it fits in ``_TABLE_BUDGET`` entries.
    """

    def __init__(self, vstate, logpsi=None):
        self.vstate = vstate
        self.n_sites = vstate.n_sites
        self.n_params = vstate.n_params
        self._configs = basis_configurations(self.n_sites)
        if logpsi is not None:
            self.__dict__["_log"] = logpsi

    @cached_property
    def _log(self):
        return self.vstate.log_amplitude(self._configs)

    @cached_property
    def _holo(self):
        return self.vstate.model.grad(self.vstate.params, self._configs)

    def holomorphic_table(self):
        """``d log psi / dc`` on the whole basis, or ``None`` when over budget."""
        if self._configs.shape[0] * self.vstate.model.n_complex > _TABLE_BUDGET:
            return None
        return self._holo

    def log_amplitude(self, xs):
        return self._log[configs_to_indices(xs)]

    def jacobian_raw(self, xs):
        table = self.holomorphic_table()
        if table is None:
            return self.vstate.jacobian_raw(xs)
        g = table[configs_to_indices(xs)]
        return np.concatenate([g, 1j * g], axis=1)


def _tabulate(vstate, samples):
    logpsi = samples.logpsi if samples.origin is vstate else None
    return _Tabulated(vstate, logpsi)


# state pairs ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StatePair:
    psi: object
    phi: object
    samples_psi: SampleSet
    samples_phi: SampleSet
    V: object = None
    U: object = None
    pairing: str = "auto"
    psi_source: object = None

    def __post_init__(self):
        pairing = self.pairing
        if pairing == "auto":
            exact = self.samples_psi.is_exact or self.samples_phi.is_exact
            pairing = "product" if exact else "joint"
        if pairing not in ("joint", "product"):
            raise ValueError(f"pairing must be joint, product or auto, got {self.pairing!r}")
        if pairing == "joint" and len(self.samples_psi) != len(self.samples_phi):
            raise ValueError("joint pairing needs equal numbers of psi and phi samples")
        object.__setattr__(self, "pairing", pairing)

    def with_psi(self, psi) -> "StatePair":
        """Same samples, new variational state; the old one becomes the sampling source."""
        source = self.psi_source if self.psi_source is not None else self.psi
        return replace(self, psi=psi, psi_source=source).reuse_target(self)

    def reuse_target(self, other: "StatePair") -> "StatePair":
        """Adopt the target-side values of ``other`` when they are valid here."""
        side = other.__dict__.get("_target_side")
        if side is not None and side.matches(self):
            self.__dict__["_target_side"] = side
            self.__dict__["_phi_eval"] = other._phi_eval
        return self

    @cached_property
    def _target_side(self) -> "_TargetSide":
        return _TargetSide(self)

    @property
    def _tabulate(self) -> bool:
        return self.samples_psi.is_exact and self.samples_phi.is_exact

    @cached_property
    def _psi_eval(self):
        return _tabulate(self.psi, self.samples_psi) if self._tabulate else self.psi

    @cached_property
    def _phi_eval(self):
        return _tabulate(self.phi, self.samples_phi) if self._tabulate else self.phi

    @cached_property
    def data(self) -> "_PairData":
        return _PairData(self)

    @cached_property
    def jac_x(self) -> np.ndarray:
        return transformed_jacobian(self._psi_eval, self.V, self.samples_psi.configs, self.data.lpsit_x)

    @cached_property
    def jac_y(self) -> np.ndarray:
        if self.samples_phi.configs is self.samples_psi.configs:
            return self.jac_x
        return transformed_jacobian(self._psi_eval, self.V, self.samples_phi.configs, self.data.lpsit_y)


def _normalised(base, logw):
    """``base * exp(logw)`` normalised, plus the log of its sum."""
    pos = base > 0
    if not np.any(pos):
        raise DegenerateReweightingError("all sample weights vanish")
    m = np.max(np.where(pos, logw, -np.inf))
    if not np.isfinite(m):
        raise DegenerateReweightingError("reweighting factors vanish on every sample")
    with np.errstate(under="ignore", invalid="ignore"):
        w = np.where(pos, base * np.exp(logw - m), 0.0)
    total = w.sum()
    return w / total, float(np.log(total) + m)


def _log_ratio(a, b):
    """``a - b``, exactly zero when both are the same array (no operator applied)."""
    if a is b:
        return np.zeros(np.shape(a))
    return a - b


def _check_finite(values, weights, configs, what):
    bad = ~np.isfinite(values) & (weights > 0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ZeroAmplitudeError(f"zero amplitude in the denominator of {what} at configuration {configs[i].tolist()}")


class _TargetSide:
    """Log amplitudes of ``phi`` and ``U phi``; they do not depend on ``psi``."""

    def __init__(self, pair: StatePair):
        self.key = (pair.phi, pair.U, pair.samples_psi.configs, pair.samples_phi.configs)
        xs, ys = self.key[2], self.key[3]
        phi = pair._phi_eval
        self.lphit_x = transformed_log_amplitude(phi, pair.U, xs)
        self.lphit_y = self.lphit_x if ys is xs else transformed_log_amplitude(phi, pair.U, ys)
        self.lphi_y = self.lphit_y if pair.U is None else phi.log_amplitude(ys)

    def matches(self, pair: StatePair) -> bool:
        key = (pair.phi, pair.U, pair.samples_psi.configs, pair.samples_phi.configs)
        return all(a is b for a, b in zip(self.key, key))


class _PairData:
    """Per-sample ratios and weights shared by every estimator."""

    def __init__(self, pair: StatePair):
        xs = pair.samples_psi.configs
        ys = pair.samples_phi.configs
        psi = pair._psi_eval
        self.joint = pair.pairing == "joint"
        target = pair._target_side
        lphit_x, lphit_y, lphi_y = target.lphit_x, target.lphit_y, target.lphi_y

        self.lpsit_x = transformed_log_amplitude(psi, pair.V, xs)
        if pair.psi_source is None and pair.V is None:
            lsrc_x = self.lpsit_x
        else:
            source = pair.psi_source if pair.psi_source is not None else psi
            lsrc_x = source.log_amplitude(xs)
        self.lpsit_y = self.lpsit_x if ys is xs else transformed_log_amplitude(psi, pair.V, ys)

        bx = pair.samples_psi.weights
        by = pair.samples_phi.weights
        with np.errstate(invalid="ignore"):
            self.px, self.log_nx = _normalised(bx, 2.0 * np.real(_log_ratio(self.lpsit_x, lsrc_x)))
            self.py, self.log_ny = _normalised(by, 2.0 * np.real(_log_ratio(lphit_y, lphi_y)))
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(lphit_x - self.lpsit_x)
            s = np.exp(self.lpsit_y - lphit_y)
        _check_finite(r, self.px, xs, "phi~(x)/psi~(x)")
        _check_finite(s, self.py, ys, "psi~(y)/phi~(y)")
        self.R = np.where(self.px > 0, r, 0.0)
        self.S = np.where(self.py > 0, s, 0.0)
        if self.joint:
            # q_i = b_i W_x W_y / (N_x N_y) for identical base weights b
            with np.errstate(invalid="ignore", divide="ignore"):
                self.q = np.where(bx > 0, self.px * self.py / np.where(bx > 0, bx, 1.0), 0.0)
        else:
            self.q = None

    @property
    def norm_ratios(self) -> tuple:
        return (float(np.exp(self.log_nx)), float(np.exp(self.log_ny)))

    def avg(self, gx, hy):
        """Pair average of ``g(x) h(y)``; trailing axes broadcast."""
        gx = np.asarray(gx)
        hy = np.asarray(hy)
        if self.joint:
            nd = max(gx.ndim, hy.ndim)
            gx = gx.reshape(gx.shape + (1,) * (nd - gx.ndim))
            hy = hy.reshape(hy.shape + (1,) * (nd - hy.ndim))
            qs = self.q.reshape((-1,) + (1,) * (nd - 1))
            return np.sum(qs * gx * hy, axis=0)
        return np.tensordot(self.px, gx, axes=(0, 0)) * np.tensordot(self.py, hy, axes=(0, 0))

    @property
    def total(self) -> float:
        return float(np.sum(self.q)) if self.joint else 1.0


# results ------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorResult:
    value: float
    variance: float
    locals: np.ndarray | None = field(default=None, repr=False)
    norm_ratio_estimates: tuple | None = None
    estimator: str = ""


@dataclass(frozen=True)
class GradientResult:
    grad: np.ndarray
    X: np.ndarray | None = field(default=None, repr=False)
    epsilon: np.ndarray | None = field(default=None, repr=False)
    estimator: str = ""

    @property
    def factorized(self):
        return None if self.X is None else (self.X, self.epsilon)


def _weighted_var(values, weights):
    w = weights / weights.sum()
    mean = np.dot(w, values)
    return float(max(np.dot(w, (values - mean) ** 2), 0.0))


# fidelity ------------------------------------------------------------------------


def _single_mc(d: _PairData, c):
    R, S = d.R, d.S
    ea = d.avg(R, S)
    value = float(ea.real)
    if c is not None:
        value += c * float(d.avg(np.abs(R) ** 2, np.abs(S) ** 2).real - d.total)
    if d.joint:
        a = R * S
        f = a.real if c is None else a.real + c * (np.abs(a) ** 2 - 1.0)
        return value, _weighted_var(f, d.q), a
    # product pairing: second moment from factorised averages
    ar, as_ = np.abs(R) ** 2, np.abs(S) ** 2
    e_abs2 = d.avg(ar, as_).real
    e_re2 = 0.5 * e_abs2 + 0.5 * d.avg(R * R, S * S).real
    if c is None:
        second = e_re2
    else:
        e_abs4 = d.avg(ar * ar, as_ * as_).real
        e_re_abs2 = d.avg(R * ar, S * as_).real
        second = (e_re2 + c * c * e_abs4 + c * c + 2 * c * e_re_abs2
                  - 2 * c * ea.real - 2 * c * c * e_abs2)
    return value, float(max(second - value * value, 0.0)), None


def fidelity_single_mc(pair: StatePair, c: float | None = None) -> EstimatorResult:
    """Mean of ``A(z)``, or of ``Re A + c(|A|^2 - 1)`` when ``c`` is given."""
    d = pair.data
    value, var, loc = _single_mc(d, c)
    return EstimatorResult(value, var, loc, d.norm_ratios, "single_mc" if c is None else "single_mc_cv")


def fidelity_double_mc(pair: StatePair, c: float | None = None) -> EstimatorResult:
    """Mean of ``H_loc(x) = R(x) E_y[S(y)]`` with an optional control variate."""
    d = pair.data
    s_mean = np.dot(d.py, d.S)
    h = d.R * s_mean
    f = h.real
    if c is not None:
        f = f + c * (np.abs(d.R) ** 2 * np.dot(d.py, np.abs(d.S) ** 2) - 1.0)
    value = float(np.dot(d.px, f))
    return EstimatorResult(value, _weighted_var(f, d.px), h, d.norm_ratios,
                           "double_mc" if c is None else "double_mc_cv")


def fidelity_reweighted(pair: StatePair, kind: str = "single", c: float | None = DEFAULT_C) -> EstimatorResult:
    """Fidelity of ``(V psi, U phi)`` from bare samples; reports ``N = N_x N_y``."""
    d = pair.data
    norm = float(np.exp(d.log_nx + d.log_ny))
    if not (np.isfinite(norm) and norm > 0):
        raise DegenerateReweightingError(f"normalisation estimate {norm} is not positive")
    if kind == "single":
        return fidelity_single_mc(pair, c)
    if kind == "double":
        return fidelity_double_mc(pair, c)
    raise ValueError(f"unknown estimator kind {kind!r}; use single or double")


FIDELITY_ESTIMATORS = {
    "single_mc": lambda pair: fidelity_single_mc(pair, None),
    "single_mc_cv": lambda pair: fidelity_single_mc(pair, DEFAULT_C),
    "double_mc": lambda pair: fidelity_double_mc(pair, None),
    "double_mc_cv": lambda pair: fidelity_double_mc(pair, DEFAULT_C),
}


# gradients ------------------------------------------------------------------------


def _jac_rows(jac, fallback):
    if jac is None:
        return fallback
    return np.asarray(getattr(jac, "raw", jac), dtype=complex)


def _factorised(dj, px, f):
    sw = np.sqrt(px)
    X = np.concatenate([(sw[:, None] * dj.real).T, (sw[:, None] * dj.imag).T], axis=1)
    return X, f


def grad_hermitian(pair: StatePair, jac=None) -> GradientResult:
    """``E_x[2 Re(dJ(x) H_loc(x)^*)]``, the gradient of the fidelity."""
    d = pair.data
    O = _jac_rows(jac, None)
    if O is None:
        O = pair.jac_x
    dj = O - d.px @ O
    h = d.R * np.dot(d.py, d.S)
    sw = np.sqrt(d.px)
    eps = 2.0 * np.concatenate([sw * h.real, sw * h.imag])
    X, eps = _factorised(dj, d.px, eps)
    return GradientResult(X @ eps, X, eps, "hermitian")


def grad_mixed(pair: StatePair, jac=None) -> GradientResult:
    """``E_z[2 Re(dJ(x) A(z)^*)]``; identical to the Hermitian form under product pairing."""
    d = pair.data
    if not d.joint:
        res = grad_hermitian(pair, jac)
        return replace(res, estimator="mixed")
    O = _jac_rows(jac, None)
    if O is None:
        O = pair.jac_x
    dj = O - d.px @ O
    a = d.R * d.S
    sw = np.sqrt(d.px)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(sw > 0, d.q / np.where(sw > 0, sw, 1.0), 0.0)
    eps = 2.0 * np.concatenate([scale * a.real, scale * a.imag])
    X, eps = _factorised(dj, d.px, eps)
    return GradientResult(X @ eps, X, eps, "mixed")


def grad_nonhermitian(pair: StatePair, jac_psi=None, jac_phi=None, c: float = DEFAULT_C) -> GradientResult:
    """Gradient of the controlled single-MC estimator; needs Jacobians on both sample sets."""
    d = pair.data
    Ox = _jac_rows(jac_psi, None)
    Oy = _jac_rows(jac_phi, None)
    if Ox is None:
        Ox = pair.jac_x
    if Oy is None:
        Oy = pair.jac_y
    R, S = d.R, d.S
    ar, as_ = np.abs(R) ** 2, np.abs(S) ** 2
    ones_y = np.ones_like(S)
    value, _, _ = _single_mc(d, c)
    fbar = value / d.total
    r_ox = R[:, None] * Ox
    f_ox = (0.5 * d.avg(r_ox, S) + 0.5 * d.avg(np.conj(R)[:, None] * Ox, np.conj(S))
            + c * d.avg(ar[:, None] * Ox, as_) - c * d.avg(Ox, ones_y))
    t1 = 2.0 * np.real(f_ox - fbar * d.avg(Ox, ones_y))
    t2 = np.real(
        d.avg(R, S[:, None] * Oy)
        + 2 * c * d.avg(ar, as_[:, None] * Oy)
        - d.avg(r_ox, S)
        - 2 * c * d.avg(ar[:, None] * Ox, as_)
    )
    return GradientResult(t1 + t2, None, None, "nonhermitian")


GRADIENT_ESTIMATORS = {
    "hermitian": grad_hermitian,
    "mixed": grad_mixed,
    "nonhermitian": grad_nonhermitian,
}
