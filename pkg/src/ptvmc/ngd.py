"""Damped natural gradient descent with an autonomous (lambda, alpha) controller.

Conventions: ``X`` is ``N_p x 2N_s`` and ``X @ epsilon`` is the gradient of
the loss. The curvature is ``S = X X^T``. Steps are ``dtheta = -alpha * delta``
with ``delta = (S + lambda I)^-1 X epsilon``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .estimators import (
    DEFAULT_C,
    EstimatorCapabilityError,
    StatePair,
    fidelity_double_mc,
    fidelity_single_mc,
)


class DampingError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class CurvatureBundle:
    """Curvature factor ``X`` with either ``epsilon`` or an explicit gradient.

    ``grad`` is for estimators without an ``X epsilon`` form; such bundles
    can only be solved through the QGT.
    """

    X: np.ndarray
    epsilon: np.ndarray | None
    loss_value: float = 0.0
    solver: str = "auto"
    grad: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {X.shape}")
        if self.solver not in ("auto", "qgt", "ntk"):
            raise ValueError(f"unknown solver {self.solver!r}")
        object.__setattr__(self, "X", X)
        if self.epsilon is None:
            if self.grad is None:
                raise ValueError("a bundle needs epsilon or an explicit gradient")
            g = np.asarray(self.grad, dtype=float)
            if g.shape != (X.shape[0],):
                raise ValueError(f"gradient {g.shape} does not match X {X.shape}")
            object.__setattr__(self, "grad", g)
        else:
            eps = np.asarray(self.epsilon, dtype=float)
            if eps.shape != (X.shape[1],):
                raise ValueError(f"X {X.shape} and epsilon {eps.shape} do not match")
            object.__setattr__(self, "epsilon", eps)

    @cached_property
    def gradient(self) -> np.ndarray:
        return self.grad if self.epsilon is None else self.X @ self.epsilon

    @property
    def resolved_solver(self) -> str:
        if self.solver != "auto":
            return self.solver
        n_p, two_ns = self.X.shape
        return "ntk" if n_p > two_ns and self.epsilon is not None else "qgt"


def _spd_solve(a, b, lam, what):
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=True)
        return sla.cho_solve(factor, b)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DampingError(f"{what} factorisation failed at lambda={lam:g}; increase lambda") from exc


def solve_qgt(bundle: CurvatureBundle, lam: float) -> np.ndarray:
    """``(X X^T + lam I)^-1 X eps``."""
    X = bundle.X
    a = X @ X.T
    a[np.diag_indices_from(a)] += lam
    return _spd_solve(a, bundle.gradient, lam, "QGT")


def solve_ntk(bundle: CurvatureBundle, lam: float) -> np.ndarray:
    """``X (X^T X + lam I)^-1 eps``."""
    if bundle.epsilon is None:
        raise EstimatorCapabilityError("the NTK solve needs a gradient of the form X @ epsilon")
    X = bundle.X
    a = X.T @ X
    a[np.diag_indices_from(a)] += lam
    return X @ _spd_solve(a, bundle.epsilon, lam, "NTK")


def solve(bundle: CurvatureBundle, lam: float) -> np.ndarray:
    return solve_ntk(bundle, lam) if bundle.resolved_solver == "ntk" else solve_qgt(bundle, lam)


def quadratic_model(bundle: CurvatureBundle, step) -> float:
    """``L + step . X eps + |X^T step|^2 / 2`` for a parameter step ``step``."""
    step = np.asarray(step, dtype=float)
    xt = bundle.X.T @ step
    return float(bundle.loss_value + step @ bundle.gradient + 0.5 * xt @ xt)


def curvature_matrix(pair: StatePair) -> np.ndarray:
    """``X`` of the transformed variational state: columns ``sqrt(p_i) [Re dJ | Im dJ]``."""
    d = pair.data
    dj = pair.jac_x - d.px @ pair.jac_x
    sw = np.sqrt(d.px)[:, None]
    return np.concatenate([(sw * dj.real).T, (sw * dj.imag).T], axis=1)


def bundle_from_gradient(grad_result, loss_value: float, solver: str = "auto", pair=None) -> CurvatureBundle:
    """Loss bundle from a fidelity gradient; the loss is ``1 - F`` so signs flip.

    Estimators without an ``X epsilon`` form need ``pair`` for the curvature.
    """
    if grad_result.factorized is None:
        if solver == "ntk":
            raise EstimatorCapabilityError(
                f"estimator {grad_result.estimator!r} has no X epsilon form; the NTK solver cannot use it"
            )
        if pair is None:
            raise ValueError("pair is required to build the curvature for this estimator")
        return CurvatureBundle(curvature_matrix(pair), None, loss_value, "qgt", grad=-grad_result.grad)
    X, eps = grad_result.factorized
    return CurvatureBundle(X, -eps, loss_value, solver)


# loss ------------------------------------------------------------------------------


def pair_loss(pair: StatePair, estimator: str = "single", c: float | None = DEFAULT_C) -> float:
    """Infidelity ``1 - F`` with the chosen fidelity estimator."""
    if estimator == "single":
        return 1.0 - fidelity_single_mc(pair, c).value
    if estimator == "double":
        return 1.0 - fidelity_double_mc(pair, c).value
    raise ValueError(f"unknown loss estimator {estimator!r}")


def reweighted_loss_eval(theta_new, samples, pair: StatePair, estimator: str = "single",
                         c: float | None = DEFAULT_C):
    """Loss at ``theta_new`` on the samples drawn at the current parameters.

    ``samples`` is the x-sample set of ``pair`` (or ``None`` to use it).
    Returns ``(loss, effective_sample_size)``.
    """
    if samples is not None and samples is not pair.samples_psi:
        pair = replace(pair, samples_psi=samples)
    trial = pair.with_psi(pair.psi.with_theta(theta_new))
    loss = pair_loss(trial, estimator, c)
    px = trial.data.px
    ess = float(1.0 / np.sum(px * px))
    return loss, ess


# controller -----------------------------------------------------------------------


@dataclass(frozen=True)
class DampingState:
    lam: float = 1e-3
    alpha: float = 1.0
    xi0: float = 0.1
    rho0: float = 0.25
    rho1: float = 0.5
    eta0: float = 1.5
    eta1: float = 0.95
    lam_min: float = 1e-10
    lam_max: float = 1e2

    def __post_init__(self):
        if not (0 < self.rho0 < self.rho1 < 1):
            raise ValueError("need 0 < rho0 < rho1 < 1")
        if not (self.eta0 > 1 > self.eta1 > 0):
            raise ValueError("need eta0 > 1 > eta1 > 0")
        if not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")
        if not (0 < self.lam_min <= self.lam_max):
            raise ValueError("invalid lambda bounds")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    def clamp(self, lam: float) -> float:
        return float(min(max(lam, self.lam_min), self.lam_max))


@dataclass(frozen=True)
class NGDUpdate:
    delta: np.ndarray = field(repr=False)
    model_value: float
    lambda_used: float
    alpha_used: float
    accepted: bool
    loss_new: float
    diagnostics: dict = field(default_factory=dict)


def auto_damping_step(ctrl: DampingState, L_k: float, L_next: float, M_delta: float):
    """Reduction-ratio update of lambda. Returns ``(new_state, accepted, rho)``."""
    if not np.isfinite(L_next):
        return replace(ctrl, lam=ctrl.clamp(ctrl.eta0 ** 2 * ctrl.lam)), False, float("nan")
    if M_delta == L_k:
        return replace(ctrl, lam=ctrl.clamp(ctrl.eta0 * ctrl.lam)), False, 0.0
    rho = (L_next - L_k) / (M_delta - L_k)
    lam = ctrl.lam
    if rho < ctrl.rho0:
        lam = ctrl.eta0 * lam
    elif rho > ctrl.rho1:
        lam = ctrl.eta1 * lam
    return replace(ctrl, lam=ctrl.clamp(lam)), True, float(rho)


def _xi(loss_new, model):
    den = abs(loss_new + model)
    return abs(loss_new - model) / den if den > 0 else (0.0 if loss_new == model else np.inf)


def ngd_iteration(theta, bundle: CurvatureBundle, ctrl: DampingState, loss_fn,
                  alpha_max: float = 1.0, n_alpha: int = 6):
    """One autonomous-damping NGD iteration.

    ``loss_fn(theta_new)`` evaluates the loss on the current samples. The
    largest ``alpha`` in ``alpha_max * 2^-k`` (``k < n_alpha``) whose model
    agreement ``xi`` passes is used; ``rho`` is computed at that ``alpha``.
    Returns ``(theta_next, new_ctrl, NGDUpdate)``.
    """
    L_k = bundle.loss_value
    delta = solve(bundle, ctrl.lam)
    diag = {"lambda": ctrl.lam, "delta_norm": float(np.linalg.norm(delta)), "solver": bundle.resolved_solver}
    if not np.all(np.isfinite(delta)):
        new = replace(ctrl, lam=ctrl.clamp(ctrl.eta0 ** 2 * ctrl.lam))
        return theta, new, NGDUpdate(delta, float("nan"), ctrl.lam, 0.0, False, float("nan"), diag)
    chosen = None
    for k in range(n_alpha):
        alpha = alpha_max * 0.5 ** k
        step = -alpha * delta
        model = quadratic_model(bundle, step)
        loss_new = loss_fn(theta + step)
        xi = _xi(loss_new, model)
        if np.isfinite(loss_new) and xi <= ctrl.xi0:
            chosen = (alpha, step, model, loss_new, xi)
            break
    if chosen is None:
        new = replace(ctrl, lam=ctrl.clamp(ctrl.eta0 ** 2 * ctrl.lam))
        diag.update(rho=None, xi=None, reason="xi")
        return theta, new, NGDUpdate(delta, float("nan"), ctrl.lam, 0.0, False, float("nan"), diag)
    alpha, step, model, loss_new, xi = chosen
    new, accepted, rho = auto_damping_step(ctrl, L_k, loss_new, model)
    if accepted and loss_new > L_k:
        # the model agreed but the loss went up; keep the trust-region reaction, drop the step
        accepted = False
    new = replace(new, alpha=alpha)
    diag.update(rho=rho, xi=xi)
    theta_next = theta + step if accepted else theta
    return theta_next, new, NGDUpdate(delta, model, ctrl.lam, alpha, accepted, loss_new, diag)


def fixed_iteration(theta, bundle: CurvatureBundle, lam: float, alpha: float):
    """Plain damped NGD step with fixed ``lam`` and ``alpha``."""
    delta = solve(bundle, lam)
    return theta - alpha * delta, delta


class DiagnosticsLog:
    """Collects per-iteration records and writes them as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, **record):
        self.records.append({k: _jsonable(v) for k, v in record.items()})

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v
