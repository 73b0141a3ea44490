"""Time evolution by successive infidelity minimisations.

Each time step walks the factors of a :class:`SchemePlan`. Diagonal
exponentials are absorbed exactly into the parameters; every other factor
becomes one compression ``min_theta L(V psi_theta, U psi_prev)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ansatz import (
    AnsatzKind,
    JastrowNet,
    LogStateVector,
    PeriodicConvNet,
    VariationalState,
    apply_diagonal_exact,
    constant_state,
    random_state,
    save_checkpoint,
    zero_output_layer,
)
from .estimators import (
    DEFAULT_C,
    GRADIENT_ESTIMATORS,
    DegenerateReweightingError,
    StatePair,
    ZeroAmplitudeError,
)
from .exact import ExactPropagator, evaluate_ansatz_dense, infidelity_exact
from .lattice import DEFAULT_EXACT_LIMIT, LatticeSpec, check_exact_size
from .ngd import (
    DampingError,
    DampingState,
    bundle_from_gradient,
    fixed_iteration,
    ngd_iteration,
    pair_loss,
)
from .operators import (
    OperatorSplit,
    build_tfim,
    magnetization_x,
    recombine,
    shift_scale,
    split_diag_offdiag,
)
from .sampling import SamplerConfig, estimate_observable, full_summation, sample
from .schemes import DiagonalExp, OffDiagLinear, OffDiagPade, SchemePlan, build_plan

TARGET_FULL = 1e-8
TARGET_MC = 1e-4


class CompressionDivergedError(RuntimeError):
    """The optimisation produced a non-finite loss; ``diagnostics`` holds the history."""

    def __init__(self, message, diagnostics=None, substep=None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.substep = substep


@dataclass(frozen=True)
class OptimizerConfig:
    """Per-compression optimisation settings.

    ``target`` defaults to 1e-8 with full summation and 1e-4 with sampling.
    Setting ``fixed_lambda`` replaces the autonomous controller with plain
    damped steps of size ``fixed_alpha``.
    """

    max_iters: int = 500
    target: float | None = None
    gradient: str = "hermitian"
    loss_estimator: str = "single"
    c: float | None = DEFAULT_C
    solver: str = "auto"
    lam_init: float = 1e-3
    alpha_max: float = 1.0
    n_alpha: int = 6
    fixed_lambda: float | None = None
    fixed_alpha: float = 0.05
    full_summation: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    limit: int = DEFAULT_EXACT_LIMIT

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.gradient not in GRADIENT_ESTIMATORS:
            raise ValueError(f"unknown gradient estimator {self.gradient!r}; use one of {sorted(GRADIENT_ESTIMATORS)}")
        if self.loss_estimator not in ("single", "double"):
            raise ValueError(f"unknown loss estimator {self.loss_estimator!r}; use single or double")
        if self.solver not in ("auto", "qgt", "ntk"):
            raise ValueError(f"unknown solver {self.solver!r}; use auto, qgt or ntk")
        if self.fixed_lambda is not None and self.fixed_lambda <= 0:
            raise ValueError("fixed_lambda must be positive")

    @property
    def resolved_target(self) -> float:
        if self.target is not None:
            return self.target
        return TARGET_FULL if self.full_summation else TARGET_MC


@dataclass
class CompressionDiagnostics:
    iterations: int = 0
    initial_infidelity: float = float("nan")
    best_infidelity: float = float("inf")
    final_infidelity: float = float("nan")
    converged: bool = False
    history: list = field(default_factory=list)
    ctrl: DampingState | None = None

    @property
    def lambdas(self) -> list:
        return [h["lambda"] for h in self.history if "lambda" in h]

    @property
    def alphas(self) -> list:
        return [h["alpha"] for h in self.history if "alpha" in h]


def _seed_for(seed, *keys) -> int:
    """Deterministic 32-bit seed derived from ``seed`` and integer keys."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def _draw(vstate, cfg: OptimizerConfig, seed: int):
    if cfg.full_summation:
        return full_summation(vstate, cfg.limit)
    return sample(vstate, replace(cfg.sampler, seed=seed))


def _safe_loss(pair, cfg):
    try:
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return pair_loss(pair, cfg.loss_estimator, cfg.c)
    except (ZeroAmplitudeError, DegenerateReweightingError, FloatingPointError):
        return float("nan")


def _gradient(pair, cfg):
    fn = GRADIENT_ESTIMATORS[cfg.gradient]
    if cfg.gradient == "nonhermitian":
        return fn(pair, c=DEFAULT_C if cfg.c is None else cfg.c)
    return fn(pair)


def compress(initial: VariationalState, target, cfg: OptimizerConfig | None = None, V=None,
             seed: int = 0, ctrl: DampingState | None = None, callback=None):
    """Minimise the infidelity between ``V psi_theta`` and ``U phi``.

    ``target`` is ``(U, phi)``; ``U`` or ``V`` may be ``None`` for the
    identity. Fresh samples are drawn every iteration. Returns the best
    state seen by the monitored loss and a :class:`CompressionDiagnostics`.
    ``callback(iteration, pair, loss)`` runs after each loss evaluation.
    """
    cfg = cfg or OptimizerConfig()
    U, phi = target
    ctrl = ctrl or DampingState(lam=cfg.lam_init)
    diag = CompressionDiagnostics(ctrl=ctrl)
    tol = cfg.resolved_target
    phi_samples = full_summation(phi, cfg.limit) if cfg.full_summation else None

    theta = np.array(initial.theta)
    best_theta, best = theta.copy(), float("inf")
    prev = None
    for it in range(cfg.max_iters + 1):
        psi = initial.with_theta(theta)
        xs = _draw(psi, cfg, _seed_for(seed, it, 0))
        ys = phi_samples if cfg.full_summation else _draw(phi, cfg, _seed_for(seed, it, 1))
        pair = StatePair(psi, phi, xs, ys, V=V, U=U)
        if prev is not None:
            pair.reuse_target(prev)
        prev = pair
        loss = _safe_loss(pair, cfg)
        rec = {"iteration": it, "loss": loss}
        if callback is not None:
            callback(it, pair, loss)
        if it == 0:
            diag.initial_infidelity = loss
        if not math.isfinite(loss):
            diag.history.append(rec)
            diag.iterations = it
            raise CompressionDivergedError(f"non-finite loss at iteration {it}", diag)
        if loss < best:
            best, best_theta = loss, theta.copy()
        diag.iterations = it
        if loss < tol or it == cfg.max_iters:
            diag.history.append(rec)
            diag.converged = loss < tol
            break
        try:
            grad = _gradient(pair, cfg)
            bundle = bundle_from_gradient(grad, loss, cfg.solver, pair)
            if cfg.fixed_lambda is not None:
                theta, _ = fixed_iteration(theta, bundle, cfg.fixed_lambda, cfg.fixed_alpha)
                rec.update({"lambda": cfg.fixed_lambda, "alpha": cfg.fixed_alpha, "accepted": True})
            else:
                def loss_fn(th, pair=pair):
                    return _safe_loss(pair.with_psi(pair.psi.with_theta(th)), cfg)

                theta, ctrl, upd = ngd_iteration(theta, bundle, ctrl, loss_fn, cfg.alpha_max, cfg.n_alpha)
                rec.update({"lambda": upd.lambda_used, "alpha": upd.alpha_used, "accepted": upd.accepted,
                            "rho": upd.diagnostics.get("rho"), "xi": upd.diagnostics.get("xi")})
        except DampingError as exc:
            diag.history.append(rec)
            raise CompressionDivergedError(f"solver failure at iteration {it}: {exc}", diag) from exc
        diag.history.append(rec)
        if not np.all(np.isfinite(theta)):
            raise CompressionDivergedError(f"non-finite parameters after iteration {it}", diag)
    diag.best_infidelity = best
    diag.final_infidelity = diag.history[-1]["loss"]
    diag.ctrl = ctrl
    return initial.with_theta(best_theta), diag


# time stepping ------------------------------------------------------------------------


@dataclass
class SubstepDiagnostics:
    index: int
    factor: object
    infidelity: float
    iterations: int
    lambdas: list = field(default_factory=list)
    alphas: list = field(default_factory=list)


def step(vstate: VariationalState, plan: SchemePlan, split: OperatorSplit, dt: float,
         cfg: OptimizerConfig | None = None, seed: int = 0):
    """One time step of ``plan``; each compression warm-starts from its input."""
    cfg = cfg or OptimizerConfig()
    op = split.x_part if plan.is_split else recombine(split)
    trivial = len(op.terms) == 0
    ctrl = DampingState(lam=cfg.lam_init)
    out = []
    for k, f in enumerate(plan.factors):
        if isinstance(f, DiagonalExp):
            vstate = apply_diagonal_exact(vstate, f.alpha, split.z_part, dt)
            continue
        if trivial:
            continue
        if isinstance(f, OffDiagLinear):
            U, V = shift_scale(op, f.a * (-1j), dt), None
        elif isinstance(f, OffDiagPade):
            U, V = shift_scale(op, f.a * (-1j), dt), shift_scale(op, f.b * (-1j), dt)
        else:
            raise TypeError(f"unknown factor {f!r}")
        try:
            vstate, d = compress(vstate, (U, vstate), cfg, V=V, seed=_seed_for(seed, k), ctrl=ctrl)
        except CompressionDivergedError as exc:
            raise CompressionDivergedError(f"substep {k} ({f}): {exc}", exc.diagnostics, substep=k) from exc
        ctrl = d.ctrl
        out.append(SubstepDiagnostics(k, f, d.best_infidelity, d.iterations, d.lambdas, d.alphas))
    return vstate, out


# quenches ------------------------------------------------------------------------------


@dataclass(frozen=True)
class AnsatzSpec:
    kind: str = "JastrowNet"
    channels: tuple = (4, 4)
    kernel: int = 3
    backbone: bool = True
    init_scale: float = 0.1

    def build(self, lattice: LatticeSpec):
        kind = AnsatzKind(self.kind)
        if kind is AnsatzKind.LOG_STATE_VECTOR:
            return LogStateVector(lattice.n_sites)
        conv = PeriodicConvNet(lattice, tuple(self.channels), self.kernel)
        if kind is AnsatzKind.CONV:
            return conv
        return JastrowNet(lattice.n_sites, conv if self.backbone else None)


@dataclass(frozen=True)
class QuenchSpec:
    lattice: LatticeSpec
    J: float = 1.0
    h_initial: float = math.inf
    h_final: float = 2 * 3.044
    scheme: str = "SPPE"
    order: int = 2
    dt: float = 0.03 / (2 * 3.044)
    t_final: float = 1.0 / (2 * 3.044)
    ansatz: AnsatzSpec = field(default_factory=AnsatzSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init_target: float | None = None
    init_max_iters: int = 500
    exact_comparison: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_final >= 0:
            raise ValueError("t_final must be non-negative")
        if not self.h_initial > 0:
            raise ValueError("h_initial must be positive (use inf for the paramagnet)")

    @property
    def n_steps(self) -> int:
        n = round(self.t_final / self.dt)
        if abs(n * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(f"t_final={self.t_final} is not a multiple of dt={self.dt}")
        return int(n)


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    mx: list = field(default_factory=list)
    mx_err: list = field(default_factory=list)
    exact_infidelity: list = field(default_factory=list)
    substeps: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    initial_infidelity: float = float("nan")
    complete: bool = True
    error: str | None = None
    state: VariationalState | None = None


def initial_target(spec: QuenchSpec):
    """``(target state, dense vector)`` for the ground state at ``h_initial``."""
    n = spec.lattice.n_sites
    if math.isinf(spec.h_initial):
        dense = np.full(1 << n, 2.0 ** (-n / 2), dtype=complex) if n <= spec.optimizer.limit else None
        return constant_state(LogStateVector(n)) if n <= spec.optimizer.limit else None, dense
    check_exact_size(n, spec.optimizer.limit)
    h0 = build_tfim(spec.lattice, spec.J, spec.h_initial).to_dense(spec.optimizer.limit)
    gs = np.linalg.eigh(h0)[1][:, 0]
    gs = gs * np.sign(gs[np.argmax(np.abs(gs))])
    model = LogStateVector(n)
    return VariationalState(model, np.concatenate([np.log(np.abs(gs)), np.zeros(1 << n)])), gs.astype(complex)


def prepare_initial(spec: QuenchSpec, model):
    """Compress random parameters onto the initial ground state."""
    start = random_state(model, seed=_seed_for(spec.seed, 1), scale=spec.ansatz.init_scale)
    if math.isinf(spec.h_initial):
        start = zero_output_layer(start)
    phi, _ = initial_target(spec)
    if phi is None:
        phi = constant_state(model)
    if spec.init_target is not None:
        tol = spec.init_target
    elif not spec.optimizer.full_summation:
        tol = TARGET_MC
    else:
        tol = 1e-12 if model.kind is AnsatzKind.LOG_STATE_VECTOR or getattr(model, "backbone", 1) is None else 1e-8
    cfg = replace(spec.optimizer, target=tol, max_iters=spec.init_max_iters)
    return compress(start, (None, phi), cfg, seed=_seed_for(spec.seed, 2))


def run_quench(spec: QuenchSpec, out_dir=None, progress=None) -> TrajectoryRecord:
    """Evolve the initial ground state under the ``h_final`` Hamiltonian.

    A failing substep stops the run; the record then has ``complete=False``.
    ``progress(step_index, record)`` is called after every step if given.
    """
    lattice = spec.lattice
    H = build_tfim(lattice, spec.J, spec.h_final)
    split = split_diag_offdiag(H)
    plan = build_plan(spec.scheme, spec.order)
    model = spec.ansatz.build(lattice)
    mx_op = magnetization_x(lattice.n_sites)
    n_steps = spec.n_steps
    rec = TrajectoryRecord()
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    exact = None
    _, psi0 = initial_target(spec)
    if spec.exact_comparison and lattice.n_sites <= spec.optimizer.limit:
        exact = ExactPropagator(H, spec.optimizer.limit)

    def observe(vstate, k):
        t = k * spec.dt
        if spec.optimizer.full_summation:
            samples = full_summation(vstate, spec.optimizer.limit)
        else:
            samples = sample(vstate, replace(spec.optimizer.sampler, seed=_seed_for(spec.seed, 3, k)))
        mx, err = estimate_observable(vstate, mx_op, samples)
        rec.times.append(t)
        rec.mx.append(mx)
        rec.mx_err.append(err)
        if exact is not None:
            ref = exact.evolve(psi0, t)
            amps = evaluate_ansatz_dense(vstate, rescale=True, limit=spec.optimizer.limit)
            rec.exact_infidelity.append(infidelity_exact(amps, ref))
        if ckpt_dir is not None:
            path = ckpt_dir / f"step_{k:05d}.json"
            save_checkpoint(vstate, path)
            rec.checkpoints.append(str(path.name))
        rec.state = vstate

    try:
        vstate, d0 = prepare_initial(spec, model)
    except CompressionDivergedError as exc:
        rec.complete, rec.error = False, f"initial state: {exc}"
        return rec
    rec.initial_infidelity = d0.best_infidelity
    observe(vstate, 0)
    for k in range(1, n_steps + 1):
        try:
            vstate, subs = step(vstate, plan, split, spec.dt, spec.optimizer, seed=_seed_for(spec.seed, 4, k))
        except CompressionDivergedError as exc:
            rec.complete, rec.error = False, f"step {k}: {exc}"
            break
        rec.substeps.append(subs)
        observe(vstate, k)
        if progress is not None:
            progress(k, rec)
    return rec


def exact_trajectory(spec: QuenchSpec, limit: int | None = None):
    """``(times, M_x, fidelity with the initial state)`` of the exact evolution."""
    limit = spec.optimizer.limit if limit is None else limit
    check_exact_size(spec.lattice.n_sites, limit)
    H = build_tfim(spec.lattice, spec.J, spec.h_final)
    _, psi0 = initial_target(replace(spec, optimizer=replace(spec.optimizer, limit=limit)))
    prop = ExactPropagator(H, limit)
    mx = magnetization_x(spec.lattice.n_sites).to_sparse(limit)
    n = spec.n_steps
    times, mxs, fids = [], [], []
    for k in range(n + 1):
        t = k * spec.dt
        psi = prop.evolve(psi0, t)
        times.append(t)
        mxs.append(float(np.vdot(psi, mx @ psi).real))
        fids.append(float(abs(np.vdot(psi0, psi)) ** 2))
    return times, mxs, fids
