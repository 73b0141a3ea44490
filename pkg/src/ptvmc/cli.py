"""Command line front end: ``ptvmc <subcommand> --config run.toml``.

Every subcommand writes its primary CSV, a JSONL diagnostics file and the
effective configuration into ``--out-dir``. Outputs depend only on the
configuration and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .ansatz import save_checkpoint
from .driver import (
    CompressionDivergedError,
    _seed_for,
    compress,
    exact_trajectory,
    prepare_initial,
    run_quench,
)
from .estimators import FIDELITY_ESTIMATORS, DegenerateReweightingError, StatePair, ZeroAmplitudeError
from .exact import evaluate_ansatz_dense, fidelity_exact, infidelity_exact
from .lattice import ExactBackendSizeError, LatticeSpec
from .operators import build_tfim, shift_scale
from .sampling import sample
from .schemes import DiagonalExp, UnsupportedSchemeError, build_plan, verify_order

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json_default(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, complex):
        return [v.real, v.imag]
    return str(v)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), default=_json_default, sort_keys=True) + "\n")


# subcommands ---------------------------------------------------------------------


def cmd_quench(cfg: dict, seed: int, out: Path, threads: int = 1) -> int:
    spec = cfgmod.quench_spec(cfg, seed)
    spec.n_steps  # validates dt / t_final before any work
    build_plan(spec.scheme, spec.order)
    rec = run_quench(spec, out_dir=out if cfg["output"]["checkpoints"] else None)
    n_sub = max((len(s) for s in rec.substeps), default=0)
    if n_sub == 0:
        n_sub = sum(not isinstance(f, DiagonalExp) for f in build_plan(spec.scheme, spec.order).factors)
    header = ["t", "mx", "mx_err", "exact_infidelity"]
    header += [f"substep{i + 1}_infidelity" for i in range(n_sub)]
    header += [f"substep{i + 1}_iterations" for i in range(n_sub)]
    rows = []
    for k, t in enumerate(rec.times):
        ex = rec.exact_infidelity[k] if k < len(rec.exact_infidelity) else None
        subs = rec.substeps[k - 1] if k >= 1 else []
        infs = [s.infidelity for s in subs] + [None] * (n_sub - len(subs))
        its = [s.iterations for s in subs] + [None] * (n_sub - len(subs))
        rows.append([t, rec.mx[k], rec.mx_err[k], ex, *infs, *its])
    _write_csv(out / "trajectory.csv", header, rows)
    diag = [{"event": "initial_state", "infidelity": rec.initial_infidelity}]
    for k, subs in enumerate(rec.substeps, start=1):
        for s in subs:
            diag.append({"event": "substep", "step": k, "substep": s.index, "factor": repr(s.factor),
                         "infidelity": s.infidelity, "iterations": s.iterations,
                         "lambdas": s.lambdas, "alphas": s.alphas})
    if not rec.complete:
        diag.append({"event": "stopped", "error": rec.error})
    _write_jsonl(out / "diagnostics.jsonl", diag)
    if not rec.complete:
        print(f"partial trajectory: {rec.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_exact(cfg: dict, seed: int, out: Path, threads: int = 1) -> int:
    spec = cfgmod.quench_spec(cfg, seed)
    times, mx, fid = exact_trajectory(spec)
    _write_csv(out / "exact.csv", ["t", "mx", "fidelity_vs_initial"], zip(times, mx, fid))
    _write_jsonl(out / "diagnostics.jsonl", [{"event": "exact", "n_sites": spec.lattice.n_sites,
                                              "n_times": len(times)}])
    return EXIT_OK


def _order_check(args):
    plan, sc, J = args
    with threadpool_limits(limits=1):
        H = build_tfim(LatticeSpec(sc["rows"], sc["cols"]), J, sc["h"])
        return verify_order(plan, H, sc["t_final"], sc["dt_grid"])


def cmd_scheme_check(cfg: dict, seed: int, out: Path, threads: int = 1) -> int:
    sc = cfg["scheme_check"]
    plans = [build_plan(*cfgmod.parse_scheme(name)) for name in sc["schemes"]]
    jobs = [(plan, sc, cfg["hamiltonian"]["J"]) for plan in plans]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            checks = list(pool.map(_order_check, jobs))
    else:
        checks = [_order_check(job) for job in jobs]
    rows, diag = [], []
    for plan, check in zip(plans, checks):
        for dt, err in zip(check.dts, check.errors):
            rows.append([plan.name, plan.order, dt, err, check.slope])
        diag.append({"event": "order_check", "scheme": plan.name, "order": plan.order,
                     "slope": check.slope, "fit_mask": list(check.fit_mask)})
    _write_csv(out / "scheme_check.csv", ["scheme", "order", "dt", "l2_error", "fitted_slope"], rows)
    _write_jsonl(out / "diagnostics.jsonl", diag)
    return EXIT_OK


def _matching_problem(cfg: dict, seed: int):
    """Initial ansatz state and the target ``(U, psi0)`` with ``U = 1 - i H t``."""
    spec = cfgmod.quench_spec(cfg, seed)
    model = spec.ansatz.build(spec.lattice)
    psi0, d0 = prepare_initial(spec, model)
    H = build_tfim(spec.lattice, spec.J, spec.h_final)
    U = shift_scale(H, -1j, cfg["bench"]["t_target"])
    exact = None
    if spec.lattice.n_sites <= spec.optimizer.limit:
        U_dense = U.to_sparse(spec.optimizer.limit)
        target = U_dense @ evaluate_ansatz_dense(psi0, rescale=True, limit=spec.optimizer.limit)

        def exact(vstate):
            return evaluate_ansatz_dense(vstate, rescale=True, limit=spec.optimizer.limit), target

    opt = replace(spec.optimizer, max_iters=cfg["bench"]["iterations"])
    return spec, psi0, U, opt, exact, d0


def cmd_estimator_bench(cfg: dict, seed: int, out: Path, threads: int = 1) -> int:
    spec, psi0, U, opt, exact, d0 = _matching_problem(cfg, seed)
    sampler = spec.optimizer.sampler
    rows = []

    def log(it, pair, loss):
        psi = pair.psi
        xs = sample(psi, replace(sampler, seed=_seed_for(seed, 5, it, 0)))
        ys = sample(psi0, replace(sampler, seed=_seed_for(seed, 5, it, 1)))
        mc = StatePair(psi, psi0, xs, ys, U=U)
        ref = fidelity_exact(*exact(psi)) if exact is not None else None
        for name, fn in FIDELITY_ESTIMATORS.items():
            try:
                r = fn(mc)
                value, var = r.value, r.variance
            except (ZeroAmplitudeError, DegenerateReweightingError):
                value = var = float("nan")
            rows.append([it, name, value, var, ref] if exact is not None else [it, name, value, var])

    status = EXIT_OK
    try:
        _, diag = compress(psi0, (U, psi0), opt, seed=_seed_for(seed, 6), callback=log)
        history = diag.history
    except CompressionDivergedError as exc:
        history, status = (exc.diagnostics.history if exc.diagnostics else []), EXIT_PARTIAL
        print(f"partial run: {exc}", file=sys.stderr)
    header = ["iteration", "estimator", "value", "variance"] + (["exact"] if exact is not None else [])
    _write_csv(out / "estimator_bench.csv", header, rows)
    _write_jsonl(out / "diagnostics.jsonl",
                 [{"event": "initial_state", "infidelity": d0.best_infidelity}] + history)
    return status


def cmd_compress(cfg: dict, seed: int, out: Path, threads: int = 1) -> int:
    spec, psi0, U, opt, exact, d0 = _matching_problem(cfg, seed)
    status = EXIT_OK
    try:
        state, diag = compress(psi0, (U, psi0), opt, seed=_seed_for(seed, 6))
        history = diag.history
    except CompressionDivergedError as exc:
        state, history, status = None, (exc.diagnostics.history if exc.diagnostics else []), EXIT_PARTIAL
        print(f"partial run: {exc}", file=sys.stderr)
    keys = ["iteration", "loss", "lambda", "alpha", "accepted", "rho", "xi"]
    _write_csv(out / "compress.csv", keys, ([h.get(k) for k in keys] for h in history))
    summary = {"event": "summary", "initial_state_infidelity": d0.best_infidelity, "status": status}
    if state is not None:
        save_checkpoint(state, out / "final_state.json")
        if exact is not None:
            summary["exact_infidelity"] = infidelity_exact(*exact(state))
    _write_jsonl(out / "diagnostics.jsonl", history + [summary])
    return status


COMMANDS = {
    "quench": cmd_quench,
    "exact": cmd_exact,
    "scheme-check": cmd_scheme_check,
    "estimator-bench": cmd_estimator_bench,
    "compress": cmd_compress,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptvmc", description="Projected time evolution of neural quantum states.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="TOML run configuration (defaults when omitted)")
    p.add_argument("--out-dir", type=Path, default=Path("ptvmc-out"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent work units; outputs do not depend on it")
    p.add_argument("--full-summation", action="store_true", help="sum over the full basis instead of sampling")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("ptvmc: error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = cfgmod.load(args.config)
        if args.full_summation:
            cfg["sampler"]["full_summation"] = True
        args.out_dir.mkdir(parents=True, exist_ok=True)
        cfgmod.dump(cfg, args.out_dir / "effective_config.toml")
        # BLAS reductions are not bitwise stable across thread counts, so the
        # numerics stay single-threaded and --threads sizes a pool of workers
        # over independent units (schemes in scheme-check).
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, args.seed, args.out_dir, args.threads)
    except (cfgmod.ConfigError, UnsupportedSchemeError, ExactBackendSizeError, ValueError) as exc:
        print(f"ptvmc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
