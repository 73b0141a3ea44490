"""TOML run configuration with materialised defaults.

A configuration is a two-level table. Every key has a default here, so the
"effective" configuration written next to the outputs is complete and
re-runs to the same result.
"""

from __future__ import annotations

import copy
import math
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

from .ansatz import AnsatzKind
from .driver import AnsatzSpec, OptimizerConfig, QuenchSpec
from .lattice import DEFAULT_EXACT_LIMIT, LatticeSpec
from .sampling import SamplerConfig
from .schemes import SUPPORTED, SchemeKind, UnsupportedSchemeError, supported_schemes_text

H_CRITICAL = 3.044


class ConfigError(ValueError):
    pass


_NONE = "none"  # TOML has no null; optional numbers use this sentinel

DEFAULTS = {
    "lattice": {"rows": 2, "cols": 2},
    "hamiltonian": {"J": 1.0, "h_initial": math.inf, "h_final": 2 * H_CRITICAL},
    "scheme": {"kind": "SPPE", "order": 2},
    "time": {"dt": 0.01, "t_final": 0.1},
    "ansatz": {"kind": "JastrowNet", "channels": [4, 4], "kernel": 3, "backbone": True, "init_scale": 0.1},
    "optimizer": {
        "max_iters": 500,
        "target": _NONE,
        "gradient": "hermitian",
        "loss_estimator": "single",
        "c": -0.5,
        "solver": "auto",
        "lam_init": 1e-3,
        "alpha_max": 1.0,
        "n_alpha": 6,
        "fixed_lambda": _NONE,
        "fixed_alpha": 0.05,
        "init_target": _NONE,
        "init_max_iters": 500,
    },
    "sampler": {
        "full_summation": True,
        "n_chains": 16,
        "n_samples_per_chain": 64,
        "burn_in": 100,
        "thinning": 1,
        "proposal": "single_flip",
    },
    "output": {"exact_comparison": True, "checkpoints": True, "exact_limit": DEFAULT_EXACT_LIMIT},
    "scheme_check": {
        "rows": 2,
        "cols": 3,
        "h": 2 * H_CRITICAL,
        "t_final": 1.0,
        "schemes": ["LPE-1", "LPE-2", "LPE-3", "LPE-4", "PPE-2", "PPE-4", "PPE-6",
                    "SLPE-1", "SLPE-2", "SLPE-3", "SPPE-2", "SPPE-3", "SPPE-4"],
        "dt_grid": [2.0 ** -k for k in range(4, 15)],
    },
    "bench": {"t_target": 0.05, "iterations": 50},
}

_OPTIONAL_FLOATS = {("optimizer", "target"), ("optimizer", "fixed_lambda"), ("optimizer", "init_target")}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def merge(user: dict) -> dict:
    """Defaults overlaid with ``user``; unknown sections, keys or types raise."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, table in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown section [{section}]; known sections: {', '.join(cfg)}")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}; known keys: {', '.join(cfg[section])}")
            default = cfg[section][key]
            if (section, key) in _OPTIONAL_FLOATS:
                ok = value == _NONE or _type_ok(1.0, value)
            else:
                ok = _type_ok(default, value)
            if not ok:
                raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
            cfg[section][key] = float(value) if isinstance(default, float) else value
    return cfg


def load(path) -> dict:
    if path is None:
        return merge({})
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return merge(user)


def dump(cfg: dict, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg, fh)


def _opt(value):
    return None if value == _NONE else float(value)


def parse_scheme(name: str):
    """``"SPPE-3"`` or ``"S-PPE-3"`` to ``(SchemeKind, order)``."""
    text = name.strip().upper().replace("S-", "S")
    kind, _, order = text.rpartition("-")
    try:
        kind = SchemeKind.parse(kind)
        order = int(order)
    except (ValueError, KeyError) as exc:
        raise UnsupportedSchemeError(f"unknown scheme {name!r}; supported: {supported_schemes_text()}") from exc
    if order not in SUPPORTED[kind]:
        raise UnsupportedSchemeError(f"unsupported scheme {name!r}; supported: {supported_schemes_text()}")
    return kind, order


def quench_spec(cfg: dict, seed: int) -> QuenchSpec:
    lat = LatticeSpec(cfg["lattice"]["rows"], cfg["lattice"]["cols"])
    kind = SchemeKind.parse(cfg["scheme"]["kind"])
    order = cfg["scheme"]["order"]
    if order not in SUPPORTED[kind]:
        raise UnsupportedSchemeError(f"unsupported order {order} for {kind.value}; supported: {supported_schemes_text()}")
    a = cfg["ansatz"]
    try:
        AnsatzKind(a["kind"])
    except ValueError as exc:
        raise ConfigError(f"ansatz.kind: unknown ansatz {a['kind']!r}; use one of "
                          f"{', '.join(k.value for k in AnsatzKind)}") from exc
    o, s = cfg["optimizer"], cfg["sampler"]
    sampler = SamplerConfig(s["n_chains"], s["n_samples_per_chain"], s["burn_in"], s["thinning"], s["proposal"], seed)
    opt = OptimizerConfig(
        max_iters=o["max_iters"], target=_opt(o["target"]), gradient=o["gradient"],
        loss_estimator=o["loss_estimator"], c=o["c"], solver=o["solver"], lam_init=o["lam_init"],
        alpha_max=o["alpha_max"], n_alpha=o["n_alpha"], fixed_lambda=_opt(o["fixed_lambda"]),
        fixed_alpha=o["fixed_alpha"], full_summation=s["full_summation"], sampler=sampler,
        limit=cfg["output"]["exact_limit"],
    )
    h = cfg["hamiltonian"]
    return QuenchSpec(
        lattice=lat, J=h["J"], h_initial=h["h_initial"], h_final=h["h_final"],
        scheme=kind.value, order=order, dt=cfg["time"]["dt"], t_final=cfg["time"]["t_final"],
        ansatz=AnsatzSpec(a["kind"], tuple(a["channels"]), a["kernel"], a["backbone"], a["init_scale"]),
        optimizer=opt, init_target=_opt(o["init_target"]), init_max_iters=o["init_max_iters"],
        exact_comparison=cfg["output"]["exact_comparison"], seed=seed,
    )
