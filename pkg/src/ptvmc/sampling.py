"""Metropolis sampling of Born distributions and exact full summation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import basis_configurations

MAX_START_ATTEMPTS = 100


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 16
    n_samples_per_chain: int = 64
    burn_in: int = 100
    thinning: int = 1
    proposal: str = "single_flip"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_chains", "n_samples_per_chain", "thinning"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if int(self.burn_in) < 0:
            raise ValueError("burn_in must be non-negative")
        if self.proposal not in ("single_flip", "exchange"):
            raise ValueError(f"unknown proposal {self.proposal!r}; use single_flip or exchange")

    @property
    def n_samples(self) -> int:
        return self.n_chains * self.n_samples_per_chain


@dataclass(frozen=True, eq=False)
class SampleSet:
    configs: np.ndarray
    weights: np.ndarray
    provenance: str
    chain: np.ndarray = field(default=None, repr=False)
    source: str = ""
    # exact sets remember the state and log amplitudes they were built from
    origin: object = field(default=None, repr=False)
    logpsi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != len(self.configs):
            raise ValueError("one weight per configuration is required")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("sample weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        if self.chain is None:
            object.__setattr__(self, "chain", np.zeros(len(self.configs), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.configs)

    @property
    def is_exact(self) -> bool:
        return self.provenance == "full_summation"


def _chain_streams(seed: int, n_chains: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def _starting_configs(vstate, rngs, n_sites):
    x = np.empty((len(rngs), n_sites), dtype=np.int8)
    for c, rng in enumerate(rngs):
        for _ in range(MAX_START_ATTEMPTS):
            cand = (1 - 2 * rng.integers(0, 2, size=n_sites)).astype(np.int8)
            if np.isfinite(vstate.log_amplitude(cand).real[0]):
                x[c] = cand
                break
        else:
            raise SamplingError(
                f"chain {c}: no non-zero amplitude start found in {MAX_START_ATTEMPTS} attempts"
            )
    return x


def sample(vstate, cfg: SamplerConfig, start=None) -> SampleSet:
    """Metropolis chains targeting ``|psi|^2``, one independent stream per chain.

    One sweep is ``n_sites`` proposals. Samples are ordered by chain, then
    by step. ``start`` optionally gives one initial configuration per chain.
    """
    n = vstate.n_sites
    rngs = _chain_streams(cfg.seed, cfg.n_chains)
    x = _starting_configs(vstate, rngs, n)
    if start is not None:
        x = np.array(start, dtype=np.int8).reshape(cfg.n_chains, n)
    steps = (cfg.burn_in + cfg.n_samples_per_chain * cfg.thinning) * n
    n_pick = 2 if cfg.proposal == "exchange" else 1
    picks = np.stack([rng.integers(0, n, size=(steps, n_pick)) for rng in rngs], axis=1)
    draws = np.stack([rng.random(steps) for rng in rngs], axis=1)

    rows = np.arange(cfg.n_chains)
    logp = vstate.log_amplitude(x).real
    kept = np.empty((cfg.n_chains, cfg.n_samples_per_chain, n), dtype=np.int8)
    stride = cfg.thinning * n
    burn = cfg.burn_in * n
    for t in range(steps):
        xp = x.copy()
        if n_pick == 1:
            xp[rows, picks[t, :, 0]] *= -1
        else:
            i, j = picks[t, :, 0], picks[t, :, 1]
            xp[rows, i], xp[rows, j] = x[rows, j], x[rows, i]
        logq = vstate.log_amplitude(xp).real
        with np.errstate(over="ignore", invalid="ignore"):
            accept = np.log(draws[t]) < 2.0 * (logq - logp)
        x[accept] = xp[accept]
        logp[accept] = logq[accept]
        done = t + 1 - burn
        if done > 0 and done % stride == 0:
            kept[:, done // stride - 1] = x
    configs = kept.reshape(-1, n)
    m = configs.shape[0]
    chain = np.repeat(np.arange(cfg.n_chains), cfg.n_samples_per_chain)
    return SampleSet(configs, np.full(m, 1.0 / m), "mcmc", chain, source=vstate.kind.value)


def born_weights(logpsi) -> np.ndarray:
    lw = 2.0 * np.real(logpsi)
    top = np.max(lw)
    if not np.isfinite(top):
        raise SamplingError("state has zero or non-finite amplitudes on the whole basis")
    w = np.exp(lw - top)
    return w / w.sum()


def full_summation(vstate, limit: int | None = None) -> SampleSet:
    """Every configuration with its exact Born weight."""
    configs = basis_configurations(vstate.n_sites, limit)
    logpsi = vstate.log_amplitude(configs)
    return SampleSet(configs, born_weights(logpsi), "full_summation", source=vstate.kind.value,
                     origin=vstate, logpsi=logpsi)


def local_estimator(vstate, op, configs, logpsi=None) -> np.ndarray:
    """``O_loc(x) = sum_x' <x|O|x'> psi(x')/psi(x)``."""
    configs = np.asarray(configs)
    if logpsi is None:
        logpsi = vstate.log_amplitude(configs)
    xps, vals = op.connected_batch(configs)
    b, m, n = xps.shape
    logq = vstate.log_amplitude(xps.reshape(b * m, n)).reshape(b, m)
    return np.sum(vals * np.exp(logq - logpsi[:, None]), axis=1)


def batch_means_stderr(values, weights, chain) -> float:
    """Standard error of a weighted mean from per-chain means.

    With a single chain the samples are cut into ten contiguous batches.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(chain)
    if np.unique(labels).size < 2:
        labels = np.arange(values.size) * 10 // max(values.size, 1)
    groups = np.unique(labels)
    if groups.size < 2:
        return float("nan")
    means = np.array([np.average(values[labels == g], weights=weights[labels == g]) for g in groups])
    return float(np.std(means, ddof=1) / np.sqrt(groups.size))


def estimate_observable(vstate, op, samples: SampleSet):
    """``(mean, stderr)`` of a Hermitian observable; stderr is 0 in full summation."""
    loc = local_estimator(vstate, op, samples.configs)
    mean = float(np.dot(samples.weights, loc.real))
    if samples.is_exact:
        return mean, 0.0
    return mean, batch_means_stderr(loc.real, samples.weights, samples.chain)
