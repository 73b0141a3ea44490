"""Periodic square lattices, spin configurations and dense state vectors.

Bit convention shared by every module: spin value +1 is bit 0, -1 is bit 1,
and site 0 is the least significant bit of the basis index.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

DEFAULT_EXACT_LIMIT = 20


class ExactBackendSizeError(ValueError):
    """Raised when a dense (2^N) representation would exceed the site cap."""


def check_exact_size(n_sites: int, limit: int | None = None) -> None:
    limit = DEFAULT_EXACT_LIMIT if limit is None else limit
    if n_sites > limit:
        raise ExactBackendSizeError(
            f"exact backend size exceeded: {n_sites} sites > limit {limit} "
            f"(2^{n_sites} amplitudes)"
        )


@dataclass(frozen=True)
class LatticeSpec:
    """A rows x cols square lattice with periodic boundaries."""

    rows: int
    cols: int
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ValueError("lattice dimensions must be integers")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"lattice dimensions must be positive, got {self.rows}x{self.cols}")
        if self.boundary != "periodic":
            raise ValueError(f"only periodic boundaries are supported, got {self.boundary!r}")

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def site(self, r: int, c: int) -> int:
        return (r % self.rows) * self.cols + (c % self.cols)

    @cached_property
    def bonds(self) -> tuple[tuple[int, int], ...]:
        """Nearest-neighbour bonds as unordered pairs ``(i, j)`` with ``i < j``.

        Every site contributes a right and a down bond. On tori with a side of
        length 1 or 2 some of these coincide (or are self loops); those are
        dropped, so the list has exactly ``2 * n_sites`` entries only when both
        sides are at least 3.
        """
        seen: set[tuple[int, int]] = set()
        out: list[tuple[int, int]] = []
        for r in range(self.rows):
            for c in range(self.cols):
                i = self.site(r, c)
                for j in (self.site(r, c + 1), self.site(r + 1, c)):
                    if i == j:
                        continue
                    pair = (min(i, j), max(i, j))
                    if pair not in seen:
                        seen.add(pair)
                        out.append(pair)
        return tuple(out)


def config_index(config) -> int:
    """Basis index of a +-1 configuration (site 0 is the least significant bit)."""
    x = np.asarray(config)
    if x.ndim != 1:
        raise ValueError("config_index expects a single 1-d configuration")
    if not np.all((x == 1) | (x == -1)):
        raise ValueError(f"spin values must be +1 or -1, got {x.tolist()}")
    bits = (1 - x.astype(np.int64)) // 2
    return int(np.dot(bits, 1 << np.arange(x.size, dtype=np.int64)))


def configs_to_indices(xs) -> np.ndarray:
    """Vectorised ``config_index`` over the last axis."""
    xs = np.asarray(xs)
    bits = (1 - xs.astype(np.int64)) // 2
    return bits @ (1 << np.arange(xs.shape[-1], dtype=np.int64))


def index_config(index, n_sites: int) -> np.ndarray:
    """Inverse of :func:`config_index`; accepts a scalar or an array of indices."""
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= (1 << n_sites)):
        raise ValueError(f"index out of range for {n_sites} sites")
    bits = (idx[..., None] >> np.arange(n_sites, dtype=np.int64)) & 1
    return (1 - 2 * bits).astype(np.int8)


def enumerate_configurations(lattice: LatticeSpec | int, limit: int | None = None) -> np.ndarray:
    """All ``2^N`` configurations in ascending index order, shape ``(2^N, N)``."""
    n = lattice if isinstance(lattice, int) else lattice.n_sites
    check_exact_size(n, limit)
    return index_config(np.arange(1 << n), n)


@lru_cache(maxsize=8)
def _basis(n: int) -> np.ndarray:
    configs = index_config(np.arange(1 << n), n)
    configs.setflags(write=False)
    return configs


def basis_configurations(n_sites: int, limit: int | None = None) -> np.ndarray:
    """Shared read-only copy of :func:`enumerate_configurations`.

    Operators cache their connected elements for read-only batches, so
    reusing this array across calls avoids recomputing them.
    """
    check_exact_size(n_sites, limit)
    return _basis(int(n_sites))


def born_distribution(state) -> np.ndarray:
    """Normalised ``|psi(x)|^2`` of a dense amplitude vector."""
    psi = np.asarray(state)
    p = np.abs(psi) ** 2
    total = p.sum()
    if not np.isfinite(total) or total == 0.0:
        raise ValueError("born_distribution: state has zero or non-finite norm")
    return p / total
