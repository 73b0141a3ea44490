"""K-local spin operators evaluated through their connected elements.

An operator is a sum of local terms ``coeff * M`` where ``M`` acts on a tuple
of sites. The local basis of a term follows the global bit convention: local
bit ``j`` belongs to ``sites[j]`` and bit 0 means spin +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, check_exact_size, configs_to_indices, enumerate_configurations

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_1 = np.eye(1, dtype=complex)


@dataclass(frozen=True)
class LocalTerm:
    sites: tuple[int, ...]
    matrix: np.ndarray
    coeff: complex = 1.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        k = len(self.sites)
        if m.shape != (1 << k, 1 << k):
            raise ValueError(f"local matrix for {k} sites must be {1 << k}x{1 << k}, got {m.shape}")
        if len(set(self.sites)) != k:
            raise ValueError(f"repeated site in term {self.sites}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))

    @property
    def scaled(self) -> np.ndarray:
        return self.coeff * self.matrix


@dataclass(frozen=True)
class _FlipSlot:
    sites: np.ndarray   # global sites of the term
    mask: int           # local flip pattern
    flip: np.ndarray    # global sites flipped by this slot
    table: np.ndarray   # value as a function of the local row index


class SparseOperator:
    """Sum of local terms on ``n_sites`` spins.

    Rows are produced on the fly from the local matrices. The result of the
    last ``connected_batch`` call on a read-only array is kept, which makes
    repeated full-summation passes over the shared basis cheap.
    ``connected_elements`` returns one merged row.
    """

    def __init__(self, n_sites: int, terms=()):
        self.n_sites = int(n_sites)
        self.terms: tuple[LocalTerm, ...] = tuple(terms)
        for t in self.terms:
            if any(s < 0 or s >= self.n_sites for s in t.sites):
                raise ValueError(f"term sites {t.sites} out of range for {self.n_sites} sites")
        self._batch_cache = None
        self._compile()

    def _compile(self):
        diag_parts = []
        slots = []
        for t in self.terms:
            m = t.scaled
            k = len(t.sites)
            sites = np.asarray(t.sites, dtype=np.int64)
            d = np.diag(m).copy()
            if np.any(d != 0):
                diag_parts.append((sites, d))
            rows = np.arange(1 << k)
            for mask in range(1, 1 << k):
                table = m[rows, rows ^ mask]
                if np.any(table != 0):
                    flip = sites[[j for j in range(k) if (mask >> j) & 1]]
                    slots.append(_FlipSlot(sites, mask, flip, table))
        self._diag_parts = diag_parts
        self._slots = slots

    @property
    def max_connections(self) -> int:
        return 1 + len(self._slots)

    @property
    def is_diagonal(self) -> bool:
        return not self._slots

    def __repr__(self):
        return f"SparseOperator(n_sites={self.n_sites}, terms={len(self.terms)})"

    @staticmethod
    def _local_rows(xs: np.ndarray, sites: np.ndarray) -> np.ndarray:
        if sites.size == 0:
            return np.zeros(xs.shape[0], dtype=np.int64)
        bits = (1 - xs[:, sites].astype(np.int64)) // 2
        return bits @ (1 << np.arange(sites.size, dtype=np.int64))

    def diagonal(self, xs) -> np.ndarray:
        """Diagonal matrix elements ``<x|O|x>`` for a batch of configurations."""
        xs = np.atleast_2d(np.asarray(xs))
        out = np.zeros(xs.shape[0], dtype=complex)
        for sites, d in self._diag_parts:
            out += d[self._local_rows(xs, sites)]
        return out

    def connected_batch(self, xs):
        """Rows of the operator for a batch of configurations.

        Returns ``(xps, vals)`` with shapes ``(B, M, N)`` and ``(B, M)``; slot 0
        is the diagonal. Entries may be zero and the same ``x'`` may appear in
        more than one slot; sums over slots are exact rows.
        """
        frozen = isinstance(xs, np.ndarray) and not xs.flags.writeable
        if frozen and self._batch_cache is not None and self._batch_cache[0] is xs:
            return self._batch_cache[1]
        key = xs
        xs = np.atleast_2d(np.asarray(xs, dtype=np.int8))
        b = xs.shape[0]
        m = self.max_connections
        xps = np.repeat(xs[:, None, :], m, axis=1)
        vals = np.zeros((b, m), dtype=complex)
        vals[:, 0] = self.diagonal(xs)
        for k, slot in enumerate(self._slots, start=1):
            rows = self._local_rows(xs, slot.sites)
            vals[:, k] = slot.table[rows]
            xps[:, k, slot.flip] *= -1
        if frozen:
            xps.setflags(write=False)
            vals.setflags(write=False)
            self._batch_cache = (key, (xps, vals))
        return xps, vals

    def connected_elements(self, x):
        """Merged nonzero row ``[(x', <x|O|x'>), ...]`` for one configuration."""
        xps, vals = self.connected_batch(np.asarray(x)[None, :])
        xps, vals = xps[0], vals[0]
        idx = configs_to_indices(xps)
        merged: dict[int, complex] = {}
        first: dict[int, np.ndarray] = {}
        for i, v, xp in zip(idx, vals, xps):
            merged[int(i)] = merged.get(int(i), 0.0) + v
            first.setdefault(int(i), xp)
        return [(first[i], complex(v)) for i, v in merged.items() if v != 0]

    def to_sparse(self, limit: int | None = None) -> sp.csr_matrix:
        """Sparse ``2^N x 2^N`` matrix, ``M[x, x'] = <x|O|x'>``."""
        check_exact_size(self.n_sites, limit)
        xs = enumerate_configurations(self.n_sites, limit)
        xps, vals = self.connected_batch(xs)
        dim = xs.shape[0]
        rows = np.repeat(np.arange(dim), xps.shape[1])
        cols = configs_to_indices(xps.reshape(-1, self.n_sites))
        mat = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(dim, dim)).tocsr()
        mat.sum_duplicates()
        mat.eliminate_zeros()
        return mat

    def to_dense(self, limit: int | None = None) -> np.ndarray:
        return self.to_sparse(limit).toarray()

    def scaled(self, factor: complex) -> "SparseOperator":
        return SparseOperator(
            self.n_sites, [LocalTerm(t.sites, t.matrix, t.coeff * factor) for t in self.terms]
        )


def identity(n_sites: int) -> SparseOperator:
    return SparseOperator(n_sites, [LocalTerm((), IDENTITY_1, 1.0)])


def sigma_x(n_sites: int, site: int, coeff: complex = 1.0) -> SparseOperator:
    return SparseOperator(n_sites, [LocalTerm((site,), SIGMA_X, coeff)])


def build_tfim(lattice: LatticeSpec, J: float, h: float) -> SparseOperator:
    """``H = -J sum_<ij> Z_i Z_j - h sum_i X_i`` on the lattice's unique bonds."""
    zz = np.kron(SIGMA_Z, SIGMA_Z)
    terms = [LocalTerm(bond, zz, -J) for bond in lattice.bonds] if J != 0 else []
    if h != 0:
        terms += [LocalTerm((i,), SIGMA_X, -h) for i in range(lattice.n_sites)]
    return SparseOperator(lattice.n_sites, terms)


def magnetization_x(n_sites: int) -> SparseOperator:
    """``M_x = (1/N) sum_i X_i``."""
    return SparseOperator(n_sites, [LocalTerm((i,), SIGMA_X, 1.0 / n_sites) for i in range(n_sites)])


def shift_scale(op: SparseOperator, a: complex, dt: float) -> SparseOperator:
    """``1 + a*dt*op``. Callers fold the ``-i`` of ``Lambda = -iH`` into ``a``."""
    factor = complex(a) * dt
    terms = [LocalTerm((), IDENTITY_1, 1.0)]
    if factor != 0:
        terms += [LocalTerm(t.sites, t.matrix, t.coeff * factor) for t in op.terms]
    return SparseOperator(op.n_sites, terms)


@dataclass(frozen=True)
class DiagonalOperator:
    """Diagonal operator written as a sum of Z strings.

    ``zstrings`` maps a sorted tuple of sites to its coefficient; the empty
    tuple is the constant. ``d(x) = sum_S c_S prod_{i in S} x_i``.
    """

    n_sites: int
    zstrings: dict = field(default_factory=dict)

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs))
        out = np.zeros(xs.shape[0], dtype=complex)
        for sites, c in self.zstrings.items():
            if sites:
                out += c * np.prod(xs[:, list(sites)], axis=1)
            else:
                out += c
        return out

    @property
    def max_body(self) -> int:
        return max((len(s) for s, c in self.zstrings.items() if c != 0), default=0)

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for c in self.zstrings.values())


@dataclass(frozen=True)
class OperatorSplit:
    x_part: SparseOperator
    z_part: DiagonalOperator


def _zstring_expansion(sites: tuple[int, ...], diag: np.ndarray) -> dict:
    """Walsh-Hadamard expansion of a local diagonal in products of Z."""
    k = len(sites)
    rows = np.arange(1 << k)
    z = 1 - 2 * ((rows[:, None] >> np.arange(k)) & 1)  # (2^k, k)
    out = {}
    for r in range(k + 1):
        for subset in combinations(range(k), r):
            sign = np.prod(z[:, list(subset)], axis=1) if subset else np.ones(1 << k)
            c = np.dot(sign, diag) / (1 << k)
            if c != 0:
                key = tuple(sorted(sites[j] for j in subset))
                out[key] = out.get(key, 0.0) + c
    return out


def split_diag_offdiag(op: SparseOperator) -> OperatorSplit:
    """Split ``op`` into an off-diagonal part and its exact diagonal."""
    x_terms = []
    zstrings: dict = {}
    for t in op.terms:
        m = t.scaled
        d = np.diag(m)
        off = m - np.diag(d)
        if np.any(off != 0):
            x_terms.append(LocalTerm(t.sites, off, 1.0))
        if np.any(d != 0):
            for key, c in _zstring_expansion(t.sites, d).items():
                zstrings[key] = zstrings.get(key, 0.0) + c
    zstrings = {k: complex(v) for k, v in zstrings.items() if v != 0}
    return OperatorSplit(SparseOperator(op.n_sites, x_terms), DiagonalOperator(op.n_sites, zstrings))


def recombine(split: OperatorSplit) -> SparseOperator:
    """``x_part + diag(z_part)`` as one operator."""
    terms = list(split.x_part.terms)
    for sites, c in split.z_part.zstrings.items():
        k = len(sites)
        rows = np.arange(1 << k)
        z = 1 - 2 * ((rows[:, None] >> np.arange(k)) & 1)
        diag = np.prod(z, axis=1) if k else np.ones(1)
        terms.append(LocalTerm(sites, np.diag(diag).astype(complex), c))
    return SparseOperator(split.x_part.n_sites, terms)
