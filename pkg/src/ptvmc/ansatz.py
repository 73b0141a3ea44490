"""Variational wavefunctions with real parameter vectors.

Every model is holomorphic in a vector of complex parameters ``c``. The real
parameter vector is ``theta = concat(Re c, Im c)``, so the derivative of
``log psi`` with respect to ``theta`` is ``concat(g, 1j * g)`` where ``g`` is
the holomorphic gradient.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import LatticeSpec, check_exact_size, configs_to_indices
from .operators import DiagonalOperator

INIT_SCALE = 0.01


class AnsatzKind(str, enum.Enum):
    LOG_STATE_VECTOR = "LogStateVector"
    JASTROW = "JastrowNet"
    CONV = "PeriodicConvNet"


class AnsatzCapabilityError(TypeError):
    """The ansatz cannot perform the requested operation."""


def _as_batch(xs) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.ndim == 1:
        xs = xs[None, :]
    return xs


# models -----------------------------------------------------------------------


class LogStateVector:
    """One free complex log amplitude per basis configuration."""

    kind = AnsatzKind.LOG_STATE_VECTOR

    def __init__(self, n_sites: int, limit: int | None = None):
        check_exact_size(n_sites, limit)
        self.n_sites = int(n_sites)
        self.n_complex = 1 << self.n_sites

    def structure(self) -> dict:
        return {"n_sites": self.n_sites}

    def log_psi(self, c, xs) -> np.ndarray:
        return c[configs_to_indices(xs)]

    def grad(self, c, xs) -> np.ndarray:
        idx = configs_to_indices(xs)
        g = np.zeros((idx.size, self.n_complex), dtype=complex)
        g[np.arange(idx.size), idx] = 1.0
        return g


# Truncated series of log cosh (first layer) and tanh (later layers).
def _act(first: bool, z):
    z2 = z * z
    if first:
        return z2 * (0.5 + z2 * (-1.0 / 12 + z2 / 45))
    return z * (0.5 + z2 * (-1.0 / 3 + z2 * (2.0 / 15)))


def _dact(first: bool, z):
    z2 = z * z
    if first:
        return z * (1.0 + z2 * (-1.0 / 3 + z2 * (2.0 / 15)))
    return 0.5 + z2 * (-1.0 + z2 * (2.0 / 3))


class PeriodicConvNet:
    """Stack of circular 2D convolutions summed into a log amplitude.

    Layer ``l`` maps ``channels[l-1]`` to ``channels[l]`` feature maps with a
    ``kernel x kernel`` filter centred on each site. The first layer has no
    bias so the network is even under a global spin flip. The output is the
    plain sum of the last feature maps over channels and sites.
    """

    kind = AnsatzKind.CONV

    def __init__(self, lattice: LatticeSpec, channels=(4, 4), kernel: int = 3):
        channels = tuple(int(ch) for ch in channels)
        if not channels or min(channels) < 1:
            raise ValueError(f"channels must be a non-empty tuple of positive ints, got {channels}")
        if kernel < 1:
            raise ValueError(f"kernel must be positive, got {kernel}")
        self.lattice = lattice
        self.n_sites = lattice.n_sites
        self.channels = channels
        self.kernel = int(kernel)
        k2 = self.kernel * self.kernel
        half = self.kernel // 2
        offsets = [(a - half, b - half) for a in range(self.kernel) for b in range(self.kernel)]
        nb = np.empty((self.n_sites, k2), dtype=np.int64)
        inv = np.empty((self.n_sites, k2), dtype=np.int64)
        for r in range(lattice.rows):
            for col in range(lattice.cols):
                s = lattice.site(r, col)
                for k, (dr, dc) in enumerate(offsets):
                    nb[s, k] = lattice.site(r + dr, col + dc)
                    inv[s, k] = lattice.site(r - dr, col - dc)
        self._nb, self._inv = nb, inv
        self._layout = []
        pos = 0
        c_in = 1
        for layer, c_out in enumerate(channels):
            w = (pos, pos + c_out * c_in * k2, (c_out, c_in, k2))
            pos = w[1]
            b = None
            if layer > 0:
                b = (pos, pos + c_out)
                pos = b[1]
            self._layout.append((w, b))
            c_in = c_out
        self.n_complex = pos

    def structure(self) -> dict:
        return {
            "rows": self.lattice.rows,
            "cols": self.lattice.cols,
            "channels": list(self.channels),
            "kernel": self.kernel,
        }

    def _unpack(self, c):
        for (w0, w1, shape), b in self._layout:
            yield c[w0:w1].reshape(shape), (None if b is None else c[b[0]:b[1]])

    def _dense(self, w):
        """Layer weights as a ``(c_in * N, c_out * N)`` matrix acting on flattened maps."""
        c_out, c_in, k2 = w.shape
        n = self.n_sites
        i = np.arange(c_in)[:, None, None, None]
        o = np.arange(c_out)[None, :, None, None]
        s = np.arange(n)[None, None, :, None]
        r = self._nb[None, None, :, :]
        vals = np.broadcast_to(w.transpose(1, 0, 2)[:, :, None, :], (c_in, c_out, n, k2))
        m = np.zeros((c_in, n, c_out, n), dtype=complex)
        # wrapped kernels may hit a site twice, so accumulate
        np.add.at(m, np.broadcast_arrays(i, r, o, s), vals)
        return m.reshape(c_in * n, c_out * n)

    def _forward(self, c, xs):
        n = self.n_sites
        h = np.asarray(xs, dtype=complex)
        batch = h.shape[0]
        cache = []
        for layer, (w, b) in enumerate(self._unpack(c)):
            dense = self._dense(w)
            z = (h @ dense).reshape(batch, w.shape[0], n)
            if b is not None:
                z = z + b[None, :, None]
            cache.append((h, z, dense))
            h = _act(layer == 0, z).reshape(batch, -1)
        return h, cache

    def log_psi(self, c, xs) -> np.ndarray:
        h, _ = self._forward(c, xs)
        return h.sum(axis=1)

    def grad(self, c, xs) -> np.ndarray:
        h, cache = self._forward(c, xs)
        n = self.n_sites
        batch = h.shape[0]
        out = np.empty((batch, self.n_complex), dtype=complex)
        gh = np.ones_like(h)
        for layer in range(len(cache) - 1, -1, -1):
            h_in, z, dense = cache[layer]
            gz = gh.reshape(z.shape) * _dact(layer == 0, z)
            (w0, w1, shape), b = self._layout[layer]
            # g[b, s, i*k] = h_in[b, i, nb[s, k]]
            g = h_in.reshape(batch, shape[1], n)[:, :, self._nb].transpose(0, 2, 1, 3).reshape(batch, n, -1)
            out[:, w0:w1] = np.matmul(gz, g).reshape(batch, -1)
            if b is not None:
                out[:, b[0]:b[1]] = gz.sum(axis=2)
            if layer > 0:
                gh = gz.reshape(batch, -1) @ dense.T
        return out


class JastrowNet:
    """``b + v.x + sum_{i<j} phi_ij x_i x_j + backbone(x)``.

    The two-body Jastrow and field terms absorb diagonal exponentials of
    one- and two-body Z strings exactly; the constant ``b`` absorbs their
    constant part. ``backbone`` is a :class:`PeriodicConvNet` or ``None``.
    """

    kind = AnsatzKind.JASTROW

    def __init__(self, n_sites: int, backbone: PeriodicConvNet | None = None):
        self.n_sites = int(n_sites)
        if backbone is not None and backbone.n_sites != self.n_sites:
            raise ValueError("backbone acts on a different number of sites")
        self.backbone = backbone
        self._iu = np.triu_indices(self.n_sites, 1)
        self.n_pairs = self._iu[0].size
        self._pair_slot = {(int(i), int(j)): k for k, (i, j) in enumerate(zip(*self._iu))}
        self.offset_fields = 1
        self.offset_pairs = 1 + self.n_sites
        self.offset_backbone = self.offset_pairs + self.n_pairs
        self.n_complex = self.offset_backbone + (backbone.n_complex if backbone else 0)

    def structure(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "backbone": None if self.backbone is None else self.backbone.structure(),
        }

    def pair_slot(self, i: int, j: int) -> int:
        return self.offset_pairs + self._pair_slot[(min(i, j), max(i, j))]

    def _pair_features(self, xs):
        return xs[:, self._iu[0]] * xs[:, self._iu[1]]

    def log_psi(self, c, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        out = c[0] + xs @ c[1:self.offset_pairs]
        out = out + self._pair_features(xs) @ c[self.offset_pairs:self.offset_backbone]
        if self.backbone is not None:
            out = out + self.backbone.log_psi(c[self.offset_backbone:], xs)
        return out

    def grad(self, c, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        out = np.empty((xs.shape[0], self.n_complex), dtype=complex)
        out[:, 0] = 1.0
        out[:, 1:self.offset_pairs] = xs
        out[:, self.offset_pairs:self.offset_backbone] = self._pair_features(xs)
        if self.backbone is not None:
            out[:, self.offset_backbone:] = self.backbone.grad(c[self.offset_backbone:], xs)
        return out


def model_from_structure(kind, structure: dict):
    kind = AnsatzKind(kind)
    if kind is AnsatzKind.LOG_STATE_VECTOR:
        return LogStateVector(int(structure["n_sites"]))
    if kind is AnsatzKind.CONV:
        lat = LatticeSpec(int(structure["rows"]), int(structure["cols"]))
        return PeriodicConvNet(lat, tuple(structure["channels"]), int(structure["kernel"]))
    backbone = structure.get("backbone")
    if backbone is not None:
        backbone = model_from_structure(AnsatzKind.CONV, backbone)
    return JastrowNet(int(structure["n_sites"]), backbone)


# variational state --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VariationalState:
    model: object
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        expected = 2 * self.model.n_complex
        if theta.size != expected:
            raise ValueError(
                f"{self.model.kind.value} expects {expected} real parameters, got {theta.size}"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def kind(self) -> AnsatzKind:
        return self.model.kind

    @property
    def n_sites(self) -> int:
        return self.model.n_sites

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def params(self) -> np.ndarray:
        """Complex parameter view ``Re + i Im``."""
        n = self.model.n_complex
        return self.theta[:n] + 1j * self.theta[n:]

    def with_theta(self, theta) -> "VariationalState":
        return VariationalState(self.model, theta)

    def with_params(self, c) -> "VariationalState":
        c = np.asarray(c, dtype=complex)
        return VariationalState(self.model, np.concatenate([c.real, c.imag]))

    def log_amplitude(self, xs) -> np.ndarray:
        return self.model.log_psi(self.params, _as_batch(xs))

    def jacobian_raw(self, xs) -> np.ndarray:
        """``d log psi / d theta`` for each row of ``xs``, shape ``(B, N_p)``."""
        g = self.model.grad(self.params, _as_batch(xs))
        return np.concatenate([g, 1j * g], axis=1)


def log_amplitude(vstate: VariationalState, x):
    """``log psi(x)``: a complex scalar for one configuration, an array for a batch."""
    x = np.asarray(x)
    out = vstate.log_amplitude(x)
    return complex(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True)
class JacobianBatch:
    raw: np.ndarray
    weights: np.ndarray
    centered: np.ndarray = field(repr=False)

    @classmethod
    def from_raw(cls, raw, weights=None) -> "JacobianBatch":
        raw = np.asarray(raw, dtype=complex)
        if weights is None:
            weights = np.full(raw.shape[0], 1.0 / raw.shape[0])
        weights = np.asarray(weights, dtype=float)
        if abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError("jacobian weights must sum to 1")
        return cls(raw, weights, raw - weights @ raw)


def jacobian(vstate: VariationalState, xs, weights=None) -> JacobianBatch:
    """Per-sample log-derivatives, centred with ``weights`` (uniform by default)."""
    return JacobianBatch.from_raw(vstate.jacobian_raw(xs), weights)


# exact diagonal factors -------------------------------------------------------------


def apply_diagonal_exact(vstate: VariationalState, alpha: complex, z_part: DiagonalOperator,
                         dt: float) -> VariationalState:
    """State with ``log psi'(x) = log psi(x) + alpha (-i) dt d(x)``, by parameter shifts."""
    factor = complex(alpha) * (-1j) * dt
    if factor == 0 or z_part.is_zero:
        return vstate
    model = vstate.model
    c = vstate.params.copy()
    if isinstance(model, LogStateVector):
        from .lattice import enumerate_configurations

        c += factor * z_part(enumerate_configurations(model.n_sites))
        return vstate.with_params(c)
    if not isinstance(model, JastrowNet):
        raise AnsatzCapabilityError(
            f"{model.kind.value} has no Jastrow layer; wrap it in JastrowNet to apply diagonal factors"
        )
    if z_part.max_body > 2:
        raise AnsatzCapabilityError(
            f"Jastrow layer absorbs at most two-body Z strings, got a {z_part.max_body}-body term"
        )
    for sites, coeff in z_part.zstrings.items():
        if coeff == 0:
            continue
        if len(sites) == 0:
            c[0] += factor * coeff
        elif len(sites) == 1:
            c[model.offset_fields + sites[0]] += factor * coeff
        else:
            c[model.pair_slot(*sites)] += factor * coeff
    return vstate.with_params(c)


# construction and checkpoints -------------------------------------------------------


def random_state(model, seed=0, scale: float = INIT_SCALE) -> VariationalState:
    """Complex-normal parameters with standard deviation ``scale``."""
    rng = np.random.default_rng(seed)
    n = model.n_complex
    c = scale * (rng.normal(size=n) + 1j * rng.normal(size=n)) / np.sqrt(2.0)
    return VariationalState(model, np.concatenate([c.real, c.imag]))


def zero_output_layer(vstate: VariationalState) -> VariationalState:
    """Zero the last convolution layer so the state is uniform but trainable.

    The remaining layers keep their values, so the gradient with respect to
    the zeroed layer does not vanish. Models without a convolution are
    returned unchanged, and so are single-layer networks, whose gradient
    would vanish with the layer zeroed.
    """
    model = vstate.model
    offset = 0
    if isinstance(model, JastrowNet):
        if model.backbone is None:
            return vstate
        offset, model = model.offset_backbone, model.backbone
    if not isinstance(model, PeriodicConvNet) or len(model._layout) < 2:
        return vstate
    c = vstate.params.copy()
    (w0, w1, _), b = model._layout[-1]
    c[offset + w0:offset + w1] = 0.0
    if b is not None:
        c[offset + b[0]:offset + b[1]] = 0.0
    return vstate.with_params(c)


def constant_state(model) -> VariationalState:
    """All parameters zero; every model above then gives a uniform state."""
    return VariationalState(model, np.zeros(2 * model.n_complex))


def checkpoint_record(vstate: VariationalState) -> dict:
    return {
        "ansatz": vstate.kind.value,
        "structure": vstate.model.structure(),
        "theta": [float(t) for t in vstate.theta],
    }


def save_checkpoint(vstate: VariationalState, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_record(vstate)))


def load_checkpoint(path) -> VariationalState:
    rec = json.loads(Path(path).read_text())
    model = model_from_structure(rec["ansatz"], rec["structure"])
    return VariationalState(model, np.asarray(rec["theta"], dtype=float))
