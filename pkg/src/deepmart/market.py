"""Diffusion models, time grids, path simulation and payoffs.

All simulation runs on a single fine grid: ``N`` monitoring intervals of
horizon ``T``, each split into ``N0`` Euler sub-steps. The Brownian
increments that drive a path are kept next to its states because the
martingale increments are stochastic integrals against exactly those
increments.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, UnsupportedModelError

DEFAULT_CHUNK = 4096


# --------------------------------------------------------------------------- #
# time grid
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TimeGrid:
    """Monitoring dates ``t_n = n*T/N`` refined into ``N0`` sub-steps each."""

    T: float
    N: int
    N0: int

    def __post_init__(self):
        if not (self.T > 0) or not math.isfinite(self.T):
            raise InvalidArgumentError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgumentError(f"N must be an integer >= 1, got {self.N}")
        if int(self.N0) != self.N0 or self.N0 < 1:
            raise InvalidArgumentError(f"N0 must be an integer >= 1, got {self.N0}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "N0", int(self.N0))

    @property
    def dt(self) -> float:
        return self.T / (self.N * self.N0)

    @property
    def n_steps(self) -> int:
        return self.N * self.N0

    def node_time(self, n: int, k: int) -> float:
        """Time of sub-node ``k`` inside interval ``n``; index times dt."""
        return (n * self.N0 + k) * self.dt

    def fine_times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def monitoring_times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.N0 * self.dt

    def with_n0(self, N0: int) -> "TimeGrid":
        return TimeGrid(self.T, self.N, N0)


def build_grid(T: float, N: int, N0: int) -> TimeGrid:
    return TimeGrid(T, N, N0)


# --------------------------------------------------------------------------- #
# models
# --------------------------------------------------------------------------- #
def _vec(values, D, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(D, float(arr))
    if arr.shape != (D,):
        raise InvalidArgumentError(f"{name} must have length {D}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class GBM:
    """Independent geometric Brownian motions with per-coordinate dividends.

    Drift ``(r - delta_d) x_d`` and diffusion ``sigma_d x_d`` on the diagonal.
    """

    x0: np.ndarray
    r: float
    delta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        D = x0.shape[0]
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "delta", _vec(self.delta, D, "delta"))
        sigma = _vec(self.sigma, D, "sigma")
        if np.any(sigma < 0):
            raise InvalidArgumentError("GBM volatilities must be non-negative")
        object.__setattr__(self, "sigma", sigma)

    @property
    def D(self) -> int:
        return self.x0.shape[0]

    @property
    def mu(self) -> np.ndarray:
        return self.r - self.delta

    def drift(self, t, x):
        return self.mu * x

    def diffusion(self, t, x):
        """Diffusion matrices, shape ``x.shape + (D,)``."""
        x = np.asarray(x, dtype=float)
        return x[..., :, None] * np.diag(self.sigma)

    def to_dict(self) -> dict:
        return {
            "kind": "gbm",
            "x0": self.x0.tolist(),
            "r": self.r,
            "delta": self.delta.tolist(),
            "sigma": self.sigma.tolist(),
        }


@dataclass(frozen=True, eq=False)
class GenericAffine:
    """Affine drift ``A1 x + b1`` and affine diffusion ``A2 . x + b2``.

    ``A2`` has shape ``(D, D, D)``; the diffusion matrix entry ``(d, e)`` is
    ``sum_f A2[d, e, f] x_f + b2[d, e]``.
    """

    x0: np.ndarray
    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        D = x0.shape[0]
        shapes = {"A1": (D, D), "b1": (D,), "A2": (D, D, D), "b2": (D, D)}
        object.__setattr__(self, "x0", x0)
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise InvalidArgumentError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def D(self) -> int:
        return self.x0.shape[0]

    def drift(self, t, x):
        return np.asarray(x) @ self.A1.T + self.b1

    def diffusion(self, t, x):
        return np.einsum("def,...f->...de", self.A2, np.asarray(x, dtype=float)) + self.b2

    def to_dict(self) -> dict:
        return {
            "kind": "affine",
            "x0": self.x0.tolist(),
            "A1": self.A1.tolist(),
            "b1": self.b1.tolist(),
            "A2": self.A2.tolist(),
            "b2": self.b2.tolist(),
        }


ModelSpec = Union[GBM, GenericAffine]


def brownian_motion(x0) -> GenericAffine:
    """``dX = dW`` started at ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    D = x0.shape[0]
    return GenericAffine(x0, np.zeros((D, D)), np.zeros(D), np.zeros((D, D, D)), np.eye(D))


def gbm_to_affine(model: GBM) -> GenericAffine:
    D = model.D
    A2 = np.zeros((D, D, D))
    for d in range(D):
        A2[d, d, d] = model.sigma[d]
    return GenericAffine(model.x0, np.diag(model.mu), np.zeros(D), A2, np.zeros((D, D)))


def model_from_dict(data: dict) -> ModelSpec:
    data = dict(data)
    kind = data.pop("kind")
    if kind == "gbm":
        return GBM(**data)
    if kind == "affine":
        return GenericAffine(**data)
    raise InvalidArgumentError(f"unknown model kind {kind!r}")


def diffusion_scale(model: ModelSpec) -> float:
    """Largest absolute entry of the diffusion matrix at the initial state."""
    b = model.diffusion(0.0, model.x0)
    scale = float(np.max(np.abs(b)))
    return scale if scale > 0 else 1.0


# --------------------------------------------------------------------------- #
# payoffs
# --------------------------------------------------------------------------- #
def _check_dim(x, D):
    x = np.asarray(x, dtype=float)
    if D is not None and x.shape[-1] != D:
        raise InvalidArgumentError(f"state has dimension {x.shape[-1]}, payoff expects {D}")
    return x


@dataclass(frozen=True)
class MaxCall:
    """``exp(-r t) (max_d x_d - K)^+``."""

    K: float
    r: float
    D: int | None = None

    def __call__(self, t, x):
        x = _check_dim(x, self.D)
        return np.exp(-self.r * np.asarray(t)) * np.maximum(x.max(axis=-1) - self.K, 0.0)

    def to_dict(self):
        return {"kind": "maxcall", "K": self.K, "r": self.r, "D": self.D}


@dataclass(frozen=True)
class BasketPut:
    """``exp(-r t) (K - mean_d x_d)^+``."""

    K: float
    r: float
    D: int | None = None

    def __call__(self, t, x):
        x = _check_dim(x, self.D)
        return np.exp(-self.r * np.asarray(t)) * np.maximum(self.K - x.mean(axis=-1), 0.0)

    def to_dict(self):
        return {"kind": "basketput", "K": self.K, "r": self.r, "D": self.D}


@dataclass(frozen=True)
class LinearPayoff:
    """``exp(-r t) sum_d x_d``. Can be negative; used for analytic toys."""

    r: float = 0.0
    D: int | None = None

    def __call__(self, t, x):
        x = _check_dim(x, self.D)
        return np.exp(-self.r * np.asarray(t)) * x.sum(axis=-1)

    def to_dict(self):
        return {"kind": "linear", "r": self.r, "D": self.D}


@dataclass(frozen=True)
class ConstantPayoff:
    value: float = 1.0
    D: int | None = None

    def __call__(self, t, x):
        x = _check_dim(x, self.D)
        return np.full(np.broadcast_shapes(np.shape(t), x.shape[:-1]), float(self.value))

    def to_dict(self):
        return {"kind": "constant", "value": self.value, "D": self.D}


PayoffSpec = Union[MaxCall, BasketPut, LinearPayoff, ConstantPayoff]

_PAYOFFS = {"maxcall": MaxCall, "basketput": BasketPut, "linear": LinearPayoff,
            "constant": ConstantPayoff}


def payoff_from_dict(data: dict) -> PayoffSpec:
    data = dict(data)
    kind = data.pop("kind")
    if kind not in _PAYOFFS:
        raise InvalidArgumentError(f"unknown payoff kind {kind!r}")
    return _PAYOFFS[kind](**data)


def payoff_eval(p: PayoffSpec, t, x):
    """Discounted payoff at time ``t`` for state(s) ``x``."""
    return p(t, x)


def monitoring_payoffs(payoff: PayoffSpec, grid: TimeGrid, states: np.ndarray) -> np.ndarray:
    """Payoff at every monitoring date, shape ``(J, N+1)``."""
    mon = states[:, :: grid.N0, :]
    return payoff(grid.monitoring_times()[None, :], mon)


# --------------------------------------------------------------------------- #
# path batches
# --------------------------------------------------------------------------- #
_RAW_MAGIC = b"DMPB"
_RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIQIIII")  # magic, version, J, N, N0, D, reserved -> 32 bytes


@dataclass(frozen=True, eq=False)
class PathBatch:
    """``J`` simulated paths on the fine grid with their driving increments.

    ``states`` has shape ``(J, N*N0 + 1, D)`` and ``dw`` ``(J, N*N0, D)``.
    Both arrays are read-only.
    """

    grid: TimeGrid
    states: np.ndarray
    dw: np.ndarray
    seed: object = None

    def __post_init__(self):
        self.states.flags.writeable = False
        if self.dw is not None:
            self.dw.flags.writeable = False

    @property
    def J(self) -> int:
        return self.states.shape[0]

    @property
    def D(self) -> int:
        return self.states.shape[2]

    def monitoring_states(self) -> np.ndarray:
        """States at ``t_0..t_N``, shape ``(J, N+1, D)``."""
        return self.states[:, :: self.grid.N0, :]

    def interval_states(self, n: int) -> np.ndarray:
        """States at ``t^n_0..t^n_{N0-1}``, shape ``(J, N0, D)``."""
        N0 = self.grid.N0
        return self.states[:, n * N0:(n + 1) * N0, :]

    def interval_dw(self, n: int) -> np.ndarray:
        if self.dw is None:
            raise InvalidArgumentError("path batch carries no Brownian increments")
        N0 = self.grid.N0
        return self.dw[:, n * N0:(n + 1) * N0, :]

    def to_raw(self, path) -> None:
        """Dump as a 32-byte header followed by little-endian float64 arrays."""
        header = _RAW_HEADER.pack(_RAW_MAGIC, _RAW_VERSION, self.J, self.grid.N,
                                  self.grid.N0, self.D, 0)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.dw, dtype="<f8").tobytes())

    @classmethod
    def from_raw(cls, path, T: float, seed=None) -> "PathBatch":
        """Inverse of :meth:`to_raw`; the horizon is not stored in the header."""
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, version, J, N, N0, D, _ = _RAW_HEADER.unpack_from(blob)
        if magic != _RAW_MAGIC or version != _RAW_VERSION:
            raise InvalidArgumentError("not a DMPB version 1 dump")
        grid = TimeGrid(T, N, N0)
        S = N * N0
        off = _RAW_HEADER.size
        n_states = J * (S + 1) * D
        states = np.frombuffer(blob, dtype="<f8", count=n_states, offset=off)
        dw = np.frombuffer(blob, dtype="<f8", count=J * S * D, offset=off + 8 * n_states)
        return cls(grid, states.reshape(J, S + 1, D).astype(float),
                   dw.reshape(J, S, D).astype(float), seed)


def _seed_entropy(seed) -> list:
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return [int(seed)]


def chunk_rng(seed, chunk: int) -> np.random.Generator:
    """Independent generator for chunk ``chunk`` of the stream named ``seed``.

    ``seed`` is an int or a tuple of ints; tuples give namespaced streams.
    """
    ss = np.random.SeedSequence(_seed_entropy(seed), spawn_key=(int(chunk),))
    return np.random.default_rng(ss)


def _stepper(model, exact):
    if exact:
        if not isinstance(model, GBM):
            raise UnsupportedModelError("exact stepping is only defined for GBM")
        return lambda dt, dw, out: kernels.exact_gbm(model.x0, model.mu, model.sigma, dt, dw, out)
    if isinstance(model, GBM):
        return lambda dt, dw, out: kernels.euler_gbm(model.x0, model.mu, model.sigma, dt, dw, out)
    if isinstance(model, GenericAffine):
        return lambda dt, dw, out: kernels.euler_affine(
            model.x0, model.A1, model.b1, model.A2, model.b2, dt, dw, out)
    raise UnsupportedModelError(f"unsupported model type {type(model).__name__}")


def _simulate(model, grid, J, seed, chunk_size, threads, exact):
    if J < 1:
        raise InvalidArgumentError(f"path count must be >= 1, got {J}")
    step = _stepper(model, exact)
    D, S, dt = model.D, grid.n_steps, grid.dt
    states = np.empty((J, S + 1, D))
    dw = np.empty((J, S, D))
    sq = math.sqrt(dt)
    starts = list(range(0, J, chunk_size))

    def work(c):
        lo = starts[c]
        hi = min(lo + chunk_size, J)
        rng = chunk_rng(seed, c)
        block = rng.standard_normal((hi - lo, S, D))
        block *= sq
        dw[lo:hi] = block
        step(dt, dw[lo:hi], states[lo:hi])

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(starts))))
    else:
        for c in range(len(starts)):
            work(c)
    return PathBatch(grid, states, dw, seed)


def simulate_paths(model: ModelSpec, grid: TimeGrid, J: int, seed,
                   chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> PathBatch:
    """Euler scheme ``x += a dt + b dw`` on the fine grid.

    Paths are generated in fixed chunks of ``chunk_size``, each with its own
    substream of ``seed``; the output does not depend on ``threads``.
    """
    return _simulate(model, grid, J, seed, chunk_size, threads, exact=False)


def simulate_paths_exact_gbm(model: GBM, grid: TimeGrid, J: int, seed,
                             chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> PathBatch:
    """Log-normal exact stepping; consumes the same increments as :func:`simulate_paths`."""
    return _simulate(model, grid, J, seed, chunk_size, threads, exact=True)


def euler_step(x, a, b, dt, dw):
    """One Euler step ``x + a dt + b dw`` with ``b`` a matrix (or scalar)."""
    x = np.asarray(x, dtype=float)
    return x + np.asarray(a) * dt + np.dot(np.atleast_2d(b), np.atleast_1d(dw)).reshape(x.shape)


@dataclass
class PathPool:
    """A fixed set of training paths stored as regenerable chunks.

    Chunk ``c`` is always the same ``chunk_size`` paths drawn from
    ``seed``'s substream ``c``. Chunks are cached while the cache stays
    under ``cache_bytes`` and regenerated on demand otherwise.
    """

    model: ModelSpec
    grid: TimeGrid
    n_chunks: int
    chunk_size: int
    seed: object
    cache_bytes: int = 1 << 30
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def J(self) -> int:
        return self.n_chunks * self.chunk_size

    def _chunk_bytes(self):
        return 8 * self.chunk_size * (2 * self.grid.n_steps + 1) * self.model.D

    def chunk(self, c: int) -> PathBatch:
        if c in self._cache:
            return self._cache[c]
        seed = _seed_entropy(self.seed) + [int(c)]
        batch = simulate_paths(self.model, self.grid, self.chunk_size, tuple(seed),
                               chunk_size=self.chunk_size)
        if (len(self._cache) + 1) * self._chunk_bytes() <= self.cache_bytes:
            self._cache[c] = batch
        return batch

    def slice(self, c: int) -> slice:
        return slice(c * self.chunk_size, (c + 1) * self.chunk_size)
