"""Configuration and data plumbing shared by the dual and primal trainers.

Two sampling modes feed the stage-wise training loops:

``fresh``
    every Adam step simulates a new batch; values downstream of the stage
    are recomputed on that batch from the already trained networks.
``pool``
    one fixed pool of paths, regenerated chunk by chunk from its seed, with
    the downstream value of every pool path carried from stage to stage
    (the single-simulation layout of the primal-dual algorithm).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidArgumentError
from .market import ModelSpec, PathPool, TimeGrid, diffusion_scale, monitoring_payoffs
from .nn import MlpArchitecture, piecewise_lr

# seed namespaces; every random stream is keyed by (seed, namespace, ...)
NS_POOL = 1
NS_DUAL_FRESH = 2
NS_PRIMAL_FRESH = 3
NS_DUAL_INIT = 4
NS_PRIMAL_INIT = 5
NS_DUAL_ORDER = 6
NS_PRIMAL_ORDER = 7
NS_EVAL = 8
NS_DATE0 = 9

SAMPLING_MODES = ("fresh", "pool")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1700
    batch: int = 1024
    lr_values: tuple = (1e-3, 1e-4)
    lr_fractions: tuple = (0.6,)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    depth: int = 3
    width: int | None = None
    activation: str = "bounded_relu"
    bound: float = 100.0
    sampling: str = "fresh"
    pool_batches: int = 64
    threads: int = 1
    warm_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_values", tuple(float(v) for v in self.lr_values))
        object.__setattr__(self, "lr_fractions", tuple(float(v) for v in self.lr_fractions))
        if self.steps < 0:
            raise InvalidArgumentError("steps must be >= 0")
        if self.batch < 2:
            raise InvalidArgumentError("batch must be >= 2")
        if self.sampling not in SAMPLING_MODES:
            raise InvalidArgumentError(f"sampling must be one of {SAMPLING_MODES}")
        if self.pool_batches < 1:
            raise InvalidArgumentError("pool_batches must be >= 1")
        if len(self.lr_values) != len(self.lr_fractions) + 1:
            raise InvalidArgumentError("need one more learning-rate value than breakpoints")

    def hidden_widths(self, D: int) -> tuple:
        width = self.width if self.width is not None else 40 + D
        return (int(width),) * self.depth

    def dual_arch(self, D: int) -> MlpArchitecture:
        return MlpArchitecture(1 + D, D, self.hidden_widths(D), self.activation, self.bound,
                               "linear")

    def primal_arch(self, D: int) -> MlpArchitecture:
        # the stopping networks use plain ReLU hidden layers
        return MlpArchitecture(D, 1, self.hidden_widths(D), "relu", self.bound, "sigmoid")

    def lr_schedule(self):
        return piecewise_lr(self.steps, self.lr_values, self.lr_fractions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_values"] = list(self.lr_values)
        d["lr_fractions"] = list(self.lr_fractions)
        return d


@dataclass(frozen=True, eq=False)
class FeatureScaling:
    """Fixed affine maps around the networks.

    Inputs are ``(x - shift) / scale``; dual outputs are multiplied by
    ``out_scale``. Both are absorbed by the first and last affine layers,
    so the function class is unchanged; they only condition the training.
    """

    shift: np.ndarray
    scale: np.ndarray
    out_scale: float = 1.0

    @classmethod
    def for_model(cls, model: ModelSpec) -> "FeatureScaling":
        x0 = np.asarray(model.x0, dtype=float)
        scale = np.where(np.abs(x0) > 0, np.abs(x0), 1.0)
        return cls(x0.copy(), scale, diffusion_scale(model))

    @classmethod
    def identity(cls, D: int) -> "FeatureScaling":
        return cls(np.zeros(D), np.ones(D), 1.0)

    def features(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "out_scale": self.out_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaling":
        return cls(np.asarray(d["shift"], float), np.asarray(d["scale"], float),
                   float(d["out_scale"]))


def make_pool(cfg: TrainConfig, model: ModelSpec, grid: TimeGrid) -> PathPool:
    return PathPool(model, grid, cfg.pool_batches, cfg.batch, (cfg.seed, NS_POOL),
                    cache_bytes=256 << 20)


def map_chunks(fn, J: int, chunk_size: int, threads: int = 1) -> None:
    """Call ``fn(c, lo, hi)`` for each chunk; chunk outputs must land in disjoint slots."""
    bounds = [(c, lo, min(lo + chunk_size, J)) for c, lo in enumerate(range(0, J, chunk_size))]
    if threads <= 1 or len(bounds) == 1:
        for b in bounds:
            fn(*b)
        return
    with ThreadPoolExecutor(threads) as ex:
        for f in [ex.submit(fn, *b) for b in bounds]:
            f.result()


def chunk_order(seed, n_chunks: int, steps: int) -> np.ndarray:
    """Chunk visited at each step: reshuffled passes over the pool."""
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    passes = -(-steps // n_chunks) if steps else 0
    if passes == 0:
        return np.empty(0, dtype=int)
    return np.concatenate([rng.permutation(n_chunks) for _ in range(passes)])[:steps]


@dataclass
class PoolState:
    """Pool paths plus the per-path value carried backwards through the stages."""

    pool: PathPool
    payoff: object
    carry: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.carry is None:
            self.carry = np.empty(self.pool.J)
            for c in range(self.pool.n_chunks):
                g = monitoring_payoffs(self.payoff, self.pool.grid, self.pool.chunk(c).states)
                self.carry[self.pool.slice(c)] = g[:, -1]
