"""Dual upper bound from neural martingale increments.

For each monitoring interval ``n`` a network ``z_n(t/T, x)`` gives the
integrand, and the martingale increment over the interval is the discrete
stochastic integral ``xi_n = sum_k z_n(t^n_k, X_{t^n_k}) . dW_{t^n_k}``
against the increments that drove the path. Such an increment has zero
conditional mean for any network, so every parameter value yields an
upper bound. Networks are trained one date at a time, last date first,
minimising ``E[g_n + (U_{n+1} - xi_n - g_n)^+]`` with ``U_{n+1}`` held
fixed.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, TrainingDivergenceError
from .market import (ModelSpec, PathBatch, PayoffSpec, TimeGrid, model_from_dict,
                     monitoring_payoffs, payoff_from_dict, simulate_paths)
from .nn import (AdamState, MlpParams, adam_step, backward, forward, forward_cached, init_xavier,
                 params_from_bytes, params_to_bytes, zero_params)
from .stats import sample_variance
from .training import (NS_DUAL_FRESH, NS_DUAL_INIT, NS_DUAL_ORDER, NS_EVAL, FeatureScaling,
                       PoolState, TrainConfig, chunk_order, make_pool, map_chunks)

DualTrainConfig = TrainConfig


@dataclass
class DualModel:
    nets: list
    grid: TimeGrid
    payoff: PayoffSpec
    model: ModelSpec
    scaling: FeatureScaling

    def __post_init__(self):
        if len(self.nets) != self.grid.N:
            raise InvalidArgumentError(
                f"need one network per interval ({self.grid.N}), got {len(self.nets)}")
        D = self.model.D
        for net in self.nets:
            if net.arch.in_dim != 1 + D or net.arch.out_dim != D:
                raise InvalidArgumentError("dual networks map R^(1+D) to R^D")

    def integrand(self, n: int, t: float, x) -> np.ndarray:
        """``z_n`` at physical time ``t`` and state(s) ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inp = np.empty((x.shape[0], 1 + x.shape[1]))
        inp[:, 0] = t / self.grid.T
        inp[:, 1:] = self.scaling.features(x)
        return self.scaling.out_scale * forward(self.nets[n], inp)

    def increments(self, batch: PathBatch) -> np.ndarray:
        """``xi_n`` for every path and interval, shape ``(J, N)``."""
        return np.stack([martingale_increment(net, batch, n, self.scaling)
                         for n, net in enumerate(self.nets)], axis=1)


@dataclass
class DualResult:
    U0: float
    sigma_U: float
    J1: int
    per_path_u: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- #
# martingale increments and the upper-bound recursion
# --------------------------------------------------------------------------- #
def dual_inputs(batch: PathBatch, n: int, scaling: FeatureScaling) -> np.ndarray:
    """Network inputs ``(t/T, scaled x)`` on interval ``n``, shape ``(J*N0, 1+D)``."""
    grid = batch.grid
    x = batch.interval_states(n)
    J, N0, D = x.shape
    inp = np.empty((J, N0, 1 + D))
    inp[:, :, 0] = (n * N0 + np.arange(N0)) * grid.dt / grid.T
    inp[:, :, 1:] = scaling.features(x)
    return inp.reshape(J * N0, 1 + D)


def martingale_increment(net: MlpParams, batch: PathBatch, n: int,
                         scaling: FeatureScaling | None = None) -> np.ndarray:
    """Per-path ``xi_n`` using the batch's stored Brownian increments."""
    if not 0 <= n < batch.grid.N:
        raise InvalidArgumentError(f"interval index {n} outside [0, {batch.grid.N - 1}]")
    if batch.dw is None:
        raise InvalidArgumentError("path batch carries no Brownian increments")
    scaling = scaling or FeatureScaling.identity(batch.D)
    dw = batch.interval_dw(n)
    z = forward(net, dual_inputs(batch, n, scaling))
    z *= scaling.out_scale
    return kernels.stochastic_integral(z.reshape(dw.shape), np.ascontiguousarray(dw))


def recursive_upper(g: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``U_0`` per path by ``U_n = g_n + (U_{n+1} - xi_n - g_n)^+`` from ``U_M = g_M``.

    ``g`` has shape ``(J, M+1)`` and ``xi`` ``(J, M)``.
    """
    g = np.asarray(g, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (g.shape[0], g.shape[1] - 1):
        raise InvalidArgumentError(f"xi shape {xi.shape} does not match payoffs {g.shape}")
    return kernels.recursive_upper(g, xi)


def direct_upper(g: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``max_m (g_m - M_m)`` with ``M_0 = 0`` and ``M_m = xi_0 + ... + xi_{m-1}``."""
    M = np.zeros_like(g)
    np.cumsum(xi, axis=1, out=M[:, 1:])
    return np.max(g - M, axis=1)


def dual_value_recursive(payoff: PayoffSpec, grid: TimeGrid, batch: PathBatch,
                         xi_all: np.ndarray) -> np.ndarray:
    return recursive_upper(monitoring_payoffs(payoff, grid, batch.states), xi_all)


def dual_value_direct(payoff: PayoffSpec, grid: TimeGrid, batch: PathBatch,
                      xi_all: np.ndarray) -> np.ndarray:
    return direct_upper(monitoring_payoffs(payoff, grid, batch.states), xi_all)


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #
def stage_step(net: MlpParams, inputs: np.ndarray, dw: np.ndarray, g_n: np.ndarray,
               cont: np.ndarray, out_scale: float):
    """Loss ``mean(g_n + (cont - xi - g_n)^+)`` and its gradient in ``net``."""
    J = dw.shape[0]
    z, cache = forward_cached(net, inputs)
    xi = kernels.stochastic_integral(z.reshape(dw.shape), dw) * out_scale
    hinge = cont - xi - g_n
    active = hinge > 0.0
    loss = float(np.mean(g_n + np.where(active, hinge, 0.0)))
    coef = np.where(active, -out_scale / J, 0.0)
    upstream = (coef[:, None, None] * dw).reshape(inputs.shape[0], dw.shape[2])
    return loss, backward(net, cache, upstream)


def _fresh_source(n, downstream, cfg, model, payoff, grid, scaling):
    def source(step):
        batch = simulate_paths(model, grid, cfg.batch, (cfg.seed, NS_DUAL_FRESH, n, step),
                               chunk_size=cfg.batch)
        g = monitoring_payoffs(payoff, grid, batch.states)
        if downstream:
            xi = np.stack([martingale_increment(net, batch, n + 1 + i, scaling)
                           for i, net in enumerate(downstream)], axis=1)
            cont = recursive_upper(g[:, n + 1:], xi)
        else:
            cont = g[:, n + 1]
        return (dual_inputs(batch, n, scaling), np.ascontiguousarray(batch.interval_dw(n)),
                g[:, n], cont)
    return source


def train_dual_stage(n: int, downstream: list, cfg: TrainConfig, model: ModelSpec,
                     payoff: PayoffSpec, grid: TimeGrid, scaling: FeatureScaling | None = None,
                     source=None, history: list | None = None,
                     init: MlpParams | None = None) -> MlpParams:
    """Train ``z_n`` with the networks of dates ``n+1..N-1`` frozen.

    ``source(step)`` returns ``(inputs, dw, g_n, cont)`` for one Adam step;
    by default each step simulates a fresh batch and recomputes ``cont``
    (the value ``U_{n+1}``) from ``downstream``. Gradients flow through
    ``xi_n`` only. ``init`` (copied) replaces the Xavier starting point.
    """
    if len(downstream) != grid.N - 1 - n:
        raise InvalidArgumentError(
            f"stage {n} needs {grid.N - 1 - n} downstream networks, got {len(downstream)}")
    scaling = scaling or FeatureScaling.for_model(model)
    if source is None:
        source = _fresh_source(n, downstream, cfg, model, payoff, grid, scaling)
    if init is not None:
        net = init.copy()
    else:
        net = init_xavier(cfg.dual_arch(model.D), (cfg.seed, NS_DUAL_INIT, n))
    adam = AdamState.for_params(net, cfg.lr_schedule(), cfg.beta1, cfg.beta2, cfg.eps)
    for step in range(cfg.steps):
        inputs, dw, g_n, cont = source(step)
        loss, grads = stage_step(net, inputs, dw, g_n, cont, scaling.out_scale)
        if not np.isfinite(loss):
            raise TrainingDivergenceError("non-finite loss", n)
        adam_step(adam, net, grads, stage=n)
        if history is not None:
            history.append(loss)
    return net


class DualTrainer:
    """Backward stage loop; ``train_stage`` must be called for ``n = N-1, ..., 0``."""

    def __init__(self, cfg: TrainConfig, model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid,
                 scaling: FeatureScaling | None = None, pool=None):
        self.cfg, self.model, self.payoff, self.grid = cfg, model, payoff, grid
        self.scaling = scaling or FeatureScaling.for_model(model)
        self.nets = [None] * grid.N
        self.histories = {}
        self.state = None
        if cfg.sampling == "pool":
            self.state = PoolState(pool or make_pool(cfg, model, grid), payoff)

    def _pool_source(self, n):
        pool = self.state.pool
        chunks = []
        for c in range(pool.n_chunks):
            batch = pool.chunk(c)
            g = monitoring_payoffs(self.payoff, self.grid, batch.states)
            chunks.append((dual_inputs(batch, n, self.scaling),
                           np.ascontiguousarray(batch.interval_dw(n)), g[:, n].copy()))
        order = chunk_order((self.cfg.seed, NS_DUAL_ORDER, n), pool.n_chunks, self.cfg.steps)
        carry = self.state.carry

        def source(step):
            c = int(order[step])
            inputs, dw, g_n = chunks[c]
            return inputs, dw, g_n, carry[pool.slice(c)]

        return source, chunks

    def train_stage(self, n: int) -> MlpParams:
        if any(net is None for net in self.nets[n + 1:]):
            raise InvalidArgumentError("stages must be trained in backward order")
        hist = []
        init = self.nets[n + 1] if self.cfg.warm_start and n + 1 < self.grid.N else None
        if self.state is None:
            net = train_dual_stage(n, self.nets[n + 1:], self.cfg, self.model, self.payoff,
                                   self.grid, self.scaling, history=hist, init=init)
        else:
            source, chunks = self._pool_source(n)
            net = train_dual_stage(n, self.nets[n + 1:], self.cfg, self.model, self.payoff,
                                   self.grid, self.scaling, source=source, history=hist,
                                   init=init)
            carry = self.state.carry
            for c, (inputs, dw, g_n) in enumerate(chunks):
                z = forward(net, inputs).reshape(dw.shape)
                xi = kernels.stochastic_integral(z, dw) * self.scaling.out_scale
                sl = self.state.pool.slice(c)
                carry[sl] = np.maximum(g_n, carry[sl] - xi)
        self.nets[n] = net
        self.histories[n] = hist
        return net

    def result(self) -> DualModel:
        return DualModel(list(self.nets), self.grid, self.payoff, self.model, self.scaling)


def train_dual_all(cfg: TrainConfig, model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid,
                   scaling: FeatureScaling | None = None) -> DualModel:
    trainer = DualTrainer(cfg, model, payoff, grid, scaling)
    for n in range(grid.N - 1, -1, -1):
        trainer.train_stage(n)
    return trainer.result()


def zero_dual_model(model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid,
                    cfg: TrainConfig | None = None) -> DualModel:
    """All integrands identically zero: the zero martingale."""
    cfg = cfg or TrainConfig()
    arch = cfg.dual_arch(model.D)
    return DualModel([zero_params(arch) for _ in range(grid.N)], grid, payoff, model,
                     FeatureScaling.for_model(model))


# --------------------------------------------------------------------------- #
# evaluation
# --------------------------------------------------------------------------- #
def evaluate_upper(dm: DualModel, J1: int, seed: int, chunk_size: int = 4096,
                   keep_paths: bool = True, threads: int = 1) -> DualResult:
    """Upper bound on ``J1`` fresh paths from the evaluation seed namespace."""
    if J1 < 2:
        raise InvalidArgumentError("need at least two evaluation paths")
    t0 = time.perf_counter()
    u = np.empty(J1)

    def one(c, lo, hi):
        batch = simulate_paths(dm.model, dm.grid, hi - lo, (seed, NS_EVAL, c),
                               chunk_size=chunk_size)
        u[lo:hi] = dual_value_recursive(dm.payoff, dm.grid, batch, dm.increments(batch))

    map_chunks(one, J1, chunk_size, threads)
    meta = {"seed": seed, "wall_time": time.perf_counter() - t0, "precision": "float64"}
    return DualResult(float(np.mean(u)), float(np.sqrt(sample_variance(u))), J1,
                      u if keep_paths else None, meta)


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #
def save_dual_model(dm: DualModel, directory, extra: dict | None = None) -> None:
    """``manifest.json`` plus ``nets.bin`` (concatenated DMNN blobs, date order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "dual",
        "grid": {"T": dm.grid.T, "N": dm.grid.N, "N0": dm.grid.N0},
        "model": dm.model.to_dict(),
        "payoff": dm.payoff.to_dict(),
        "scaling": dm.scaling.to_dict(),
        "n_nets": len(dm.nets),
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (directory / "nets.bin").write_bytes(b"".join(params_to_bytes(p) for p in dm.nets))


def load_dual_model(directory) -> DualModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "nets.bin").read_bytes()
    nets, off = [], 0
    for _ in range(manifest["n_nets"]):
        p, off = params_from_bytes(blob, off)
        nets.append(p)
    g = manifest["grid"]
    return DualModel(nets, TimeGrid(g["T"], g["N"], g["N0"]), payoff_from_dict(manifest["payoff"]),
                     model_from_dict(manifest["model"]),
                     FeatureScaling.from_dict(manifest["scaling"]))
