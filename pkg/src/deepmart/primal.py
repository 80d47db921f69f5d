"""Primal lower bound from learned stopping decisions.

A network ``F_n: R^D -> (0, 1)`` per date ``n = 1..N-1`` is trained, last
date first, to maximise ``E[g_n F_n + L_{n+1} (1 - F_n)]`` where
``L_{n+1}`` is the payoff realised by the hard decisions
``f_m = 1{F_m >= 1/2}`` of the later dates. Date ``N`` always stops; at
date 0 the (deterministic) initial payoff is compared directly with the
estimated continuation value, ties stopping.

Nothing here reads the dual networks.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergenceError
from .market import (ModelSpec, PathBatch, PayoffSpec, TimeGrid, model_from_dict,
                     monitoring_payoffs, payoff_from_dict, simulate_paths)
from .nn import (AdamState, MlpParams, adam_step, backward, forward, forward_cached, init_xavier,
                 params_from_bytes, params_to_bytes)
from .stats import sample_variance
from .training import (NS_DATE0, NS_EVAL, NS_PRIMAL_FRESH, NS_PRIMAL_INIT, NS_PRIMAL_ORDER,
                       FeatureScaling, PoolState, TrainConfig, chunk_order, make_pool, map_chunks)


@dataclass
class PrimalModel:
    """``nets[n]`` for ``n = 1..N-1``; ``nets[0]`` and ``nets[N]`` are ``None``."""

    nets: list
    grid: TimeGrid
    payoff: PayoffSpec
    model: ModelSpec
    scaling: FeatureScaling
    stop_at_zero: bool = False

    def __post_init__(self):
        if len(self.nets) != self.grid.N + 1:
            raise InvalidArgumentError("need a slot per date 0..N")
        for n in range(1, self.grid.N):
            net = self.nets[n]
            if net is None or net.arch.in_dim != self.model.D or net.arch.out_dim != 1:
                raise InvalidArgumentError(f"stopping network for date {n} missing or misshaped")

    def soft_decision(self, n: int, x) -> np.ndarray:
        """``F_n(x)`` for a batch of states."""
        return forward(self.nets[n], self.scaling.features(np.atleast_2d(x)))[:, 0]

    def decisions(self, mon_states: np.ndarray) -> np.ndarray:
        """Hard decisions ``f_m`` at every date, shape ``(J, N+1)``."""
        J, N = mon_states.shape[0], self.grid.N
        f = np.zeros((J, N + 1), dtype=bool)
        f[:, 0] = self.stop_at_zero
        for m in range(1, N):
            f[:, m] = self.soft_decision(m, mon_states[:, m]) >= 0.5
        f[:, N] = True
        return f


@dataclass
class PrimalResult:
    L0: float
    sigma_L: float
    J1: int
    per_path_stop: np.ndarray | None = None
    per_path_value: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


def first_stop(f: np.ndarray, start: int = 0) -> np.ndarray:
    """First index ``m >= start`` with ``f[:, m]``; the last column must be all true."""
    return start + np.argmax(f[:, start:], axis=1)


def stopping_time_indices(pm: PrimalModel, batch: PathBatch, start: int = 0) -> np.ndarray:
    if not 0 <= start <= pm.grid.N:
        raise InvalidArgumentError(f"start index {start} outside [0, {pm.grid.N}]")
    return first_stop(pm.decisions(batch.monitoring_states()), start)


def realized(g: np.ndarray, tau: np.ndarray) -> np.ndarray:
    return g[np.arange(g.shape[0]), tau]


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #
def stage_step(net: MlpParams, inputs: np.ndarray, g_n: np.ndarray, cont: np.ndarray):
    """Negated soft-stopping reward and its gradient."""
    J = inputs.shape[0]
    out, cache = forward_cached(net, inputs)
    F = out[:, 0]
    reward = float(np.mean(g_n * F + cont * (1.0 - F)))
    return -reward, backward(net, cache, (-(g_n - cont) / J)[:, None])


def _fresh_source(n, downstream, cfg, model, payoff, grid, scaling):
    def source(step):
        batch = simulate_paths(model, grid, cfg.batch, (cfg.seed, NS_PRIMAL_FRESH, n, step),
                               chunk_size=cfg.batch)
        mon = batch.monitoring_states()
        g = monitoring_payoffs(payoff, grid, batch.states)
        return scaling.features(mon[:, n]), g[:, n], _continuation(
            downstream, n, mon, g, scaling)
    return source


def _continuation(downstream, n, mon, g, scaling):
    """Payoff realised from date ``n+1`` on by the downstream hard decisions."""
    J, N = g.shape[0], g.shape[1] - 1
    f = np.ones((J, N + 1), dtype=bool)
    for i, net in enumerate(downstream):
        m = n + 1 + i
        f[:, m] = forward(net, scaling.features(mon[:, m]))[:, 0] >= 0.5
    return realized(g, first_stop(f, n + 1))


def train_primal_stage(n: int, downstream: list, cfg: TrainConfig, model: ModelSpec,
                       payoff: PayoffSpec, grid: TimeGrid, scaling: FeatureScaling | None = None,
                       source=None, history: list | None = None,
                       init: MlpParams | None = None) -> MlpParams:
    """Train ``F_n`` (``1 <= n <= N-1``) with the stopping networks of dates ``n+1..N-1`` frozen.

    ``init`` replaces the Xavier draw as the starting point (it is copied).
    """
    if not 1 <= n <= grid.N - 1:
        raise InvalidArgumentError(f"stopping networks exist for dates 1..{grid.N - 1}, got {n}")
    if len(downstream) != grid.N - 1 - n:
        raise InvalidArgumentError(
            f"stage {n} needs {grid.N - 1 - n} downstream networks, got {len(downstream)}")
    scaling = scaling or FeatureScaling.for_model(model)
    if source is None:
        source = _fresh_source(n, downstream, cfg, model, payoff, grid, scaling)
    if init is not None:
        net = init.copy()
    else:
        net = init_xavier(cfg.primal_arch(model.D), (cfg.seed, NS_PRIMAL_INIT, n))
    adam = AdamState.for_params(net, cfg.lr_schedule(), cfg.beta1, cfg.beta2, cfg.eps)
    for step in range(cfg.steps):
        inputs, g_n, cont = source(step)
        loss, grads = stage_step(net, inputs, g_n, cont)
        if not np.isfinite(loss):
            raise TrainingDivergenceError("non-finite loss", n)
        adam_step(adam, net, grads, stage=n)
        if history is not None:
            history.append(loss)
    return net


class PrimalTrainer:
    """Backward stage loop over ``n = N-1, ..., 1``, then the date-0 decision."""

    def __init__(self, cfg: TrainConfig, model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid,
                 scaling: FeatureScaling | None = None, pool=None):
        self.cfg, self.model, self.payoff, self.grid = cfg, model, payoff, grid
        self.scaling = scaling or FeatureScaling.for_model(model)
        self.nets = [None] * (grid.N + 1)
        self.histories = {}
        self.state = None
        self.continuation0 = None
        if cfg.sampling == "pool":
            self.state = PoolState(pool or make_pool(cfg, model, grid), payoff)

    def _pool_chunks(self, n):
        pool = self.state.pool
        out = []
        for c in range(pool.n_chunks):
            batch = pool.chunk(c)
            g = monitoring_payoffs(self.payoff, self.grid, batch.states)
            out.append((self.scaling.features(batch.monitoring_states()[:, n]), g[:, n].copy()))
        return out

    def train_stage(self, n: int) -> MlpParams | None:
        """Train date ``n``; ``n = 0`` fixes the direct decision instead."""
        if any(net is None for net in self.nets[n + 1:self.grid.N]):
            raise InvalidArgumentError("stages must be trained in backward order")
        if n == 0:
            self._decide_date0()
            return None
        hist = []
        downstream = self.nets[n + 1:self.grid.N]
        init = downstream[0] if self.cfg.warm_start and downstream else None
        if self.state is None:
            net = train_primal_stage(n, downstream, self.cfg, self.model, self.payoff,
                                     self.grid, self.scaling, history=hist, init=init)
        else:
            pool, carry = self.state.pool, self.state.carry
            chunks = self._pool_chunks(n)
            order = chunk_order((self.cfg.seed, NS_PRIMAL_ORDER, n), pool.n_chunks,
                                self.cfg.steps)

            def source(step):
                c = int(order[step])
                return chunks[c][0], chunks[c][1], carry[pool.slice(c)]

            net = train_primal_stage(n, downstream, self.cfg, self.model, self.payoff,
                                     self.grid, self.scaling, source=source, history=hist,
                                     init=init)
            for c, (inputs, g_n) in enumerate(chunks):
                stop = forward(net, inputs)[:, 0] >= 0.5
                sl = pool.slice(c)
                carry[sl] = np.where(stop, g_n, carry[sl])
        self.nets[n] = net
        self.histories[n] = hist
        return net

    def _decide_date0(self):
        if self.state is not None:
            cont = float(np.mean(self.state.carry))
        else:
            J = self.cfg.batch * self.cfg.pool_batches
            batch = simulate_paths(self.model, self.grid, J, (self.cfg.seed, NS_DATE0),
                                   chunk_size=self.cfg.batch)
            g = monitoring_payoffs(self.payoff, self.grid, batch.states)
            cont = float(np.mean(_continuation(self.nets[1:self.grid.N], 0,
                                               batch.monitoring_states(), g, self.scaling)))
        self.continuation0 = cont
        g0 = float(self.payoff(0.0, self.model.x0))
        self.stop_at_zero = bool(g0 >= cont)

    def result(self) -> PrimalModel:
        if self.continuation0 is None:
            self._decide_date0()
        return PrimalModel(list(self.nets), self.grid, self.payoff, self.model, self.scaling,
                           self.stop_at_zero)


def train_primal_all(cfg: TrainConfig, model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid,
                     scaling: FeatureScaling | None = None) -> PrimalModel:
    trainer = PrimalTrainer(cfg, model, payoff, grid, scaling)
    for n in range(grid.N - 1, -1, -1):
        trainer.train_stage(n)
    return trainer.result()


def evaluate_lower(pm: PrimalModel, J1: int, seed: int, chunk_size: int = 4096,
                   keep_paths: bool = True, threads: int = 1) -> PrimalResult:
    """Lower bound on ``J1`` fresh paths from the evaluation seed namespace."""
    if J1 < 2:
        raise InvalidArgumentError("need at least two evaluation paths")
    t0 = time.perf_counter()
    values = np.empty(J1)
    taus = np.empty(J1, dtype=np.int64)

    def one(c, lo, hi):
        batch = simulate_paths(pm.model, pm.grid, hi - lo, (seed, NS_EVAL, c),
                               chunk_size=chunk_size)
        tau = stopping_time_indices(pm, batch)
        taus[lo:hi] = tau
        values[lo:hi] = realized(monitoring_payoffs(pm.payoff, pm.grid, batch.states), tau)

    map_chunks(one, J1, chunk_size, threads)
    meta = {"seed": seed, "wall_time": time.perf_counter() - t0, "precision": "float64",
            "stop_at_zero": pm.stop_at_zero}
    return PrimalResult(float(np.mean(values)), float(np.sqrt(sample_variance(values))), J1,
                        taus if keep_paths else None, values if keep_paths else None, meta)


def save_primal_model(pm: PrimalModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "primal",
        "grid": {"T": pm.grid.T, "N": pm.grid.N, "N0": pm.grid.N0},
        "model": pm.model.to_dict(),
        "payoff": pm.payoff.to_dict(),
        "scaling": pm.scaling.to_dict(),
        "stop_at_zero": pm.stop_at_zero,
        "dates": list(range(1, pm.grid.N)),
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (directory / "nets.bin").write_bytes(
        b"".join(params_to_bytes(pm.nets[n]) for n in range(1, pm.grid.N)))


def load_primal_model(directory) -> PrimalModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "nets.bin").read_bytes()
    g = manifest["grid"]
    grid = TimeGrid(g["T"], g["N"], g["N0"])
    nets, off = [None] * (grid.N + 1), 0
    for n in manifest["dates"]:
        nets[n], off = params_from_bytes(blob, off)
    return PrimalModel(nets, grid, payoff_from_dict(manifest["payoff"]),
                       model_from_dict(manifest["model"]),
                       FeatureScaling.from_dict(manifest["scaling"]), manifest["stop_at_zero"])
