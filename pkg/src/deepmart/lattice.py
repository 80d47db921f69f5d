"""Exact finite-state oracles.

A :class:`LatticeModel` is a finite Markov chain observed at dates
``0..N`` with a payoff table. Expanding it into its event tree gives exact
expectations by summation, so the Snell envelope, its Doob decomposition
and the dual value of any adapted martingale are computed without sampling
noise. Also here: a recombining binomial Bermudan pricer in one dimension
and a nested Monte Carlo estimator of the one-step integrand
``E[Y_{n+1} dW | X = x] / dt``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .market import GBM, GenericAffine, ModelSpec, PayoffSpec, TimeGrid, _stepper

ROW_TOL = 1e-12
MARTINGALE_TOL = 1e-10


@dataclass
class LatticeModel:
    """Dates ``0..N``; ``transitions[n]`` is the ``(S_n, S_{n+1})`` row-stochastic matrix."""

    transitions: list
    payoff: list
    states: list | None = None
    initial_state: int = 0

    def __post_init__(self):
        self.transitions = [np.asarray(P, dtype=float) for P in self.transitions]
        self.payoff = [np.asarray(g, dtype=float) for g in self.payoff]
        N = len(self.transitions)
        if len(self.payoff) != N + 1:
            raise InvalidArgumentError("need a payoff row for every date 0..N")
        for n, P in enumerate(self.transitions):
            if P.ndim != 2 or P.shape != (self.payoff[n].size, self.payoff[n + 1].size):
                raise InvalidArgumentError(f"transition matrix {n} has shape {P.shape}")
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_TOL):
                raise InvalidArgumentError(f"transition matrix {n} is not row-stochastic")
        if not 0 <= self.initial_state < self.payoff[0].size:
            raise InvalidArgumentError("initial state out of range")

    @property
    def N(self) -> int:
        return len(self.transitions)

    def to_json(self) -> str:
        doc = {
            "dates": self.N + 1,
            "transitions": [P.tolist() for P in self.transitions],
            "payoff": [g.tolist() for g in self.payoff],
            "initial_state": self.initial_state,
        }
        if self.states is not None:
            doc["states"] = [np.asarray(s).tolist() for s in self.states]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, source) -> "LatticeModel":
        """Parse a JSON document (string, dict or path)."""
        if isinstance(source, dict):
            doc = source
        elif isinstance(source, Path) or (isinstance(source, str)
                                           and not source.lstrip().startswith("{")):
            doc = json.loads(Path(source).read_text())
        else:
            doc = json.loads(source)
        lat = cls(doc["transitions"], doc["payoff"], doc.get("states"),
                  doc.get("initial_state", 0))
        if "dates" in doc and doc["dates"] != lat.N + 1:
            raise InvalidArgumentError("'dates' disagrees with the transition count")
        return lat


@dataclass
class EventTree:
    """All histories of the chain with positive probability.

    Node 0 is the root; ``paths[i]`` lists the nodes of the ``i``-th full
    history and ``path_prob[i]`` its probability.
    """

    date: np.ndarray
    state: np.ndarray
    parent: np.ndarray
    cond_prob: np.ndarray
    children: list
    paths: np.ndarray
    path_prob: np.ndarray


def build_tree(lat: LatticeModel) -> EventTree:
    date, state, parent, prob = [0], [lat.initial_state], [-1], [1.0]
    children = [[]]
    frontier = [0]
    for n, P in enumerate(lat.transitions):
        nxt = []
        for node in frontier:
            for s in np.flatnonzero(P[state[node]] > 0):
                idx = len(date)
                date.append(n + 1)
                state.append(int(s))
                parent.append(node)
                prob.append(float(P[state[node], s]))
                children.append([])
                children[node].append(idx)
                nxt.append(idx)
        frontier = nxt
    parent_arr = np.array(parent)
    paths = np.empty((len(frontier), lat.N + 1), dtype=int)
    path_prob = np.empty(len(frontier))
    prob_arr = np.array(prob)
    for i, leaf in enumerate(frontier):
        node, pr = leaf, 1.0
        for n in range(lat.N, -1, -1):
            paths[i, n] = node
            pr *= prob_arr[node]
            node = parent_arr[node]
        path_prob[i] = pr
    return EventTree(np.array(date), np.array(state), parent_arr, prob_arr,
                     [np.array(c, dtype=int) for c in children], paths, path_prob)


@dataclass
class SnellSolution:
    """Snell envelope per (date, state) and its Doob parts per tree node."""

    Y: list
    continuation: list
    tree: EventTree
    M: np.ndarray
    A: np.ndarray

    def Y_nodes(self) -> np.ndarray:
        return np.array([self.Y[d][s] for d, s in zip(self.tree.date, self.tree.state)])


def snell_envelope_exact(lat: LatticeModel) -> SnellSolution:
    """Backward induction ``Y_n = max(g_n, E[Y_{n+1} | state])`` and the Doob decomposition."""
    N = lat.N
    Y = [None] * (N + 1)
    C = [None] * N
    Y[N] = lat.payoff[N].copy()
    for n in range(N - 1, -1, -1):
        C[n] = lat.transitions[n] @ Y[n + 1]
        Y[n] = np.maximum(lat.payoff[n], C[n])
    tree = build_tree(lat)
    M = np.zeros(tree.date.size)
    A = np.zeros(tree.date.size)
    for node in range(1, tree.date.size):
        par = tree.parent[node]
        n, s_par = tree.date[par], tree.state[par]
        M[node] = M[par] + Y[n + 1][tree.state[node]] - C[n][s_par]
        A[node] = A[par] + Y[n][s_par] - C[n][s_par]
    return SnellSolution(Y, C, tree, M, A)


def pathwise_dual(lat: LatticeModel, tree: EventTree, M: np.ndarray) -> np.ndarray:
    """``max_{n<=m<=N} (g_m - M_m + M_n)`` for every full path and date, ``(paths, N+1)``."""
    nodes = tree.paths
    g = np.array([[lat.payoff[n][tree.state[v]] for n, v in enumerate(row)] for row in nodes])
    Mp = M[nodes]
    out = np.empty_like(g)
    run = g[:, -1] - Mp[:, -1]
    out[:, -1] = g[:, -1]
    for n in range(lat.N - 1, -1, -1):
        run = np.maximum(run, g[:, n] - Mp[:, n])
        out[:, n] = run + Mp[:, n]
    return out


def doob_dual_check(sol: SnellSolution, lat: LatticeModel) -> np.ndarray:
    """Pathwise dual values under the Doob martingale; these equal ``Y_n`` on every path."""
    return pathwise_dual(lat, sol.tree, sol.M)


def snell_on_paths(sol: SnellSolution) -> np.ndarray:
    """``Y_n`` evaluated along every full path, shape ``(paths, N+1)``."""
    return sol.Y_nodes()[sol.tree.paths]


def check_martingale(tree: EventTree, M: np.ndarray, tol: float = MARTINGALE_TOL) -> float:
    """Largest one-step conditional mean of the increments; raises if above ``tol``."""
    worst = 0.0
    for node, kids in enumerate(tree.children):
        if kids.size:
            drift = abs(float(tree.cond_prob[kids] @ M[kids]) - M[node])
            worst = max(worst, drift)
    if worst > tol:
        raise InvalidArgumentError(f"table is not a martingale (conditional drift {worst:.3e})")
    return worst


def dual_value_exact(lat: LatticeModel, M: np.ndarray, tree: EventTree | None = None) -> float:
    """``E[max_m (g_m - M_m + M_0)]`` by summation over the event tree."""
    tree = tree or build_tree(lat)
    M = np.asarray(M, dtype=float)
    if M.shape != tree.date.shape:
        raise InvalidArgumentError("martingale table must have one value per tree node")
    check_martingale(tree, M)
    return float(tree.path_prob @ pathwise_dual(lat, tree, M)[:, 0])


def random_martingale(tree: EventTree, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Adapted table with zero one-step conditional means; ``M_0 = 0``."""
    M = np.zeros(tree.date.size)
    for node, kids in enumerate(tree.children):
        if kids.size:
            e = rng.standard_normal(kids.size) * scale
            e -= tree.cond_prob[kids] @ e
            M[kids] = M[node] + e
    return M


def random_lattice(rng: np.random.Generator, N: int = 4, max_states: int = 6,
                   branching: int = 3) -> LatticeModel:
    """Small random chain with sparse transitions, for property tests."""
    sizes = [1] + [int(rng.integers(1, max_states + 1)) for _ in range(N)]
    transitions = []
    for n in range(N):
        P = np.zeros((sizes[n], sizes[n + 1]))
        for i in range(sizes[n]):
            k = int(rng.integers(1, min(branching, sizes[n + 1]) + 1))
            cols = rng.choice(sizes[n + 1], size=k, replace=False)
            w = rng.dirichlet(np.ones(k))
            P[i, cols] = w
            P[i, cols[0]] += 1.0 - P[i].sum()
        transitions.append(P)
    payoff = [np.round(rng.uniform(0.0, 10.0, size=s), 3) for s in sizes]
    return LatticeModel(transitions, payoff)


# --------------------------------------------------------------------------- #
# one-dimensional binomial Bermudan pricer
# --------------------------------------------------------------------------- #
def binomial_bermudan_1d(s0: float, K: float, r: float, delta: float, sigma: float, T: float,
                         N: int, steps_per_interval: int, kind: str = "put",
                         european: bool = False) -> float:
    """Cox-Ross-Rubinstein tree; exercise at ``t_0..t_N`` only (or only at ``T``)."""
    if min(s0, K, sigma, T) <= 0 or N < 1 or steps_per_interval < 1:
        raise InvalidArgumentError("binomial pricer needs positive inputs")
    if kind not in ("put", "call"):
        raise InvalidArgumentError(f"kind must be 'put' or 'call', got {kind!r}")
    n = N * steps_per_interval
    dt = T / n
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    p = (math.exp((r - delta) * dt) - d) / (u - d)
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError("tree too coarse for these rates: up probability outside [0, 1]")
    disc = math.exp(-r * dt)
    sign = 1.0 if kind == "call" else -1.0

    def intrinsic(i):
        S = s0 * u ** np.arange(i + 1) * d ** (i - np.arange(i + 1))
        return np.maximum(sign * (S - K), 0.0)

    V = intrinsic(n)
    for i in range(n - 1, -1, -1):
        V = disc * (p * V[1:] + (1.0 - p) * V[:-1])
        if not european and i % steps_per_interval == 0:
            V = np.maximum(V, intrinsic(i))
    return float(V[0])


# --------------------------------------------------------------------------- #
# nested Monte Carlo integrand
# --------------------------------------------------------------------------- #
def nested_mc_integrand(model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid, n: int, k: int,
                        x, inner_paths: int, value_fn=None, seed: int = 0):
    """Estimate ``E[Y_{n+1} dW_{t^n_k} | X_{t^n_k} = x] / dt`` and its standard error.

    ``Y_{n+1}`` is ``value_fn(x_{t_{n+1}})`` (default: the payoff at
    ``t_{n+1}``, exact when ``n + 1 = N``). Inner paths come in antithetic
    pairs; the pair average cancels the part of ``Y`` that is even in the
    noise.
    """
    if inner_paths < 100:
        raise InvalidArgumentError("nested estimator needs at least 100 inner paths")
    if not (0 <= n < grid.N and 0 <= k < grid.N0):
        raise InvalidArgumentError("sub-node index out of range")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.D,):
        raise InvalidArgumentError("state has the wrong dimension")
    if not isinstance(model, (GBM, GenericAffine)):
        raise InvalidArgumentError(f"unsupported model type {type(model).__name__}")
    t_next = (n + 1) * grid.N0 * grid.dt
    if value_fn is None:
        def value_fn(xs):
            return payoff(t_next, xs)
    P = inner_paths // 2
    steps = grid.N0 - k
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n, k]))
    dw = rng.standard_normal((P, steps, model.D)) * math.sqrt(grid.dt)
    step = _stepper(dataclasses.replace(model, x0=x), exact=False)
    ends = []
    for sign in (1.0, -1.0):
        out = np.empty((P, steps + 1, model.D))
        step(grid.dt, np.ascontiguousarray(sign * dw), out)
        ends.append(value_fn(out[:, -1, :]))
    q = 0.5 * (ends[0] - ends[1])[:, None] * dw[:, 0, :] / grid.dt
    return q.mean(axis=0), q.std(axis=0, ddof=1) / math.sqrt(P)
