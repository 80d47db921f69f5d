"""Feedforward networks with hand-written backpropagation and Adam.

Layers are affine maps ``h @ W + b`` with ``W`` stored as
``(fan_in, fan_out)``; hidden layers use a bounded ReLU
``min(max(x, 0), B)`` (plain ReLU is ``B = inf``). The subgradient of the
activation is taken as 0 at both kinks ``x = 0`` and ``x = B``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, TrainingDivergenceError

HIDDEN_ACTIVATIONS = ("bounded_relu", "relu")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")

# rows per block in batched passes; keeps activations cache resident
BLOCK_ROWS = 2048


@dataclass(frozen=True)
class MlpArchitecture:
    in_dim: int
    out_dim: int
    widths: tuple
    hidden_activation: str = "bounded_relu"
    bound: float = 100.0
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidArgumentError("input and output widths must be >= 1")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise InvalidArgumentError("need at least one hidden layer of width >= 1")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidArgumentError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidArgumentError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation == "bounded_relu" and not self.bound > 0:
            raise InvalidArgumentError("bounded ReLU needs a positive bound")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def layer_dims(self) -> tuple:
        return (self.in_dim,) + self.widths + (self.out_dim,)

    @property
    def clip(self) -> float:
        return self.bound if self.hidden_activation == "bounded_relu" else math.inf

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class MlpParams:
    arch: MlpArchitecture
    weights: list
    biases: list

    def arrays(self) -> list:
        """Weights then bias per layer, in layer order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.arch, [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.arch, [np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def zero_params(arch: MlpArchitecture) -> MlpParams:
    dims = arch.layer_dims
    return MlpParams(arch, [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
                     [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)])


def init_xavier(arch: MlpArchitecture, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        ent = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
        rng = np.random.default_rng(np.random.SeedSequence(ent))
    dims = arch.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(arch, weights, biases)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_block(p: MlpParams, x: np.ndarray, keep: bool):
    clip = p.arch.clip
    h = x
    hidden = [x] if keep else None
    last = len(p.weights) - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ W
        if i < last:
            kernels.bias_bounded_relu(z, b, clip)
            if keep:
                hidden.append(z)
        else:
            z += b
            if p.arch.output_activation == "sigmoid":
                z = _sigmoid(z)
        h = z
    return h, hidden


def _as_batch(p, inputs):
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != p.arch.in_dim:
        raise InvalidArgumentError(
            f"input has shape {np.shape(inputs)}, network expects width {p.arch.in_dim}")
    return np.ascontiguousarray(x), single


def forward(p: MlpParams, inputs) -> np.ndarray:
    """Network output for one input vector or a ``(n, in_dim)`` batch."""
    x, single = _as_batch(p, inputs)
    out = np.empty((x.shape[0], p.arch.out_dim))
    for lo in range(0, x.shape[0], BLOCK_ROWS):
        out[lo:lo + BLOCK_ROWS] = _forward_block(p, x[lo:lo + BLOCK_ROWS], keep=False)[0]
    return out[0] if single else out


def forward_cached(p: MlpParams, inputs):
    """Outputs plus the per-block activations needed by :func:`backward`."""
    x, _ = _as_batch(p, inputs)
    if x.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    out = np.empty((x.shape[0], p.arch.out_dim))
    cache = []
    for lo in range(0, x.shape[0], BLOCK_ROWS):
        y, hidden = _forward_block(p, x[lo:lo + BLOCK_ROWS], keep=True)
        out[lo:lo + BLOCK_ROWS] = y
        cache.append((hidden, y))
    return out, cache


def backward(p: MlpParams, cache, upstream_grads) -> MlpParams:
    """``sum_batch d(upstream . output)/d(params)`` from a :func:`forward_cached` pass.

    Blocks are accumulated in a fixed order, so the result is reproducible.
    """
    up = np.ascontiguousarray(np.atleast_2d(np.asarray(upstream_grads, dtype=float)))
    n_rows = sum(y.shape[0] for _, y in cache)
    if up.shape != (n_rows, p.arch.out_dim):
        raise InvalidArgumentError(
            f"upstream gradients have shape {up.shape}, expected {(n_rows, p.arch.out_dim)}")
    clip = p.arch.clip
    grads = p.zeros_like()
    sig = p.arch.output_activation == "sigmoid"
    lo = 0
    for hidden, y in cache:
        g = up[lo:lo + y.shape[0]]
        ones = np.ones(y.shape[0])
        lo += y.shape[0]
        if sig:
            g = g * y * (1.0 - y)
        for i in range(len(p.weights) - 1, -1, -1):
            h_in = hidden[i]
            grads.weights[i] += h_in.T @ g
            grads.biases[i] += ones @ g
            if i > 0:
                g = g @ p.weights[i].T
                kernels.bounded_relu_grad(g, h_in, clip)
    return grads


def forward_backward(p: MlpParams, inputs, upstream_grads):
    """Outputs and ``sum_batch d(upstream . output)/d(params)``."""
    out, cache = forward_cached(p, inputs)
    return out, backward(p, cache, upstream_grads)


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #
def piecewise_lr(total_steps: int, values: Sequence[float] = (1e-3, 1e-4),
                 fractions: Sequence[float] = (0.6,)) -> Callable[[int], float]:
    """Learning rate ``values[i]`` until ``fractions[i] * total_steps`` steps."""
    if len(values) != len(fractions) + 1:
        raise InvalidArgumentError("need one more learning-rate value than breakpoints")
    cuts = [f * total_steps for f in fractions]

    def lr(step: int) -> float:
        for cut, v in zip(cuts, values):
            if step < cut:
                return v
        return values[-1]

    return lr


@dataclass
class AdamState:
    m: list
    v: list
    lr: Callable[[int], float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, p: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        schedule = lr if callable(lr) else (lambda step, _v=float(lr): _v)
        return cls([np.zeros_like(a) for a in p.arrays()],
                   [np.zeros_like(a) for a in p.arrays()], schedule, beta1, beta2, eps)


def adam_step(state: AdamState, p: MlpParams, grads: MlpParams, stage=None) -> MlpParams:
    """One bias-corrected Adam update of ``p`` in place."""
    g_all = grads.arrays()
    if not all(np.all(np.isfinite(g)) for g in g_all):
        raise TrainingDivergenceError("non-finite gradient", stage)
    lr = state.lr(state.t)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(p.arrays(), g_all, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if not all(np.all(np.isfinite(a)) for a in p.arrays()):
        raise TrainingDivergenceError("non-finite parameters after update", stage)
    return p


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #
_NN_MAGIC = b"DMNN"
_NN_VERSION = 1


def params_to_bytes(p: MlpParams) -> bytes:
    """``DMNN`` blob: header, architecture, then ``A_i`` (out x in) and ``b_i`` per layer."""
    a = p.arch
    head = struct.pack("<4sIIIIBBd", _NN_MAGIC, _NN_VERSION, a.in_dim, a.out_dim, a.depth,
                       HIDDEN_ACTIVATIONS.index(a.hidden_activation),
                       OUTPUT_ACTIVATIONS.index(a.output_activation), float(a.bound))
    widths = struct.pack(f"<{a.depth}I", *a.widths)
    body = b"".join(
        np.ascontiguousarray(W.T, dtype="<f8").tobytes() + np.asarray(b, dtype="<f8").tobytes()
        for W, b in zip(p.weights, p.biases))
    return head + widths + body


def params_from_bytes(blob: bytes, offset: int = 0):
    """Parse one ``DMNN`` blob at ``offset``; returns ``(params, next_offset)``."""
    fmt = "<4sIIIIBBd"
    magic, version, in_dim, out_dim, depth, hid, outa, bound = struct.unpack_from(fmt, blob, offset)
    if magic != _NN_MAGIC or version != _NN_VERSION:
        raise InvalidArgumentError("not a DMNN version 1 checkpoint")
    offset += struct.calcsize(fmt)
    widths = struct.unpack_from(f"<{depth}I", blob, offset)
    offset += 4 * depth
    arch = MlpArchitecture(in_dim, out_dim, widths, HIDDEN_ACTIVATIONS[hid], bound,
                           OUTPUT_ACTIVATIONS[outa])
    dims = arch.layer_dims
    weights, biases = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        A = np.frombuffer(blob, "<f8", fi * fo, offset).reshape(fo, fi)
        offset += 8 * fi * fo
        b = np.frombuffer(blob, "<f8", fo, offset)
        offset += 8 * fo
        weights.append(np.ascontiguousarray(A.T, dtype=float))
        biases.append(b.astype(float))
    return MlpParams(arch, weights, biases), offset
