"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--paths 8192] [--repeat 5]

Shapes mirror one desk-scale training chunk (two assets, 50 sub-steps,
hidden width 42).
"""
import argparse
import timeit

import numpy as np

from deepmart import _purepy

try:
    from deepmart import _kernels
except ImportError:
    _kernels = None


COPIES = {}


def cases(J, D=2, S=50, width=42, N=9):
    rng = np.random.default_rng(0)
    x0 = np.full(D, 100.0)
    mu, sig = np.full(D, -0.05), np.full(D, 0.2)
    dw = rng.normal(scale=0.077, size=(J, S, D))
    out = np.empty((J, S + 1, D))
    A1 = -0.05 * np.eye(D)
    b1 = np.zeros(D)
    A2 = np.zeros((D, D, D))
    for d in range(D):
        A2[d, d, d] = 0.2
    b2 = np.zeros((D, D))
    h = rng.normal(scale=60.0, size=(J * S, width))
    bias = rng.normal(size=width)
    g = rng.normal(size=(J * S, width))
    z = rng.normal(size=(J, S, D))
    gn = rng.exponential(5.0, size=(J, N + 1))
    xi = rng.normal(size=(J, N))
    COPIES["bias_bounded_relu"] = h.copy
    COPIES["bounded_relu_grad"] = g.copy
    return {
        "euler_gbm": lambda m: m.euler_gbm(x0, mu, sig, 0.0013, dw, out),
        "exact_gbm": lambda m: m.exact_gbm(x0, mu, sig, 0.0013, dw, out),
        "euler_affine": lambda m: m.euler_affine(x0, A1, b1, A2, b2, 0.0013, dw, out),
        "bias_bounded_relu": lambda m: m.bias_bounded_relu(h.copy(), bias, 100.0),
        "bounded_relu_grad": lambda m: m.bounded_relu_grad(g.copy(), h, 100.0),
        "stochastic_integral": lambda m: m.stochastic_integral(z, dw),
        "recursive_upper": lambda m: m.recursive_upper(gn, xi),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=8192)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("numpy", _purepy)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for name, fn in cases(args.paths).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
                 for _, mod in backends]
        if name in COPIES:
            # the activation kernels work in place on a fresh copy; take the copy out
            base = min(timeit.repeat(COPIES[name], number=1, repeat=args.repeat))
            times = [max(t - base, 1e-9) for t in times]
        line = f"{name:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
