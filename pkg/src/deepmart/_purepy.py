"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and in-place semantics. Results agree to rounding; bit-identity
across backends is not promised.
"""
import numpy as np


def euler_gbm(x0, mu, sig, dt, dw, out):
    out[:, 0, :] = x0
    for s in range(dw.shape[1]):
        x = out[:, s, :]
        out[:, s + 1, :] = x + mu * x * dt + sig * x * dw[:, s, :]


def exact_gbm(x0, mu, sig, dt, dw, out):
    out[:, 0, :] = x0
    drift = (mu - 0.5 * sig * sig) * dt
    for s in range(dw.shape[1]):
        out[:, s + 1, :] = out[:, s, :] * np.exp(drift + sig * dw[:, s, :])


def euler_affine(x0, A1, b1, A2, b2, dt, dw, out):
    out[:, 0, :] = x0
    for s in range(dw.shape[1]):
        x = out[:, s, :]
        drift = x @ A1.T + b1
        # diffusion[j, d, e] = sum_f A2[d, e, f] x[j, f] + b2[d, e]
        diff = np.einsum("def,jf->jde", A2, x) + b2
        out[:, s + 1, :] = x + drift * dt + np.einsum("jde,je->jd", diff, dw[:, s, :])


def bias_bounded_relu(h, bias, bound):
    h += bias
    np.clip(h, 0.0, bound, out=h)


def bounded_relu_grad(g, h, bound):
    g *= (h > 0.0) & (h < bound)


def stochastic_integral(z, dw):
    return np.einsum("jkd,jkd->j", z, dw)


def recursive_upper(g, xi):
    u = g[:, -1].copy()
    for n in range(xi.shape[1] - 1, -1, -1):
        u = np.maximum(g[:, n], u - xi[:, n])
    return u
