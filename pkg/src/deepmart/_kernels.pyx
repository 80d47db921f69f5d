# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror ``deepmart._purepy``."""
import numpy as np
from libc.math cimport exp


def euler_gbm(const double[::1] x0, const double[::1] mu, const double[::1] sig,
              double dt, const double[:, :, ::1] dw, double[:, :, ::1] out):
    cdef Py_ssize_t J = dw.shape[0], S = dw.shape[1], D = dw.shape[2]
    cdef Py_ssize_t j, s, d
    cdef double x
    with nogil:
        for j in range(J):
            for d in range(D):
                out[j, 0, d] = x0[d]
            for s in range(S):
                for d in range(D):
                    x = out[j, s, d]
                    out[j, s + 1, d] = x + mu[d] * x * dt + sig[d] * x * dw[j, s, d]


def exact_gbm(const double[::1] x0, const double[::1] mu, const double[::1] sig,
              double dt, const double[:, :, ::1] dw, double[:, :, ::1] out):
    cdef Py_ssize_t J = dw.shape[0], S = dw.shape[1], D = dw.shape[2]
    cdef Py_ssize_t j, s, d
    cdef double[::1] drift = np.empty(D)
    for d in range(D):
        drift[d] = (mu[d] - 0.5 * sig[d] * sig[d]) * dt
    with nogil:
        for j in range(J):
            for d in range(D):
                out[j, 0, d] = x0[d]
            for s in range(S):
                for d in range(D):
                    out[j, s + 1, d] = out[j, s, d] * exp(drift[d] + sig[d] * dw[j, s, d])


def euler_affine(const double[::1] x0, const double[:, ::1] A1, const double[::1] b1,
                 const double[:, :, ::1] A2, const double[:, ::1] b2, double dt,
                 const double[:, :, ::1] dw, double[:, :, ::1] out):
    cdef Py_ssize_t J = dw.shape[0], S = dw.shape[1], D = dw.shape[2]
    cdef Py_ssize_t j, s, d, e, f
    cdef double drift, diff, noise
    with nogil:
        for j in range(J):
            for d in range(D):
                out[j, 0, d] = x0[d]
            for s in range(S):
                for d in range(D):
                    drift = b1[d]
                    for f in range(D):
                        drift = drift + A1[d, f] * out[j, s, f]
                    noise = 0.0
                    for e in range(D):
                        diff = b2[d, e]
                        for f in range(D):
                            diff = diff + A2[d, e, f] * out[j, s, f]
                        noise = noise + diff * dw[j, s, e]
                    out[j, s + 1, d] = out[j, s, d] + drift * dt + noise


def bias_bounded_relu(double[:, ::1] h, const double[::1] bias, double bound):
    cdef Py_ssize_t n = h.shape[0], m = h.shape[1], i, k
    cdef double v
    with nogil:
        for i in range(n):
            for k in range(m):
                v = h[i, k] + bias[k]
                if v < 0.0:
                    v = 0.0
                elif v > bound:
                    v = bound
                h[i, k] = v


def bounded_relu_grad(double[:, ::1] g, const double[:, ::1] h, double bound):
    cdef Py_ssize_t size = g.shape[0] * g.shape[1], i
    if size == 0:
        return
    cdef double* gp = &g[0, 0]
    cdef const double* hp = &h[0, 0]
    cdef double v
    with nogil:
        # branch-free select so the loop vectorises on random sign patterns
        for i in range(size):
            v = hp[i]
            gp[i] = gp[i] if (v > 0.0) & (v < bound) else 0.0


def stochastic_integral(const double[:, :, ::1] z, const double[:, :, ::1] dw):
    cdef Py_ssize_t J = z.shape[0], K = z.shape[1], D = z.shape[2], j, k, d
    cdef double acc
    out = np.empty(J)
    cdef double[::1] o = out
    with nogil:
        for j in range(J):
            acc = 0.0
            for k in range(K):
                for d in range(D):
                    acc = acc + z[j, k, d] * dw[j, k, d]
            o[j] = acc
    return out


def recursive_upper(const double[:, :] g, const double[:, :] xi):
    cdef Py_ssize_t J = g.shape[0], M = xi.shape[1], j, n
    cdef double u, h
    out = np.empty(J)
    cdef double[::1] o = out
    with nogil:
        for j in range(J):
            u = g[j, M]
            for n in range(M - 1, -1, -1):
                # g + (u - xi - g)^+ written as a max, which rounds once
                h = u - xi[j, n]
                u = h if h > g[j, n] else g[j, n]
            o[j] = u
    return out
