"""Compiled pairwise kernels shared by the particle, limit and shadow integrators.

Coefficient presets are addressed by an integer code so a single cached
compilation serves the whole registry. Every parallel loop runs over the
row index only; the sum over columns is always sequential in ascending
order, which makes results independent of the thread count.

Parameter vector layout (``prm``): ``[a, clip_radius]``.
"""
import math

import numpy as np
from numba import njit, prange

ZERO = 0
LINEAR_DECAY = 1
KURAMOTO = 2
TANH_CONSENSUS = 3

# weight-dynamics codes
BASE = 0
DECAY_OU = 1
WEIGHT_NOISE = 2
DECAY_LIMIT = 3

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _clipped_neg(x, radius, out):
    r2 = 0.0
    for k in range(x.shape[0]):
        r2 += x[k] * x[k]
    r = math.sqrt(r2)
    scale = 1.0
    if r > radius:
        scale = radius / r
    for k in range(x.shape[0]):
        out[k] = -scale * x[k]


@njit(cache=True)
def mu_all(pid, prm, x, out):
    n, d = x.shape
    for i in range(n):
        if pid == LINEAR_DECAY or pid == TANH_CONSENSUS:
            _clipped_neg(x[i], prm[1], out[i])
        else:
            for k in range(d):
                out[i, k] = 0.0


@njit(cache=True)
def features(pid, x):
    n, d = x.shape
    f = np.zeros((n, 2 * d))
    for i in range(n):
        for k in range(d):
            if pid == KURAMOTO:
                f[i, k] = math.cos(x[i, k])
                f[i, d + k] = math.sin(x[i, k])
            else:
                f[i, k] = x[i, k]
    return f


@njit(cache=True)
def alpha1_all(pid, prm, x):
    n, d = x.shape
    out = np.zeros(n)
    for i in range(n):
        if pid == KURAMOTO:
            out[i] = -math.sqrt(prm[0])
        elif pid == TANH_CONSENSUS:
            r2 = 0.0
            for k in range(d):
                r2 += x[i, k] * x[i, k]
            out[i] = -prm[0] / (1.0 + r2)
    return out


@njit(cache=True)
def alpha2_all(pid, prm, x):
    n = x.shape[0]
    out = np.zeros(n)
    for i in range(n):
        if pid == KURAMOTO:
            out[i] = math.sqrt(prm[0])
        elif pid == TANH_CONSENSUS:
            out[i] = 1.0
    return out


@njit(cache=True, inline="always")
def _sigma(pid, d, fi, fj, s):
    # fi/fj hold [cos, sin] for the torus preset and raw coordinates otherwise
    if pid == KURAMOTO:
        for k in range(d):
            s[k] = fj[d + k] * fi[k] - fj[k] * fi[d + k]
    elif pid == TANH_CONSENSUS:
        for k in range(d):
            s[k] = math.tanh(fj[k] - fi[k])
    else:
        for k in range(d):
            s[k] = 0.0


@njit(cache=True, inline="always")
def _beta(pid, d, fi, fj):
    if pid == KURAMOTO:
        acc = 0.0
        for k in range(d):
            acc += fj[k] * fi[k] + fj[d + k] * fi[d + k]
        return acc / d
    elif pid == TANH_CONSENSUS:
        r2 = 0.0
        for k in range(d):
            diff = fj[k] - fi[k]
            r2 += diff * diff
        return math.exp(-0.5 * r2)
    return 0.0


@njit(cache=True, inline="always")
def _update(vcode, vpar, dt, alpha, wij, b, noise):
    if vcode == BASE:
        return wij + dt * (alpha * wij + b)
    elif vcode == DECAY_OU:
        return wij + dt * (b - wij) / vpar
    elif vcode == WEIGHT_NOISE:
        return wij + dt * (alpha * wij + b) + noise
    # DECAY_LIMIT: weights are re-slaved to the new states by the caller
    return wij


@njit(cache=True)
def _row_torus1(i, fa, a1a, fb, a2b, w, p, exclude_self, want_drift,
                dt, vcode, vpar, wnoise, has_noise):
    # scalar fast path for the one-dimensional torus preset
    ci = fa[i, 0]
    si = fa[i, 1]
    a1 = a1a[i]
    wr = w[i]
    acc = 0.0
    noise = 0.0
    for j in range(fb.shape[0]):
        cj = fb[j, 0]
        sj = fb[j, 1]
        wij = wr[j]
        b = cj * ci + sj * si
        if want_drift and not (exclude_self and i == j):
            wd = b if vcode == DECAY_LIMIT else wij
            acc += p[j] * wd * (sj * ci - cj * si)
        if has_noise:
            noise = wnoise[i, j]
        wr[j] = _update(vcode, vpar, dt, a1 * a2b[j], wij, b, noise)
    return acc


@njit(parallel=True, cache=True)
def pair_step(pid, fa, a1a, fb, a2b, w, p, exclude_self, want_drift,
              dt, vcode, vpar, wnoise, acc_out):
    """Advance the weight block ``w`` (rows a, columns b) by one Euler step.

    When ``want_drift`` is set, ``acc_out[i]`` receives the interaction
    sum over b of ``p[j] * w[i, j] * sigma(a_i, b_j)`` evaluated with the
    pre-step weights. Self pairs are skipped in the sum when
    ``exclude_self`` is set but their weights are still integrated.
    """
    n_a = fa.shape[0]
    n_b = fb.shape[0]
    d = acc_out.shape[1]
    has_noise = vcode == WEIGHT_NOISE
    fast = pid == KURAMOTO and d == 1
    for i in prange(n_a):
        if fast:
            acc_out[i, 0] = _row_torus1(i, fa, a1a, fb, a2b, w, p, exclude_self,
                                        want_drift, dt, vcode, vpar, wnoise, has_noise)
            continue
        s = np.empty(d)
        for k in range(d):
            acc_out[i, k] = 0.0
        noise = 0.0
        for j in range(n_b):
            wij = w[i, j]
            b = _beta(pid, d, fa[i], fb[j])
            if want_drift and not (exclude_self and i == j):
                wd = b if vcode == DECAY_LIMIT else wij
                _sigma(pid, d, fa[i], fb[j], s)
                pw = p[j] * wd
                for k in range(d):
                    acc_out[i, k] += pw * s[k]
            if has_noise:
                noise = wnoise[i, j]
            w[i, j] = _update(vcode, vpar, dt, a1a[i] * a2b[j], wij, b, noise)


@njit(parallel=True, cache=True)
def beta_matrix(pid, fa, fb):
    n_a = fa.shape[0]
    n_b = fb.shape[0]
    d = fa.shape[1] // 2
    out = np.empty((n_a, n_b))
    for i in prange(n_a):
        for j in range(n_b):
            out[i, j] = _beta(pid, d, fa[i], fb[j])
    return out


@njit(cache=True)
def sigma_matrix(pid, fa, fb):
    """Dense (n_a, n_b, d) interaction kernel; used by the Picard cross-check."""
    n_a = fa.shape[0]
    n_b = fb.shape[0]
    d = fa.shape[1] // 2
    out = np.empty((n_a, n_b, d))
    s = np.empty(d)
    for i in range(n_a):
        for j in range(n_b):
            _sigma(pid, d, fa[i], fb[j], s)
            for k in range(d):
                out[i, j, k] = s[k]
    return out


def reduce_torus(x):
    r = np.mod(x, TWO_PI)
    # fmod can round up to exactly 2*pi for tiny negative inputs
    r[r >= TWO_PI] = 0.0
    return r


@njit(cache=True)
def beta_pairs(pid, fa, fb):
    """Elementwise beta(a_i, b_i)."""
    d = fa.shape[1] // 2
    out = np.empty(fa.shape[0])
    for i in range(fa.shape[0]):
        out[i] = _beta(pid, d, fa[i], fb[i])
    return out


@njit(cache=True)
def sigma_pairs(pid, fa, fb):
    """Elementwise sigma(a_i, b_i)."""
    d = fa.shape[1] // 2
    out = np.empty((fa.shape[0], d))
    for i in range(fa.shape[0]):
        _sigma(pid, d, fa[i], fb[i], out[i])
    return out
