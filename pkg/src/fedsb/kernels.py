"""Hot numeric kernels, each with a numba path and a numpy path.

The public names (``jacobi_rotate``, ``clip_rows``, ``log_a_int``, ``log_a_frac``)
resolve to the jitted variant unless ``FEDSB_DISABLE_JIT`` is set.  Both
variants are always importable under their ``_nb`` / ``_np`` suffixes so the
parity tests and the benchmark can call them side by side.
"""
import math

import numpy as np

from fedsb._accel import USE_JIT, njit

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 80
_LOG_A_MAX_TERMS = 2000


# --------------------------------------------------------------------------
# One-sided (Hestenes) Jacobi SVD
#
# Works on the columns of an m x n array with m >= n.  Returns the rotated
# columns W = A V (so W[:, j] = s_j u_j) and the accumulated rotation V.


@njit(cache=True)
def _jacobi_rotate_nb(a):
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += w[k, p] * w[k, p]
                    beta += w[k, q] * w[k, q]
                    gamma += w[k, p] * w[k, q]
                if gamma == 0.0 or abs(gamma) <= _JACOBI_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:  # zeta * zeta would overflow; t ~ 1 / (2 zeta)
                    t = 0.5 / zeta
                elif zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    wp = w[k, p]
                    wq = w[k, q]
                    w[k, p] = c * wp - s * wq
                    w[k, q] = s * wp + c * wq
                for k in range(n):
                    vp = v[k, p]
                    vq = v[k, q]
                    v[k, p] = c * vp - s * vq
                    v[k, q] = s * vp + c * vq
        if not rotated:
            break
    return w, v


def _jacobi_rotate_np(a):
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if gamma == 0.0 or abs(gamma) <= _JACOBI_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                w[:, [p, q]] = w[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if not rotated:
            break
    return w, v


# --------------------------------------------------------------------------
# Per-sample L2 clipping of the rows of a (batch, d) array.


@njit(cache=True)
def _clip_rows_nb(g, clip_norm):
    b, d = g.shape
    out = np.empty_like(g)
    norms = np.empty(b)
    for i in range(b):
        acc = 0.0
        for k in range(d):
            acc += g[i, k] * g[i, k]
        nrm = math.sqrt(acc)
        norms[i] = nrm
        scale = 1.0
        if nrm > 0.0:
            scale = min(1.0, clip_norm / nrm)
        for k in range(d):
            out[i, k] = g[i, k] * scale
    return out, norms


def _clip_rows_np(g, clip_norm):
    norms = np.sqrt(np.einsum("ij,ij->i", g, g))
    with np.errstate(divide="ignore"):
        scale = np.where(norms > 0.0, np.minimum(1.0, clip_norm / norms), 1.0)
    return g * scale[:, None], norms


# --------------------------------------------------------------------------
# log A_alpha of the Poisson-subsampled Gaussian mechanism (0 < q < 1).
# Same scalar source for both paths; the numpy path is plain CPython.


def _log_add(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi = max(a, b)
    lo = min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a, b):
    # log(exp(a) - exp(b)) for a >= b
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x):
    if x < 5.0:
        return math.log(math.erfc(x))
    # asymptotic expansion of log(erfc(x)) at +inf
    return (-math.log(math.pi) / 2 - math.log(x) - x * x
            - 0.5 * x ** -2 + 0.625 * x ** -4
            - 37.0 / 24.0 * x ** -6 + 353.0 / 64.0 * x ** -8)


def _log_a_int(q, sigma, alpha):
    log_a = -math.inf
    log1mq = math.log1p(-q)
    logq = math.log(q)
    lg_alpha = math.lgamma(alpha + 1.0)
    for i in range(alpha + 1):
        log_coef = (lg_alpha - math.lgamma(i + 1.0) - math.lgamma(alpha - i + 1.0)
                    + i * logq + (alpha - i) * log1mq)
        log_a = _log_add(log_a, log_coef + (i * i - i) / (2.0 * sigma * sigma))
    return log_a


def _log_a_frac(q, sigma, alpha):
    # Two-sided series split at z0, with signed binomial coefficients.
    pos = -math.inf
    neg = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    logq = math.log(q)
    log1mq = math.log1p(-q)
    lg_alpha = math.lgamma(alpha + 1.0)
    floor_alpha = math.floor(alpha)
    last0 = -math.inf
    last1 = -math.inf
    for i in range(_LOG_A_MAX_TERMS):
        j = alpha - i
        log_coef = lg_alpha - math.lgamma(i + 1.0) - math.lgamma(j + 1.0)
        n_neg = i - floor_alpha - 1
        negative = n_neg > 0 and n_neg % 2 == 1
        t0 = log_coef + i * logq + j * log1mq
        t1 = log_coef + j * logq + i * log1mq
        e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        s0 = t0 + (i * i - i) / (2.0 * sigma * sigma) + e0
        s1 = t1 + (j * j - j) / (2.0 * sigma * sigma) + e1
        term = _log_add(s0, s1)
        if negative:
            neg = _log_add(neg, term)
        else:
            pos = _log_add(pos, term)
        total = _log_sub(pos, neg)
        if s0 < last0 and s1 < last1 and max(s0, s1) < total - 30.0:
            return total
        last0 = s0
        last1 = s1
    return math.inf


_log_add_nb = njit(cache=True)(_log_add)
_log_sub_nb = njit(cache=True)(_log_sub)
_log_erfc_nb = njit(cache=True)(_log_erfc)


@njit(cache=True)
def _log_a_int_nb(q, sigma, alpha):
    log_a = -math.inf
    log1mq = math.log1p(-q)
    logq = math.log(q)
    lg_alpha = math.lgamma(alpha + 1.0)
    for i in range(alpha + 1):
        log_coef = (lg_alpha - math.lgamma(i + 1.0) - math.lgamma(alpha - i + 1.0)
                    + i * logq + (alpha - i) * log1mq)
        log_a = _log_add_nb(log_a, log_coef + (i * i - i) / (2.0 * sigma * sigma))
    return log_a


@njit(cache=True)
def _log_a_frac_nb(q, sigma, alpha):
    pos = -math.inf
    neg = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    logq = math.log(q)
    log1mq = math.log1p(-q)
    lg_alpha = math.lgamma(alpha + 1.0)
    floor_alpha = math.floor(alpha)
    last0 = -math.inf
    last1 = -math.inf
    for i in range(_LOG_A_MAX_TERMS):
        j = alpha - i
        log_coef = lg_alpha - math.lgamma(i + 1.0) - math.lgamma(j + 1.0)
        n_neg = i - floor_alpha - 1
        negative = n_neg > 0 and n_neg % 2 == 1
        t0 = log_coef + i * logq + j * log1mq
        t1 = log_coef + j * logq + i * log1mq
        e0 = math.log(0.5) + _log_erfc_nb((i - z0) / (math.sqrt(2.0) * sigma))
        e1 = math.log(0.5) + _log_erfc_nb((z0 - j) / (math.sqrt(2.0) * sigma))
        s0 = t0 + (i * i - i) / (2.0 * sigma * sigma) + e0
        s1 = t1 + (j * j - j) / (2.0 * sigma * sigma) + e1
        term = _log_add_nb(s0, s1)
        if negative:
            neg = _log_add_nb(neg, term)
        else:
            pos = _log_add_nb(pos, term)
        total = _log_sub_nb(pos, neg)
        if s0 < last0 and s1 < last1 and max(s0, s1) < total - 30.0:
            return total
        last0 = s0
        last1 = s1
    return math.inf


_log_a_int_np = _log_a_int
_log_a_frac_np = _log_a_frac

if USE_JIT:
    jacobi_rotate = _jacobi_rotate_nb
    clip_rows = _clip_rows_nb
    log_a_int = _log_a_int_nb
    log_a_frac = _log_a_frac_nb
else:
    jacobi_rotate = _jacobi_rotate_np
    clip_rows = _clip_rows_np
    log_a_int = _log_a_int_np
    log_a_frac = _log_a_frac_np
