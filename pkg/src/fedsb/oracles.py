"""Slow, independent reference computations.

These deliberately avoid the code paths they are used to check: the RDP
oracle integrates the Renyi moment numerically instead of summing the
binomial series, matrix products use explicit loops, and reference SVDs come
from LAPACK rather than the Jacobi kernel.
"""
import math
from typing import Sequence

import numpy as np
from scipy import integrate, optimize


def naive_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def lapack_truncation(m, r: int) -> np.ndarray:
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=np.float64), full_matrices=False)
    return (u[:, :r] * s[:r]) @ vt[:r]


def principal_angle(x, y) -> float:
    """Largest principal angle between the column spans of ``x`` and ``y``."""
    qx, _ = np.linalg.qr(np.asarray(x, dtype=np.float64))
    qy, _ = np.linalg.qr(np.asarray(y, dtype=np.float64))
    s = np.linalg.svd(qx.T @ qy, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def _log_integrand(z, q, sigma, alpha):
    # log N(z; 0, sigma^2) + alpha * log((1-q) + q exp((2z - 1) / (2 sigma^2)))
    log_mix = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * sigma ** 2))
    return -z * z / (2 * sigma ** 2) - math.log(sigma * math.sqrt(2 * math.pi)) + alpha * log_mix


def rdp_numeric(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP of the subsampled Gaussian by direct quadrature of E_mu0[(mu/mu0)^alpha]."""
    if q == 1.0:
        return alpha / (2 * sigma ** 2)
    lo, hi = -40.0 * sigma, 40.0 * sigma + alpha * sigma ** 2 + 1.0
    grid = np.linspace(lo, hi, 20001)
    vals = _log_integrand(grid, q, sigma, alpha)
    k = int(np.argmax(vals))
    res = optimize.minimize_scalar(lambda z: -_log_integrand(z, q, sigma, alpha),
                                   bracket=(grid[max(k - 1, 0)], grid[k], grid[min(k + 1, grid.size - 1)]))
    peak = float(res.x)
    top = float(_log_integrand(peak, q, sigma, alpha))
    # second mode near the origin from the (1-q)^alpha part
    points = sorted({peak, 0.0})
    val, _ = integrate.quad(lambda z: math.exp(_log_integrand(z, q, sigma, alpha) - top),
                            lo, hi, points=points, limit=1000, epsabs=0.0, epsrel=1e-11)
    return (top + math.log(val)) / (alpha - 1)


def epsilon_numeric(q: float, sigma: float, steps: int, delta: float,
                    orders: Sequence[float]) -> float:
    eps = [steps * rdp_numeric(q, sigma, a) + math.log(1 / delta) / (a - 1) for a in orders]
    return float(min(eps))
