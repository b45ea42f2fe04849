"""Dense float64 matrix helpers: products, norms, Gaussian draws, truncated SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""
from dataclasses import dataclass

import numpy as np

from fedsb import kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # m x k, orthonormal columns
    S: np.ndarray  # k, non-increasing, >= 0
    V: np.ndarray  # n x k, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, None or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def gaussian_matrix(rows: int, cols: int, std: float, rng_seed) -> np.ndarray:
    """i.i.d. N(0, std^2) entries; ``rng_seed`` may be an int, SeedSequence or Generator."""
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    z = rng.standard_normal((rows, cols))
    return z * std


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``good`` by an orthonormal completion."""
    m, k = u.shape
    if good.all():
        return u
    out = u.copy()
    basis = [out[:, j] for j in range(k) if good[j]]
    candidates = iter(np.eye(m))
    for j in range(k):
        if good[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                out[:, j] = w / nrm
                basis.append(out[:, j])
                break
    return out


def full_svd(m) -> SvdResult:
    """Thin SVD (k = min(rows, cols)) by one-sided Jacobi rotations."""
    a = as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    w, v = kernels.jacobi_rotate(np.ascontiguousarray(a))
    s = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    good = s > scale * 1e-13
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / s[good]
    u = _complete_basis(u, good)
    s = np.where(good, s, 0.0)
    if transposed:
        u, v = v, u
    # sign convention: largest-magnitude entry of each U column is non-negative
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(U=u * signs, S=s, V=v * signs)


def truncated_svd(m, r: int) -> SvdResult:
    """Top-``r`` singular triplets of ``m`` (best rank-r Frobenius approximation)."""
    a = as_matrix(m)
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} out of range for a {a.shape} matrix")
    full = full_svd(a)
    return SvdResult(U=full.U[:, :r].copy(), S=full.S[:r].copy(), V=full.V[:, :r].copy())
