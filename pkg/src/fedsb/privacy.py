"""DP-SGD steps, an RDP accountant for the subsampled Gaussian, and noise diagnostics."""
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from fedsb import kernels
from fedsb.linalg import ShapeError, as_matrix

# Renyi orders 1.25, 1.5, ..., 64
ORDERS = tuple(float(a) for a in np.arange(1.25, 64.0 + 1e-9, 0.25))


@dataclass(frozen=True)
class PrivacyParams:
    clip_norm: float
    noise_multiplier: float
    delta: float = 1e-5
    sample_rate: float = 1.0
    steps: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


# --------------------------------------------------------------------------
# DP-SGD


def flatten_per_sample(grads: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, List[Tuple[str, tuple]]]:
    """Stack named (batch, ...) gradients into one (batch, d) array."""
    layout = []
    cols = []
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        layout.append((name, g.shape[1:]))
        cols.append(g.reshape(g.shape[0], -1))
    return np.hstack(cols), layout


def unflatten(vec: np.ndarray, layout) -> Dict[str, np.ndarray]:
    out = {}
    off = 0
    for name, shp in layout:
        size = int(np.prod(shp))
        out[name] = vec[off:off + size].reshape(shp)
        off += size
    return out


def clip_per_sample(per_sample, clip_norm: float) -> np.ndarray:
    g = np.ascontiguousarray(per_sample, dtype=np.float64)
    clipped, _ = kernels.clip_rows(g, float(clip_norm))
    return clipped


def dp_sgd_step(per_sample_grads, params: PrivacyParams, rng_seed) -> np.ndarray:
    """Clip each row to ``clip_norm``, average, add N(0, (sigma C)^2 I) / batch."""
    g = np.asarray(per_sample_grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("per-sample gradients must be a non-empty (batch, d) array")
    batch, d = g.shape
    clipped = clip_per_sample(g, params.clip_norm)
    mean = clipped.mean(axis=0)
    sigma = params.noise_multiplier
    if sigma == 0:
        return mean
    if math.isinf(params.clip_norm):
        raise ValueError("noise needs a finite clip norm")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    noise = rng.standard_normal(d) * (sigma * params.clip_norm / batch)
    return mean + noise


# --------------------------------------------------------------------------
# RDP accounting


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP of order ``alpha`` for Poisson-subsampled Gaussian noise."""
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = kernels.log_a_int(float(q), float(sigma), int(alpha))
    else:
        log_a = kernels.log_a_frac(float(q), float(sigma), float(alpha))
    return log_a / (alpha - 1.0)


def compute_rdp(q: float, sigma: float, steps: int, orders: Sequence[float] = ORDERS) -> np.ndarray:
    return np.array([steps * rdp_subsampled_gaussian(q, sigma, a) for a in orders])


def rdp_to_epsilon(rdp: np.ndarray, delta: float, orders: Sequence[float] = ORDERS) -> Tuple[float, float]:
    """(epsilon, best order) from eps = min_a [rdp(a) + log(1/delta)/(a - 1)]."""
    orders = np.asarray(orders, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.nanargmin(eps))
    return float(max(eps[i], 0.0)), float(orders[i])


def accountant_epsilon(params: PrivacyParams, orders: Sequence[float] = ORDERS) -> float:
    if params.steps == 0:
        return 0.0
    if params.noise_multiplier == 0:
        raise ValueError("noise_multiplier must be positive when steps > 0")
    rdp = compute_rdp(params.sample_rate, params.noise_multiplier, params.steps, orders)
    return rdp_to_epsilon(rdp, params.delta, orders)[0]


class UnreachableBudget(ValueError):
    """No noise multiplier reaches the requested epsilon."""


def calibrate_sigma(target_eps: float, delta: float, q: float, steps: int, *,
                    tol: float = 1e-3, sigma_max: float = 1e4) -> float:
    """Smallest noise multiplier (to within ``tol``) whose epsilon is <= ``target_eps``."""
    if not target_eps > 0:
        raise ValueError("target epsilon must be positive")
    if steps == 0:
        return 0.0

    def eps(sigma):
        return accountant_epsilon(PrivacyParams(1.0, sigma, delta, q, steps))

    # bracket: eps(lo) > target >= eps(hi)
    hi = 1.0
    while eps(hi) > target_eps:
        hi *= 2.0
        if hi > sigma_max:
            raise UnreachableBudget(f"epsilon {target_eps} unreachable with sigma <= {sigma_max}")
    lo = hi / 2.0
    while lo > tol and eps(lo) <= target_eps:
        hi, lo = lo, lo / 2.0
    if lo <= tol:
        lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class Accountant:
    """Sequential ledger of subsampled-Gaussian steps."""

    delta: float
    orders: Tuple[float, ...] = ORDERS
    events: List[Tuple[float, float, int]] = field(default_factory=list)  # (sigma, q, steps)

    def step(self, sigma: float, q: float, steps: int = 1):
        if steps <= 0:
            return
        if self.events and self.events[-1][:2] == (sigma, q):
            s, qq, t = self.events[-1]
            self.events[-1] = (s, qq, t + steps)
        else:
            self.events.append((sigma, q, steps))

    @property
    def steps(self) -> int:
        return sum(e[2] for e in self.events)

    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for sigma, q, t in self.events:
            total += compute_rdp(q, sigma, t, self.orders)
        return total

    def epsilon(self) -> float:
        if self.steps == 0:
            return 0.0
        return rdp_to_epsilon(self.rdp(), self.delta, self.orders)[0]

    def state(self) -> dict:
        rdp = self.rdp()
        eps_by_order = rdp + math.log(1.0 / self.delta) / (np.asarray(self.orders) - 1.0)
        best = self.epsilon()
        return {
            "delta": self.delta,
            "steps": self.steps,
            "events": [{"sigma": s, "q": q, "steps": t} for s, q, t in self.events],
            "epsilon": best,
            "per_order": [{"alpha": a, "rdp": float(r), "epsilon": float(e)}
                          for a, r, e in zip(self.orders, rdp, eps_by_order)],
        }

    def dumps(self) -> str:
        return json.dumps(self.state(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# noise diagnostics


@dataclass(frozen=True)
class NoiseDecomposition:
    first_order: np.ndarray
    second_order: np.ndarray
    total: np.ndarray


def noise_decompose_lora(B, A, xi_B, xi_A, scaling: float = 1.0) -> NoiseDecomposition:
    """s[(B + xi_B)(A + xi_A) - BA] split into first- and second-order parts."""
    B, A, xi_B, xi_A = (as_matrix(x) for x in (B, A, xi_B, xi_A))
    if xi_B.shape != B.shape or xi_A.shape != A.shape or B.shape[1] != A.shape[0]:
        raise ShapeError("noise shapes must match the adapter factors")
    first = scaling * (xi_B @ A + B @ xi_A)
    second = scaling * (xi_B @ xi_A)
    return NoiseDecomposition(first, second, first + second)


def noise_decompose_sb(B, A, xi_R) -> NoiseDecomposition:
    """B xi_R A; the update is linear in R so there is no second-order part."""
    B, A, xi_R = (as_matrix(x) for x in (B, A, xi_R))
    r = xi_R.shape[0]
    if xi_R.shape != (r, r) or B.shape[1] != r or A.shape[0] != r:
        raise ShapeError("noise core must be r x r matching B and A")
    first = B @ xi_R @ A
    return NoiseDecomposition(first, np.zeros_like(first), first)
