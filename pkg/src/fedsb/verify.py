"""Named invariant checks behind ``fedsb verify``.

Each check returns ``None`` on success or a short failure detail.  ``faults``
deliberately breaks one code path so the harness itself can be tested.
"""
import math
import time
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from fedsb import adapters as ad
from fedsb import aggregation as agg
from fedsb import commcost, kernels, model, oracles, privacy
from fedsb._accel import HAVE_NUMBA
from fedsb.fedsim import FederationConfig, run_federation

FAULTS = ("skip-werr",)
EXACT_TOL = 1e-12


def random_lora_clients(rng, m, n, r, c, *, shared_a=False, alpha=ad.DEFAULT_ALPHA):
    a0 = rng.standard_normal((r, n))
    return [ad.LoraPair(rng.standard_normal((m, r)), a0 if shared_a else rng.standard_normal((r, n)),
                        alpha, shared_a) for _ in range(c)]


def random_orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    return q if rows >= cols else q.T


def random_sb_clients(rng, m, n, r, c):
    b = random_orthonormal(rng, m, r)
    a = random_orthonormal(rng, r, n)
    return [ad.SbTriple(b, rng.standard_normal((r, r)), a) for _ in range(c)]


def random_shape(rng, max_dim=32, max_rank=8, max_clients=16):
    m, n = rng.integers(1, max_dim + 1, size=2)
    r = int(rng.integers(1, min(max_rank, m, n) + 1))
    c = int(rng.integers(1, max_clients + 1))
    return int(m), int(n), r, c


def finite_difference_error(shape: model.ArchShape, weights, batch: model.Batch,
                            adapters: Dict[str, ad.Adapter], h: float = 1e-5) -> float:
    """Max |analytic - central difference| over every trainable coordinate."""
    def loss(ads):
        return model.forward_loss(shape, weights, {k: ad.effective_update(a) for k, a in ads.items()}, batch)

    grad_w = model.batch_gradient(shape, weights, {k: ad.effective_update(a) for k, a in adapters.items()}, batch)
    worst = 0.0
    for site, adapter in adapters.items():
        analytic = ad.trainable_gradient(adapter, grad_w[site])
        for name, value in ad.trainable_params(adapter).items():
            for idx in np.ndindex(value.shape):
                plus, minus = value.copy(), value.copy()
                plus[idx] += h
                minus[idx] -= h
                lp = loss({**adapters, site: ad.with_trainable(adapter, {name: plus})})
                lm = loss({**adapters, site: ad.with_trainable(adapter, {name: minus})})
                worst = max(worst, abs((lp - lm) / (2 * h) - analytic[name][idx]))
    return worst


# --------------------------------------------------------------------------
# checks


def check_fedex_exactness(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, c = random_shape(rng)
        clients = random_lora_clients(rng, m, n, r, c)
        res = agg.agg_fedex(clients)
        if "skip-werr" in faults:
            res = agg.agg_fedit(clients)
        d = agg.divergence(clients, res)
        if not d < EXACT_TOL:
            return f"divergence {d:.3e} on m={m} n={n} r={r} c={c}"
    return None


def check_flora_exactness(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, c = random_shape(rng)
        clients = random_lora_clients(rng, m, n, r, c)
        fl = agg.agg_flora(clients, rng_seed=1)
        d = agg.divergence(clients, fl)
        gap = np.max(np.abs(fl.delta - agg.agg_fedex(clients).delta))
        if not (d < EXACT_TOL and gap < EXACT_TOL):
            return f"divergence {d:.3e}, gap to FedEx {gap:.3e}"
        if any(np.any(a.B != 0) for a in fl.client_adapters):
            return "re-initialized clients must have B = 0"
    return None


def check_ffa_exactness(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, c = random_shape(rng)
        clients = random_lora_clients(rng, m, n, r, c, shared_a=True)
        d = agg.divergence(clients, agg.agg_ffa(clients))
        if not d < EXACT_TOL:
            return f"divergence {d:.3e}"
    return None


def check_fedsb_exactness(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, c = random_shape(rng)
        clients = random_sb_clients(rng, m, n, r, c)
        d = agg.divergence(clients, agg.agg_fedsb(clients))
        if not d < EXACT_TOL:
            return f"divergence {d:.3e}"
    return None


def check_fedsb_hetero_exactness(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, c = random_shape(rng)
        b, a = random_orthonormal(rng, m, r), random_orthonormal(rng, r, n)
        clients = []
        for _ in range(c):
            k = int(rng.integers(1, r + 1))
            bi, ai = agg.client_frames(b, a, k)
            clients.append(ad.SbTriple(bi, rng.standard_normal((k, k)), ai))
        d = agg.divergence(clients, agg.agg_fedsb_hetero(clients, b, a))
        if not d < EXACT_TOL:
            return f"divergence {d:.3e}"
    return None


def check_fedit_inexactness(rng, faults) -> Optional[str]:
    e1, e2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    clients = [ad.LoraPair(e1, e1.T, alpha=1.0), ad.LoraPair(e2, e2.T, alpha=1.0)]
    d = agg.divergence(clients, agg.agg_fedit(clients))
    if abs(d - 0.5) > 1e-15:
        return f"orthogonal rank-1 pair gave {d}, expected 0.5"
    return None


def check_noise_decomposition(rng, faults) -> Optional[str]:
    for _ in range(100):
        m, n, r, _ = random_shape(rng)
        b, a = rng.standard_normal((m, r)), rng.standard_normal((r, n))
        xb, xa = rng.standard_normal((m, r)), rng.standard_normal((r, n))
        dec = privacy.noise_decompose_lora(b, a, xb, xa, 2.0)
        direct = 2.0 * ((b + xb) @ (a + xa) - b @ a)
        if np.max(np.abs(dec.total - direct)) > 1e-12 * max(1.0, np.max(np.abs(direct))):
            return "LoRA decomposition differs from the direct difference"
        if not np.any(dec.second_order != 0):
            return "LoRA second-order term vanished on a generic instance"
        ob, oa = random_orthonormal(rng, m, r), random_orthonormal(rng, r, n)
        sb = privacy.noise_decompose_sb(ob, oa, rng.standard_normal((r, r)))
        if np.any(sb.second_order != 0):
            return "SB second-order term is not exactly zero"
    return None


def check_accountant_oracle(rng, faults) -> Optional[str]:
    for sigma, q, steps in ((1.0, 0.01, 1000), (2.0, 0.05, 200), (0.8, 0.02, 100)):
        got = privacy.accountant_epsilon(privacy.PrivacyParams(1.0, sigma, 1e-5, q, steps))
        ref = oracles.epsilon_numeric(q, sigma, steps, 1e-5, privacy.ORDERS)
        if abs(got - ref) > 0.02 * ref:
            return f"sigma={sigma} q={q} T={steps}: accountant {got:.4f} vs oracle {ref:.4f}"
    return None


def check_calibration(rng, faults) -> Optional[str]:
    prev = math.inf
    for eps in (1.0, 3.0, 5.0, 7.5, 10.0):
        s = privacy.calibrate_sigma(eps, 1e-5, 0.01, 1000)
        got = privacy.accountant_epsilon(privacy.PrivacyParams(1.0, s, 1e-5, 0.01, 1000))
        if got > eps or s > prev:
            return f"target {eps}: sigma {s} gives {got}"
        prev = s
    return None


def check_gradients(rng, faults) -> Optional[str]:
    for kind in ("linear", "mlp"):
        shape = (model.ArchShape.linear(5, 4) if kind == "linear" else model.ArchShape.mlp(5, 6, 3))
        data = model.make_teacher_task(shape, 0.5, 12, 0.1, int(rng.integers(1 << 30)))
        for family in ("lora", "ffa", "sb"):
            ads = {}
            for s in shape.sites:
                if family == "sb":
                    ads[s.name] = ad.SbTriple(random_orthonormal(rng, s.m, 3), rng.standard_normal((3, 3)) * 0.1,
                                              random_orthonormal(rng, 3, s.n))
                else:
                    ads[s.name] = ad.LoraPair(rng.standard_normal((s.m, 3)) * 0.1, rng.standard_normal((3, s.n)) * 0.1,
                                              frozen_a=family == "ffa")
            err = finite_difference_error(shape, data.weights, data.batch, ads)
            if not err < 1e-6:
                return f"{kind}/{family}: max error {err:.2e}"
    return None


def check_cost_reconciliation(rng, faults) -> Optional[str]:
    for method in ("fedit", "fedex", "flora", "ffa", "fed-sb"):
        lr = 0.05 if method == "fed-sb" else 0.002
        for clients in (2, 6):
            try:
                run_federation(FederationConfig(method=method, clients=clients, rounds=2, lr=lr,
                                                samples=60, seed=int(rng.integers(1 << 30))))
            except commcost.CommMismatch as e:
                return f"{method} c={clients}: {e}"
    run_federation(FederationConfig(method="fed-sb", ranks=(1, 2, 2), clients=3, rounds=2, samples=30))
    arch = commcost.load_arch("toy2site")
    base = commcost.cost_per_round(arch, "fed-sb", 1, 2)
    for c in (5, 25, 100):
        other = commcost.cost_per_round(arch, "fed-sb", 1, c)
        if other.upload_per_client[0] != base.upload_per_client[0] or other.download != base.download:
            return "Fed-SB cost depends on the client count"
    if base.upload_per_client[0] != arch.n_sites:
        return "r=1 Fed-SB must send one parameter per site"
    return None


def check_kernel_parity(rng, faults) -> Optional[str]:
    if not HAVE_NUMBA:
        return None
    a = rng.standard_normal((9, 6))
    w1, v1 = kernels._jacobi_rotate_nb(a.copy())
    w2, v2 = kernels._jacobi_rotate_np(a.copy())
    s1, s2 = np.sort(np.linalg.norm(w1, axis=0)), np.sort(np.linalg.norm(w2, axis=0))
    if np.max(np.abs(s1 - s2)) > 1e-12:
        return "Jacobi paths disagree"
    g = rng.standard_normal((7, 11))
    if np.max(np.abs(kernels._clip_rows_nb(g, 1.0)[0] - kernels._clip_rows_np(g, 1.0)[0])) > 1e-15:
        return "clipping paths disagree"
    x, y = kernels._log_a_frac_nb(0.02, 1.1, 7.5), kernels._log_a_frac_np(0.02, 1.1, 7.5)
    if abs(x - y) > 1e-12 * max(1.0, abs(y)):
        return "log-moment paths disagree"
    return None


CHECKS: Dict[str, Callable] = {
    "fedex-exactness": check_fedex_exactness,
    "flora-exactness": check_flora_exactness,
    "ffa-exactness": check_ffa_exactness,
    "fedsb-exactness": check_fedsb_exactness,
    "fedsb-hetero-exactness": check_fedsb_hetero_exactness,
    "fedit-inexactness": check_fedit_inexactness,
    "noise-decomposition": check_noise_decomposition,
    "accountant-oracle": check_accountant_oracle,
    "sigma-calibration": check_calibration,
    "gradient-check": check_gradients,
    "cost-reconciliation": check_cost_reconciliation,
    "kernel-parity": check_kernel_parity,
}


def run_checks(names: Optional[Iterable[str]] = None, faults: Iterable[str] = (),
               seed: int = 0) -> List[Tuple[str, Optional[str], float]]:
    """(name, failure detail or None, seconds) for each requested check."""
    faults = set(faults)
    unknown = faults - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    names = list(CHECKS) if names is None else list(names)
    out = []
    for i, name in enumerate(names):
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}")
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            detail = CHECKS[name](rng, faults)
        except Exception as e:  # a crash is a failure of that invariant
            detail = f"{type(e).__name__}: {e}"
        out.append((name, detail, time.perf_counter() - t0))
    return out
