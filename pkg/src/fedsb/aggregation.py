"""Server-side aggregation for the five federated adapter methods.

Each ``agg_*`` function aggregates one adapted site: it takes the clients'
adapters for that site and returns an :class:`AggregateResult` whose ``delta``
is the global update the server applies.  :func:`aggregate` runs a method
over every site of a round's :class:`ClientUpdate` list.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from fedsb.adapters import (Adapter, AdapterMethod, LoraPair, SbTriple, effective_update,
                            init_lora)
from fedsb.linalg import seed_sequence


class AggregationError(ValueError):
    """Client updates cannot be aggregated together."""


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    adapters: Mapping[str, Adapter]
    method: AdapterMethod
    n_samples: int = 1

    def rank(self, site: str) -> int:
        return self.adapters[site].rank


@dataclass
class AggregateResult:
    adapter: Adapter  # new global adapter state for the site
    delta: np.ndarray  # reconstructed global update
    residual: Optional[np.ndarray] = None  # FedEx W_err, folded into the base weights
    client_adapters: Optional[List[Adapter]] = None  # FLoRA re-initialized client adapters


def _weights(c: int, weights: Optional[Sequence[float]]) -> np.ndarray:
    if weights is None:
        return np.full(c, 1.0 / c)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (c,) or np.any(w < 0) or w.sum() <= 0:
        raise AggregationError("weights must be non-negative, one per client")
    return w / w.sum()


def _mean(mats, w: Optional[np.ndarray]) -> np.ndarray:
    stack = np.stack(mats)
    if w is None:
        return stack.mean(axis=0)
    return np.tensordot(w, stack, axes=1)


def _check_lora(adapters: Sequence[Adapter]) -> LoraPair:
    if not adapters:
        raise AggregationError("no client updates")
    first = adapters[0]
    for a in adapters:
        if not isinstance(a, LoraPair):
            raise AggregationError("mixed adapter kinds in one round")
        if a.B.shape != first.B.shape or a.A.shape != first.A.shape:
            raise AggregationError("client ranks or site shapes differ")
        if a.alpha != first.alpha:
            raise AggregationError("client scalings differ")
    return first


def _check_sb(adapters: Sequence[Adapter]) -> SbTriple:
    if not adapters:
        raise AggregationError("no client updates")
    first = adapters[0]
    for a in adapters:
        if not isinstance(a, SbTriple):
            raise AggregationError("mixed adapter kinds in one round")
        if a.R.shape != first.R.shape:
            raise AggregationError("client ranks differ; use agg_fedsb_hetero")
        if not (np.array_equal(a.B, first.B) and np.array_equal(a.A, first.A)):
            raise AggregationError("clients disagree on the frozen B/A frames")
    return first


def agg_fedit(adapters: Sequence[Adapter], weights=None) -> AggregateResult:
    """FedAvg on B and A separately; inexact in general."""
    first = _check_lora(adapters)
    w = None if weights is None else _weights(len(adapters), weights)
    b = _mean([a.B for a in adapters], w)
    a_ = _mean([a.A for a in adapters], w)
    glob = LoraPair(b, a_, first.alpha, first.frozen_a)
    return AggregateResult(glob, effective_update(glob))


def agg_fedex(adapters: Sequence[Adapter], weights=None) -> AggregateResult:
    """FedIT averages plus the residual W_err = mean(s B_i A_i) - s mean(B) mean(A)."""
    first = _check_lora(adapters)
    w = None if weights is None else _weights(len(adapters), weights)
    avg = agg_fedit(adapters, weights)
    ideal = _mean([effective_update(a) for a in adapters], w)
    residual = ideal - avg.delta
    return AggregateResult(avg.adapter, avg.delta + residual, residual=residual)


def stack_factors(adapters: Sequence[LoraPair], weights=None):
    """[B_1 ... B_c] and the weighted vertical stack of A_i (scaling folded in)."""
    w = _weights(len(adapters), weights)
    b = np.hstack([a.B for a in adapters])
    a_ = np.vstack([wi * a.scaling * a.A for wi, a in zip(w, adapters)])
    return b, a_


def agg_flora(adapters: Sequence[Adapter], rng_seed=None, weights=None) -> AggregateResult:
    """Exact update via stacking; clients restart from fresh LoRA adapters."""
    first = _check_lora(adapters)
    b, a_ = stack_factors(adapters, weights)
    delta = b @ a_
    seeds = seed_sequence(rng_seed).spawn(len(adapters))
    fresh = [init_lora(first.shape, first.rank, first.alpha, s, frozen_a=first.frozen_a)
             for s in seeds]
    return AggregateResult(fresh[0], delta, client_adapters=fresh)


def agg_ffa(adapters: Sequence[Adapter], shared_A: Optional[np.ndarray] = None,
            weights=None) -> AggregateResult:
    """Average B only; every client must hold the same frozen A."""
    first = _check_lora(adapters)
    ref = first.A if shared_A is None else np.asarray(shared_A, dtype=np.float64)
    for a in adapters:
        if not np.array_equal(a.A, ref):
            raise AggregationError("FFA clients must share a bit-identical A")
    w = None if weights is None else _weights(len(adapters), weights)
    b = _mean([a.B for a in adapters], w)
    glob = LoraPair(b, ref, first.alpha, True)
    return AggregateResult(glob, effective_update(glob))


def agg_fedsb(adapters: Sequence[Adapter], weights=None) -> AggregateResult:
    """R_agg = mean(R_i); the global update B R_agg A is the exact client mean."""
    first = _check_sb(adapters)
    w = None if weights is None else _weights(len(adapters), weights)
    r = _mean([a.R for a in adapters], w)
    glob = SbTriple(first.B, r, first.A)
    return AggregateResult(glob, effective_update(glob))


def pad_core(r_small: np.ndarray, r_max: int) -> np.ndarray:
    k = r_small.shape[0]
    if k > r_max:
        raise AggregationError(f"client rank {k} exceeds r_max {r_max}")
    out = np.zeros((r_max, r_max))
    out[:k, :k] = r_small
    return out


def client_frames(B: np.ndarray, A: np.ndarray, r_i: int):
    """Leading r_i directions of the shared basis."""
    return B[:, :r_i], A[:r_i, :]


def agg_fedsb_hetero(adapters: Sequence[SbTriple], B: np.ndarray, A: np.ndarray,
                     weights=None) -> AggregateResult:
    """Zero-pad each client's r_i x r_i core to r_max x r_max, then average."""
    if not adapters:
        raise AggregationError("no client updates")
    r_max = B.shape[1]
    if A.shape[0] != r_max:
        raise AggregationError("global B and A ranks differ")
    padded = []
    for a in adapters:
        if not isinstance(a, SbTriple):
            raise AggregationError("mixed adapter kinds in one round")
        if a.rank > r_max:
            raise AggregationError(f"client rank {a.rank} exceeds r_max {r_max}")
        b_i, a_i = client_frames(B, A, a.rank)
        if not (np.array_equal(a.B, b_i) and np.array_equal(a.A, a_i)):
            raise AggregationError("client frames are not the leading columns of the shared basis")
        padded.append(pad_core(a.R, r_max))
    w = None if weights is None else _weights(len(adapters), weights)
    glob = SbTriple(B, _mean(padded, w), A)
    return AggregateResult(glob, effective_update(glob))


def ideal_update(adapters: Sequence[Adapter], weights=None) -> np.ndarray:
    w = None if weights is None else _weights(len(adapters), weights)
    return _mean([effective_update(a) for a in adapters], w)


def divergence(adapters: Sequence[Adapter], result: AggregateResult, weights=None) -> float:
    """Frobenius distance between the aggregated update and the mean client update."""
    diff = result.delta - ideal_update(adapters, weights)
    return float(np.sqrt(np.sum(diff * diff)))


def aggregate(method: AdapterMethod, updates: Sequence[ClientUpdate], *, rng_seed=None,
              hetero_basis: Optional[Mapping[str, tuple]] = None,
              weighted: bool = False) -> Dict[str, AggregateResult]:
    """Aggregate every site of one round."""
    if not updates:
        raise AggregationError("no client updates")
    for u in updates:
        if u.method is not method:
            raise AggregationError("client method tags differ from the round method")
    sites = list(updates[0].adapters)
    weights = [u.n_samples for u in updates] if weighted else None
    seeds = seed_sequence(rng_seed).spawn(len(sites))
    out = {}
    for site, seed in zip(sites, seeds):
        ads = [u.adapters[site] for u in updates]
        if method is AdapterMethod.FEDIT:
            out[site] = agg_fedit(ads, weights)
        elif method is AdapterMethod.FEDEX:
            out[site] = agg_fedex(ads, weights)
        elif method is AdapterMethod.FLORA:
            out[site] = agg_flora(ads, seed, weights)
        elif method is AdapterMethod.FFA:
            out[site] = agg_ffa(ads, weights=weights)
        elif hetero_basis is not None:
            b, a = hetero_basis[site]
            out[site] = agg_fedsb_hetero(ads, b, a, weights)
        else:
            out[site] = agg_fedsb(ads, weights)
    return out
