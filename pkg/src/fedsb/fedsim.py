"""Federated orchestration: partitioning, local (DP-)SGD, rounds and metering.

One :class:`FederationConfig` describes a full experiment.  All randomness is
drawn from named streams of the master seed (see :func:`named_stream`), so a
config plus seed reproduces a run bit for bit.
"""
import math
import zlib
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fedsb import adapters as ad
from fedsb import aggregation as agg
from fedsb import commcost, model, privacy
from fedsb.adapters import AdapterMethod, LoraPair, SbTriple


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def named_stream(seed: int, *names) -> np.random.SeedSequence:
    """Independent seed stream for a purpose such as ("train", 3)."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.SeedSequence(int(seed), spawn_key=key)


# --------------------------------------------------------------------------
# partitioning


PARTITION_MODES = ("iid", "per-source")


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    clients: int = 1
    assignment: Optional[Tuple[int, ...]] = None  # per-source: client index of each source

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.clients < 1:
            raise ConfigError("need at least one client")


def partition(data: model.Batch, spec: PartitionSpec, rng_seed) -> List[model.Batch]:
    """Disjoint client shards.

    ``iid`` shuffles and splits into sizes differing by at most one.
    ``per-source`` gives every source wholly to one client (round-robin unless
    ``spec.assignment`` says otherwise).
    """
    n = len(data)
    if n == 0:
        raise ConfigError("dataset is empty")
    c = spec.clients
    if c > n:
        raise ConfigError(f"{c} clients but only {n} samples")
    rng = np.random.default_rng(rng_seed)
    if spec.mode == "iid":
        perm = rng.permutation(n)
        return [data.subset(np.sort(idx)) for idx in np.array_split(perm, c)]
    if data.sources is None:
        raise ConfigError("per-source partition needs source labels")
    sources = np.unique(data.sources)
    if spec.assignment is not None:
        assign = tuple(spec.assignment)
        if len(assign) != len(sources) or any(not 0 <= a < c for a in assign):
            raise ConfigError("assignment needs one client index in [0, c) per source")
    else:
        if c > len(sources):
            raise ConfigError(f"{c} clients but only {len(sources)} sources")
        assign = tuple(k % c for k in range(len(sources)))
    shards = []
    for client in range(c):
        mine = [s for s, a in zip(sources, assign) if a == client]
        idx = np.flatnonzero(np.isin(data.sources, mine))
        if idx.size == 0:
            raise ConfigError(f"client {client} received no sources")
        shards.append(data.subset(idx))
    return shards


def source_heterogeneity(shards: Sequence[model.Batch]) -> float:
    """Mean pairwise distance between the shards' mean inputs."""
    means = [s.inputs.mean(axis=0) for s in shards]
    if len(means) < 2:
        return 0.0
    d = [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]]
    return float(np.mean(d))


# --------------------------------------------------------------------------
# clients


@dataclass
class ClientState:
    id: int
    shard: model.Batch
    adapters: Dict[str, ad.Adapter]
    lr: float
    steps: int = 0
    shuffle_rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    noise_rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    accountant: Optional[privacy.Accountant] = None
    last_loss: float = math.nan


def _site_updates(adapters: Mapping[str, ad.Adapter]) -> Dict[str, np.ndarray]:
    return {k: ad.effective_update(a) for k, a in adapters.items()}


def local_train(client: ClientState, shape: model.ArchShape, base_weights, epochs: int,
                batch_size: int, privacy_params: Optional[privacy.PrivacyParams] = None,
                method: AdapterMethod = AdapterMethod.FEDIT) -> agg.ClientUpdate:
    """SGD (DP-SGD when ``privacy_params`` is given) on the trainable parts only.

    Each epoch visits the shard once in a fresh random order using batches of
    ``batch_size``.  The client's adapters are replaced; frozen blocks are
    carried over by reference.
    """
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    shard = client.shard
    n = len(shard)
    q = min(1.0, batch_size / n)
    for _ in range(epochs):
        order = client.shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = shard.subset(order[start:start + batch_size])
            grads = model.per_sample_gradients(shape, base_weights, _site_updates(client.adapters), batch)
            named = {}
            for site, adapter in client.adapters.items():
                for k, g in ad.trainable_gradient(adapter, grads[site]).items():
                    named[f"{site}/{k}"] = g
            flat, layout = privacy.flatten_per_sample(named)
            if privacy_params is None:
                step = flat.mean(axis=0)
            else:
                step = privacy.dp_sgd_step(flat, privacy_params, client.noise_rng)
                if client.accountant is not None and privacy_params.noise_multiplier > 0:
                    client.accountant.step(privacy_params.noise_multiplier, q)
            step = privacy.unflatten(step, layout)
            new = {}
            for site, adapter in client.adapters.items():
                params = ad.trainable_params(adapter)
                new[site] = ad.with_trainable(
                    adapter, {k: v - client.lr * step[f"{site}/{k}"] for k, v in params.items()})
            client.adapters = new
            client.steps += 1
    client.last_loss = model.forward_loss(shape, base_weights, _site_updates(client.adapters), shard)
    return agg.ClientUpdate(client.id, dict(client.adapters), method, n)


# --------------------------------------------------------------------------
# configuration


@dataclass
class FederationConfig:
    """Every knob of one experiment; defaults are documented in the README."""

    # method
    method: str = "fed-sb"
    rank: int = 2
    ranks: Optional[Tuple[int, ...]] = None  # per-client ranks, Fed-SB only
    alpha: float = ad.DEFAULT_ALPHA
    r_init: str = "zero"
    init_source: str = "server"  # server-held batch or pooled client gradients
    init_samples: int = 64
    weighted: bool = False
    # federation
    clients: int = 5
    rounds: int = 10
    epochs: int = 1
    batch_size: int = 16
    lr: float = 0.05
    partition: str = "iid"
    # task
    kind: str = "linear"  # linear | mlp
    n_in: int = 8
    hidden: int = 12
    n_out: int = 6
    loss: str = "squared"
    samples: int = 200
    noise_std: float = 0.0
    delta_scale: float = 1.0
    delta_rank: Optional[int] = 2
    isotropic: bool = False
    sources: int = 1
    input_shift: float = 2.0
    # privacy
    clip: Optional[float] = None
    sigma: Optional[float] = None
    epsilon: Optional[float] = None
    delta: float = 1e-5
    # randomness
    seed: int = 0

    @property
    def method_enum(self) -> AdapterMethod:
        return AdapterMethod.parse(self.method)

    @property
    def private(self) -> bool:
        return self.sigma is not None or self.epsilon is not None

    def shape(self) -> model.ArchShape:
        if self.kind == "linear":
            return model.ArchShape.linear(self.n_in, self.n_out, self.loss)
        if self.kind == "mlp":
            return model.ArchShape.mlp(self.n_in, self.hidden, self.n_out, self.loss)
        raise ConfigError(f"unknown model kind {self.kind!r}")

    def validate(self) -> "FederationConfig":
        try:
            method = self.method_enum
            shape = self.shape()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        min_dim = min(min(s.m, s.n) for s in shape.sites)
        if not 1 <= self.rank <= min_dim:
            raise ConfigError(f"rank must lie in [1, {min_dim}]")
        if self.ranks is not None:
            if method is not AdapterMethod.FEDSB:
                raise ConfigError("per-client ranks are a Fed-SB feature")
            if len(self.ranks) != self.clients:
                raise ConfigError("ranks needs one entry per client")
            if any(not 1 <= k <= self.rank for k in self.ranks):
                raise ConfigError("per-client ranks must lie in [1, rank]")
        if self.r_init not in ad.R_INIT_POLICIES:
            raise ConfigError(f"r_init must be one of {ad.R_INIT_POLICIES}")
        if self.init_source not in ("server", "clients"):
            raise ConfigError("init_source must be 'server' or 'clients'")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.clients < 1 or self.rounds < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need clients >= 1, rounds >= 0, epochs >= 1, batch_size >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.partition not in PARTITION_MODES:
            raise ConfigError(f"partition must be one of {PARTITION_MODES}")
        if self.samples < self.clients:
            raise ConfigError("fewer samples than clients")
        if self.partition == "per-source":
            if self.sources < self.clients:
                raise ConfigError("per-source partition needs sources >= clients")
            if self.isotropic:
                raise ConfigError("isotropic inputs apply to the single-teacher task only")
        elif self.sources != 1:
            raise ConfigError("sources > 1 needs partition = per-source")
        if self.isotropic and min(self.samples, self.init_samples) < self.n_in:
            raise ConfigError("isotropic sampling needs samples and init_samples >= n_in")
        if self.init_samples < 1:
            raise ConfigError("init_samples must be >= 1")
        if self.delta_rank is not None and not 1 <= self.delta_rank <= min_dim:
            raise ConfigError(f"delta_rank must lie in [1, {min_dim}]")
        if self.noise_std < 0 or self.delta_scale < 0:
            raise ConfigError("noise_std and delta_scale must be non-negative")
        if self.sigma is not None and self.epsilon is not None:
            raise ConfigError("sigma and epsilon are mutually exclusive")
        if self.private:
            if self.clip is None or not self.clip > 0:
                raise ConfigError("private runs need a positive clip norm")
            if not 0 < self.delta < 1:
                raise ConfigError("delta must lie in (0, 1)")
            if self.sigma is not None and self.sigma < 0:
                raise ConfigError("sigma must be non-negative")
            if self.epsilon is not None and not self.epsilon > 0:
                raise ConfigError("epsilon must be positive")
        elif self.clip is not None:
            raise ConfigError("clip given without sigma or epsilon")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _shard_sizes(config: FederationConfig) -> List[int]:
    if config.partition == "iid":
        return [len(a) for a in np.array_split(np.arange(config.samples), config.clients)]
    per = [len(a) for a in np.array_split(np.arange(config.samples), config.sources)]
    sizes = [0] * config.clients
    for k, s in enumerate(per):
        sizes[k % config.clients] += s
    return sizes


def resolve_privacy(config: FederationConfig) -> Optional[privacy.PrivacyParams]:
    """PrivacyParams for the run, calibrating sigma when a target epsilon is set.

    Calibration uses the largest per-client step count and sample rate, so
    every client meets the target.
    """
    if not config.private:
        return None
    sizes = _shard_sizes(config)
    steps = max(config.rounds * config.epochs * math.ceil(n / config.batch_size) for n in sizes)
    q = min(1.0, config.batch_size / min(sizes))
    if config.epsilon is not None:
        sigma = privacy.calibrate_sigma(config.epsilon, config.delta, q, steps)
    else:
        sigma = config.sigma
    return privacy.PrivacyParams(config.clip, sigma, config.delta, q, steps)


# --------------------------------------------------------------------------
# federation


@dataclass(frozen=True)
class RoundReport:
    round: int
    client_losses: Tuple[float, ...]
    global_loss: float
    divergence: float
    upload: Tuple[int, ...]  # parameters per client
    download: int
    epsilon: Optional[float] = None


@dataclass
class FederationRun:
    config: FederationConfig
    reports: List[RoundReport]
    initial_loss: float
    trajectory: List[Dict[str, np.ndarray]]  # global dW after each round
    ledger: commcost.CommLedger
    accountants: List[privacy.Accountant]
    privacy: Optional[privacy.PrivacyParams]
    predicted: commcost.CostBreakdown
    global_delta: Dict[str, np.ndarray]

    @property
    def epsilon(self) -> Optional[float]:
        if self.privacy is None:
            return None
        return max((a.epsilon() for a in self.accountants), default=0.0)


def build_task(config: FederationConfig):
    """(TaskData, server init batch) for the configured synthetic task."""
    shape = config.shape()
    if config.partition == "per-source":
        per = [len(a) for a in np.array_split(np.arange(config.samples), config.sources)]
        extra = math.ceil(config.init_samples / config.sources)
        task = model.make_multisource_task(shape, config.sources, [p + extra for p in per],
                                           config.delta_scale, config.noise_std,
                                           named_stream(config.seed, "data"),
                                           input_shift=config.input_shift,
                                           delta_rank=config.delta_rank)
        keep, held = [], []
        off = 0
        for p in per:
            keep.extend(range(off, off + p))
            held.extend(range(off + p, off + p + extra))
            off += p + extra
        data = task.batch.subset(np.array(keep))
        init = task.batch.subset(np.array(held[:config.init_samples]))
        return model.TaskData(task.weights, data, task.target_update), init
    teacher = model.make_teacher(shape, config.delta_scale, config.noise_std,
                                 named_stream(config.seed, "teacher"),
                                 delta_rank=config.delta_rank, isotropic=config.isotropic)
    data = teacher.sample(config.samples, named_stream(config.seed, "data"))
    init = teacher.sample(config.init_samples, named_stream(config.seed, "init-batch"))
    return model.TaskData(teacher.weights, data, teacher.target_update), init


def _count(payload: bytes) -> int:
    return ad.payload_param_count(payload)


def run_federation(config: FederationConfig, *, task=None) -> FederationRun:
    """Run ``config.rounds`` rounds and return reports, trajectory and ledger.

    ``task`` may supply a prebuilt ``(TaskData, init_batch)`` pair.
    """
    config.validate()
    method = config.method_enum
    shape = config.shape()
    data, init_batch = build_task(config) if task is None else task
    w0 = {k: np.array(v, dtype=np.float64) for k, v in data.weights.items()}
    base = {k: v.copy() for k, v in w0.items()}
    shards = partition(data.batch, PartitionSpec(config.partition, config.clients),
                       named_stream(config.seed, "partition"))
    params = resolve_privacy(config)
    ledger = commcost.CommLedger()
    r = config.rank
    ranks = tuple(config.ranks) if config.ranks is not None else None

    # round-0 setup, broadcast once
    if method is AdapterMethod.FEDSB:
        if config.init_source == "server":
            frames = ad.init_sb_all(shape, w0, init_batch, config.lr, r, config.r_init)
        else:
            # each client uploads its mean first-step gradient once
            steps = [ad.estimate_first_step(shape, w0, s, config.lr) for s in shards]
            wts = np.array([len(s) for s in shards], dtype=np.float64)
            for i, s in enumerate(steps):
                ledger.record(0, method, "setup", sum(v.size for v in s.values()), i)
            pooled = {k: np.tensordot(wts / wts.sum(), np.stack([s[k] for s in steps]), axes=1)
                      for k in steps[0]}
            frames = {k: ad.sb_from_update(v, r, config.r_init) for k, v in pooled.items()}
        glob = frames
        ledger.record(0, method, "setup",
                      sum(_count(ad.pack_blocks(method.value, [a.B, a.A])) for a in glob.values()))
    else:
        seeds = named_stream(config.seed, "init").spawn(len(shape.sites))
        glob = {s.name: ad.init_lora((s.m, s.n), r, config.alpha, seed,
                                     frozen_a=method is AdapterMethod.FFA)
                for s, seed in zip(shape.sites, seeds)}
        ledger.record(0, method, "setup",
                      sum(_count(ad.pack_adapter(method.value, a)) for a in glob.values()))

    def client_view(adapters, k):
        if ranks is None:
            return dict(adapters)
        out = {}
        for site, a in adapters.items():
            b, a_ = agg.client_frames(a.B, a.A, ranks[k])
            out[site] = SbTriple(b, a.R[:ranks[k], :ranks[k]].copy(), a_)
        return out

    clients = []
    for k, shard in enumerate(shards):
        acct = privacy.Accountant(config.delta) if params is not None else None
        clients.append(ClientState(
            k, shard, client_view(glob, k), config.lr,
            shuffle_rng=np.random.default_rng(named_stream(config.seed, "train", k)),
            noise_rng=np.random.default_rng(named_stream(config.seed, "dp-noise", k)),
            accountant=acct))

    def global_delta():
        return {k: base[k] - w0[k] + ad.effective_update(glob[k]) for k in w0}

    pooled_data = data.batch
    initial_loss = model.forward_loss(shape, w0, global_delta(), pooled_data)
    reports: List[RoundReport] = []
    trajectory: List[Dict[str, np.ndarray]] = []
    for rnd in range(1, config.rounds + 1):
        updates = [local_train(c, shape, base, config.epochs, config.batch_size, params, method)
                   for c in clients]
        for u in updates:
            ledger.record(rnd, method, "up",
                          sum(_count(ad.pack_trainable(method.value, a)) for a in u.adapters.values()),
                          u.client_id)
        weights = [u.n_samples for u in updates] if config.weighted else None
        hetero = None
        if ranks is not None:
            hetero = {k: (a.B, a.A) for k, a in glob.items()}
        results = agg.aggregate(method, updates, rng_seed=named_stream(config.seed, "flora", rnd),
                                hetero_basis=hetero, weighted=config.weighted)

        div2 = 0.0
        down = 0
        for site, res in results.items():
            div2 += agg.divergence([u.adapters[site] for u in updates], res, weights) ** 2
            if method in (AdapterMethod.FEDEX, AdapterMethod.FLORA):
                b, a_ = agg.stack_factors([u.adapters[site] for u in updates], weights)
                if b.size + a_.size <= res.delta.size:
                    down += _count(ad.pack_blocks(method.value, [b, a_]))
                else:
                    down += _count(ad.pack_blocks("dense", [res.delta]))
            else:
                down += _count(ad.pack_trainable(method.value, res.adapter))
        ledger.record(rnd, method, "down", down)

        if method is AdapterMethod.FEDEX:
            for site, res in results.items():
                base[site] = base[site] + res.residual
        if method is AdapterMethod.FLORA:
            for site, res in results.items():
                base[site] = base[site] + res.delta
            glob = {site: res.adapter for site, res in results.items()}
            for k, c in enumerate(clients):
                c.adapters = {site: res.client_adapters[k] for site, res in results.items()}
        else:
            glob = {site: res.adapter for site, res in results.items()}
            for k, c in enumerate(clients):
                c.adapters = client_view(glob, k)

        delta = global_delta()
        trajectory.append({k: v.copy() for k, v in delta.items()})
        eps = None
        if params is not None:
            eps = max(c.accountant.epsilon() for c in clients)
        reports.append(RoundReport(
            rnd, tuple(c.last_loss for c in clients),
            model.forward_loss(shape, w0, delta, pooled_data),
            math.sqrt(div2), tuple(ledger.upload(rnd)[k] for k in range(config.clients)),
            down, eps))

    predicted = commcost.cost_per_round(commcost.arch_from_shape(shape), method, r,
                                        config.clients, ranks=ranks, ffa_convention="b-only")
    ledger.reconcile(predicted)
    return FederationRun(config, reports, initial_loss, trajectory, ledger,
                         [c.accountant for c in clients if c.accountant is not None],
                         params, predicted, global_delta())
