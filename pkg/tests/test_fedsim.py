import math
from dataclasses import replace

import numpy as np
import pytest

from fedsb import adapters as ad
from fedsb import fedsim, model, privacy
from fedsb.adapters import AdapterMethod
from fedsb.fedsim import ConfigError, FederationConfig, PartitionSpec, run_federation

LORA_LR = 0.002


def cfg(**kw):
    if kw.get("method", "fed-sb") not in ("fed-sb", "fedsb") and "lr" not in kw:
        kw["lr"] = LORA_LR
    return FederationConfig(**kw)


def _batch(n, d=3):
    x = np.arange(n * d, dtype=float).reshape(n, d)
    return model.Batch(x, x[:, :1])


# -- partition ---------------------------------------------------------------


def test_single_client_gets_everything():
    b = _batch(7)
    (shard,) = fedsim.partition(b, PartitionSpec("iid", 1), 0)
    assert np.array_equal(shard.inputs, b.inputs)


def test_iid_balanced_and_disjoint():
    b = _batch(10)
    shards = fedsim.partition(b, PartitionSpec("iid", 3), 0)
    assert sorted(len(s) for s in shards) == [3, 3, 4]
    rows = np.concatenate([s.inputs[:, 0] for s in shards])
    assert sorted(rows.tolist()) == sorted(b.inputs[:, 0].tolist())
    with pytest.raises(ConfigError):
        fedsim.partition(b, PartitionSpec("iid", 11), 0)


def test_per_source_partition_is_heterogeneous():
    shape = model.ArchShape.linear(6, 3)
    data = model.make_multisource_task(shape, 8, 25, 1.0, 0.0, 3)
    per = fedsim.partition(data.batch, PartitionSpec("per-source", 8), 0)
    assert len(per) == 8
    assert all(len(set(s.sources.tolist())) == 1 for s in per)
    assert len({int(s.sources[0]) for s in per}) == 8
    iid = fedsim.partition(data.batch, PartitionSpec("iid", 8), 0)
    assert fedsim.source_heterogeneity(per) > fedsim.source_heterogeneity(iid)


def test_per_source_round_robin_and_errors():
    shape = model.ArchShape.linear(4, 2)
    data = model.make_multisource_task(shape, 5, 4, 1.0, 0.0, 1)
    shards = fedsim.partition(data.batch, PartitionSpec("per-source", 2), 0)
    assert sorted(set(shards[0].sources.tolist())) == [0, 2, 4]
    with pytest.raises(ConfigError):
        fedsim.partition(data.batch, PartitionSpec("per-source", 6), 0)
    with pytest.raises(ConfigError):
        fedsim.partition(_batch(5), PartitionSpec("per-source", 2), 0)
    with pytest.raises(ConfigError):
        PartitionSpec("dirichlet", 2)


# -- local training ----------------------------------------------------------


def _client(adapters, shard, lr=0.05, seed=0):
    return fedsim.ClientState(0, shard, dict(adapters), lr,
                              shuffle_rng=np.random.default_rng(seed), noise_rng=np.random.default_rng(seed + 1))


def _sb_setup(seed=0, rank=2):
    shape = model.ArchShape.linear(8, 6)
    data = model.make_teacher_task(shape, 1.0, 40, 0.1, seed, delta_rank=2)
    sb = ad.init_sb_all(shape, data.weights, data.batch, 0.1, rank, r_init="sigma-step")
    return shape, data, sb


def test_lr_zero_leaves_adapter_unchanged():
    shape, data, sb = _sb_setup()
    c = _client(sb, data.batch, lr=0.0)
    fedsim.local_train(c, shape, data.weights, 2, 8)
    assert np.array_equal(c.adapters["W"].R, sb["W"].R)


def test_frozen_parts_untouched():
    shape, data, sb = _sb_setup()
    c = _client(sb, data.batch)
    fedsim.local_train(c, shape, data.weights, 3, 8)
    assert c.adapters["W"].B is sb["W"].B and c.adapters["W"].A is sb["W"].A
    assert not np.array_equal(c.adapters["W"].R, sb["W"].R)
    ffa = {"W": ad.init_lora((6, 8), 2, rng_seed=1, frozen_a=True)}
    a0 = ffa["W"].A.copy()
    c = _client(ffa, data.batch, lr=LORA_LR)
    fedsim.local_train(c, shape, data.weights, 3, 8)
    assert np.array_equal(c.adapters["W"].A, a0) and c.adapters["W"].B.any()


def test_degenerate_privacy_is_bit_identical():
    shape, data, sb = _sb_setup()
    lora = {"W": ad.init_lora((6, 8), 2, rng_seed=1)}
    for start in (sb, lora):
        plain, dp = _client(start, data.batch, lr=0.01), _client(start, data.batch, lr=0.01)
        fedsim.local_train(plain, shape, data.weights, 2, 8)
        fedsim.local_train(dp, shape, data.weights, 2, 8, privacy.PrivacyParams(math.inf, 0.0))
        for k in ("B", "A", "R"):
            if hasattr(plain.adapters["W"], k):
                assert getattr(plain.adapters["W"], k).tobytes() == getattr(dp.adapters["W"], k).tobytes()


def test_local_train_deterministic():
    shape, data, sb = _sb_setup()
    p = privacy.PrivacyParams(1.0, 1.0)
    a, b = _client(sb, data.batch, seed=4), _client(sb, data.batch, seed=4)
    fedsim.local_train(a, shape, data.weights, 2, 8, p)
    fedsim.local_train(b, shape, data.weights, 2, 8, p)
    assert a.adapters["W"].R.tobytes() == b.adapters["W"].R.tobytes()
    assert a.steps == b.steps == 10


def test_full_rank_sb_single_client_reaches_optimum():
    run = run_federation(cfg(method="fed-sb", clients=1, rank=6, n_in=6, n_out=6, delta_rank=None,
                             rounds=300, samples=100))
    assert run.reports[-1].global_loss < 1e-6


# -- federation --------------------------------------------------------------


def test_zero_rounds():
    run = run_federation(cfg(rounds=0))
    assert run.reports == [] and run.trajectory == []
    assert all(not v.any() for v in run.global_delta.values())
    assert run.initial_loss > 0


def test_fedsb_loss_non_increasing():
    run = run_federation(cfg(method="fed-sb", clients=5, rounds=50, batch_size=40))
    losses = [run.initial_loss] + [r.global_loss for r in run.reports]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("method", ["fedex", "flora", "ffa", "fed-sb"])
def test_exact_methods_every_round(method):
    run = run_federation(cfg(method=method, clients=4, rounds=5))
    assert all(r.divergence < 1e-12 for r in run.reports)


def test_fedit_is_inexact():
    run = run_federation(cfg(method="fedit", clients=4, rounds=5))
    assert max(r.divergence for r in run.reports) > 1e-6


def test_fedex_and_flora_agree_on_first_round():
    a = run_federation(cfg(method="fedex", clients=4, rounds=1))
    b = run_federation(cfg(method="flora", clients=4, rounds=1))
    for k in a.trajectory[0]:
        assert np.max(np.abs(a.trajectory[0][k] - b.trajectory[0][k])) < 1e-12


def test_run_deterministic():
    c = cfg(method="fed-sb", rounds=4, clip=1.0, sigma=0.8)
    a, b = run_federation(c), run_federation(c)
    assert a.reports == b.reports
    assert all(x["W"].tobytes() == y["W"].tobytes() for x, y in zip(a.trajectory, b.trajectory))


def test_single_client_methods_coincide():
    runs = {m: run_federation(cfg(method=m, clients=1, rounds=3, samples=40))
            for m in ("fedit", "fedex", "flora")}
    ref = runs["fedit"].trajectory
    np.testing.assert_array_equal(runs["fedex"].trajectory[0]["W"], ref[0]["W"])
    # FLoRA folds the scaling into the stacked A, so equality is up to rounding
    np.testing.assert_allclose(runs["flora"].trajectory[0]["W"], ref[0]["W"], rtol=0, atol=1e-14)
    for t in range(3):
        np.testing.assert_array_equal(runs["fedex"].trajectory[t]["W"], ref[t]["W"])


@pytest.mark.parametrize("method", ["ffa", "fed-sb"])
def test_single_client_matches_centralized(method):
    c = cfg(method=method, clients=1, rounds=4, samples=40, epochs=2)
    run = run_federation(c)
    data, init_batch = fedsim.build_task(c)
    shape = c.shape()
    if method == "fed-sb":
        start = ad.init_sb_all(shape, data.weights, init_batch, c.lr, c.rank)
    else:
        seeds = fedsim.named_stream(c.seed, "init").spawn(1)
        start = {"W": ad.init_lora((6, 8), c.rank, c.alpha, seeds[0], frozen_a=True)}
    client = fedsim.ClientState(0, data.batch, start, c.lr,
                                shuffle_rng=np.random.default_rng(fedsim.named_stream(c.seed, "train", 0)))
    fedsim.local_train(client, shape, data.weights, c.epochs * c.rounds, c.batch_size)
    np.testing.assert_allclose(ad.effective_update(client.adapters["W"]), run.global_delta["W"], atol=1e-14)


class CountingShard:
    """Forwards to a Batch and counts every access."""

    def __init__(self, batch):
        self._batch = batch
        self.reads = 0

    def __len__(self):
        self.reads += 1
        return len(self._batch)

    def __getattr__(self, name):
        self.reads += 1
        return getattr(self._batch, name)


def test_client_isolation(monkeypatch):
    shims = []
    real_partition, real_train = fedsim.partition, fedsim.local_train

    def partition(*a, **kw):
        shims[:] = [CountingShard(s) for s in real_partition(*a, **kw)]
        return shims

    def local_train(client, *a, **kw):
        before = [s.reads for s in shims]
        out = real_train(client, *a, **kw)
        after = [s.reads for s in shims]
        for k, (x, y) in enumerate(zip(before, after)):
            if k == client.id:
                assert y > x
            else:
                assert y == x, f"client {client.id} touched shard {k}"
        return out

    monkeypatch.setattr(fedsim, "partition", partition)
    monkeypatch.setattr(fedsim, "local_train", local_train)
    run_federation(cfg(method="fed-sb", clients=3, rounds=2, samples=30))
    assert len(shims) == 3


@pytest.mark.parametrize("method", ["fedit", "fedex", "flora", "ffa", "fed-sb"])
def test_measured_counts_match_prediction(method):
    run = run_federation(cfg(method=method, clients=3, rounds=2, samples=30))
    run.ledger.reconcile(run.predicted)
    r = 2
    if method == "fed-sb":
        assert all(rep.upload == (r * r,) * 3 for rep in run.reports)
        assert run.ledger.setup() == (6 + 8) * r


def test_fedex_download_capped():
    run = run_federation(cfg(method="fedex", clients=20, rounds=1, samples=60))
    assert run.reports[0].download == 6 * 8
    # one client: stacked factors (28) are cheaper than the dense 6 x 8 update
    small = run_federation(cfg(method="fedex", clients=1, rounds=1, samples=60))
    assert small.reports[0].download == (6 + 8) * 2


def test_hetero_run():
    run = run_federation(cfg(method="fed-sb", rank=3, ranks=(1, 3, 2), clients=3, rounds=3, samples=60))
    assert run.reports[0].upload == (1, 9, 4)
    assert all(r.download == 9 and r.divergence < 1e-12 for r in run.reports)


def test_mlp_and_per_source_runs():
    run = run_federation(cfg(method="fed-sb", kind="mlp", rounds=3, partition="per-source", sources=5))
    assert len(run.reports) == 3 and np.isfinite(run.reports[-1].global_loss)
    run = run_federation(cfg(method="fed-sb", kind="mlp", rounds=2, init_source="clients"))
    assert run.ledger.setup() > 0


def test_private_run_accounting():
    c = cfg(method="fed-sb", rounds=3, clip=1.0, epsilon=2.0)
    run = run_federation(c)
    assert run.privacy.noise_multiplier > 0
    assert run.reports[-1].epsilon <= 2.0
    eps = [r.epsilon for r in run.reports]
    assert all(a < b for a, b in zip(eps, eps[1:]))
    assert all(a.steps == run.privacy.steps for a in run.accountants)


@pytest.mark.parametrize("bad", [
    dict(rank=0), dict(rank=7), dict(method="sgd"), dict(clients=0), dict(rounds=-1),
    dict(ranks=(1, 2)), dict(method="fedit", ranks=(1,) * 5), dict(sigma=1.0), dict(clip=1.0),
    dict(clip=1.0, sigma=1.0, epsilon=1.0), dict(partition="per-source", sources=2),
    dict(sources=3), dict(samples=3), dict(isotropic=True, samples=5), dict(kind="cnn"),
    dict(r_init="random"), dict(lr=-1.0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        FederationConfig(**bad).validate()
