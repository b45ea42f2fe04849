import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsb import model
from fedsb.linalg import ShapeError
from fedsb.model import ArchShape, Batch


def fd_grad(shape, weights, updates, batch, site, h=1e-5):
    base = updates[site]
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        p, m = base.copy(), base.copy()
        p[idx] += h
        m[idx] -= h
        out[idx] = (model.forward_loss(shape, weights, {**updates, site: p}, batch)
                    - model.forward_loss(shape, weights, {**updates, site: m}, batch)) / (2 * h)
    return out


def scalar_mlp_loss(w1, w2, x, t):
    # independent scalar re-implementation of the squared-error tanh MLP
    total = 0.0
    for s in range(len(x)):
        h = [math.tanh(sum(w1[i][j] * x[s][j] for j in range(len(x[s])))) for i in range(len(w1))]
        y = [sum(w2[k][i] * h[i] for i in range(len(h))) for k in range(len(w2))]
        total += sum((y[k] - t[s][k]) ** 2 for k in range(len(y)))
    return total / len(x)


def test_noiseless_teacher_has_zero_loss():
    shape = ArchShape.linear(5, 3)
    data = model.make_teacher_task(shape, 0.0, 20, 0.0, 1)
    assert model.forward_loss(shape, data.weights, None, data.batch) == 0.0
    data = model.make_teacher_task(shape, 1.0, 20, 0.0, 1)
    assert model.forward_loss(shape, data.weights, data.target_update, data.batch) < 1e-28


def test_hand_computed_loss():
    shape = ArchShape.linear(1, 1)
    batch = Batch(np.array([[1.0]]), np.array([[2.0]]))
    assert model.forward_loss(shape, {"W": np.array([[0.25]])}, {"W": np.array([[0.75]])}, batch) == 1.0


def test_mlp_matches_scalar_oracle(rng):
    shape = ArchShape.mlp(4, 5, 2)
    w = {"W1": rng.standard_normal((5, 4)), "W2": rng.standard_normal((2, 5))}
    d = {"W1": 0.1 * rng.standard_normal((5, 4)), "W2": 0.1 * rng.standard_normal((2, 5))}
    batch = Batch(rng.standard_normal((3, 4)), rng.standard_normal((3, 2)))
    ref = scalar_mlp_loss((w["W1"] + d["W1"]).tolist(), (w["W2"] + d["W2"]).tolist(),
                          batch.inputs.tolist(), batch.targets.tolist())
    assert abs(model.forward_loss(shape, w, d, batch) - ref) < 1e-12


@pytest.mark.parametrize("kind", ["linear", "mlp"])
@pytest.mark.parametrize("loss", ["squared", "xent"])
def test_gradients_match_finite_differences(kind, loss, rng):
    shape = ArchShape.linear(3, 4, loss) if kind == "linear" else ArchShape.mlp(3, 4, 3, loss)
    data = model.make_teacher_task(shape, 0.7, 6, 0.1, 3)
    upd = {s.name: 0.1 * rng.standard_normal((s.m, s.n)) for s in shape.sites}
    grads = model.batch_gradient(shape, data.weights, upd, data.batch)
    for s in shape.sites:
        ref = fd_grad(shape, data.weights, upd, data.batch, s.name)
        assert np.max(np.abs(grads[s.name] - ref)) < 1e-6


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_per_sample_mean_equals_batch_gradient(kind, rng):
    shape = ArchShape.linear(5, 3) if kind == "linear" else ArchShape.mlp(5, 4, 3)
    data = model.make_teacher_task(shape, 1.0, 9, 0.2, 4)
    ps = model.per_sample_gradients(shape, data.weights, None, data.batch)
    full = model.batch_gradient(shape, data.weights, None, data.batch)
    singles = [model.batch_gradient(shape, data.weights, None, data.batch.subset([i])) for i in range(9)]
    for s in shape.sites:
        assert ps[s.name].shape == (9, s.m, s.n)
        assert np.max(np.abs(ps[s.name].mean(axis=0) - full[s.name])) < 1e-12
        assert np.max(np.abs(np.mean([g[s.name] for g in singles], axis=0) - full[s.name])) < 1e-12


def test_identical_samples_give_identical_gradients(rng):
    shape = ArchShape.mlp(3, 4, 2)
    x, t = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
    batch = Batch(np.repeat(x, 4, axis=0), np.repeat(t, 4, axis=0))
    w = {"W1": rng.standard_normal((4, 3)), "W2": rng.standard_normal((2, 4))}
    ps = model.per_sample_gradients(shape, w, None, batch)
    for g in ps.values():
        assert all(np.array_equal(g[0], g[i]) for i in range(4))


@given(st.integers(0, 2**31), st.sampled_from(["squared", "xent"]))
def test_loss_permutation_invariant(seed, loss):
    shape = ArchShape.mlp(3, 4, 2, loss)
    data = model.make_teacher_task(shape, 0.5, 7, 0.1, seed)
    perm = np.random.default_rng(seed).permutation(7)
    a = model.forward_loss(shape, data.weights, None, data.batch)
    b = model.forward_loss(shape, data.weights, None, data.batch.subset(perm))
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_teacher_task_deterministic():
    shape = ArchShape.linear(4, 3)
    a = model.make_teacher_task(shape, 1.0, 10, 0.1, 99)
    b = model.make_teacher_task(shape, 1.0, 10, 0.1, 99)
    assert a.batch.inputs.tobytes() == b.batch.inputs.tobytes()
    assert a.batch.targets.tobytes() == b.batch.targets.tobytes()
    assert np.linalg.norm(a.target_update["W"]) == pytest.approx(1.0)


def test_least_squares_recovers_target_update():
    shape = ArchShape.linear(6, 4)
    data = model.make_teacher_task(shape, 1.0, 10_000, 0.1, 5)
    x, y = data.batch.inputs, data.batch.targets
    w_hat = np.linalg.lstsq(x, y, rcond=None)[0].T
    assert np.linalg.norm(w_hat - data.weights["W"] - data.target_update["W"]) < 1e-2


def test_delta_rank_and_isotropy():
    shape = ArchShape.linear(8, 6)
    task = model.make_teacher(shape, 2.0, 0.0, 0, delta_rank=2, isotropic=True)
    s = np.linalg.svd(task.target_update["W"], compute_uv=False)
    assert s[2] < 1e-12
    b = task.sample(40, 1)
    np.testing.assert_allclose(b.inputs.T @ b.inputs / 40, np.eye(8), atol=1e-12)
    with pytest.raises(ValueError):
        task.sample(5, 1)


def test_multisource_task():
    shape = ArchShape.linear(5, 3)
    data = model.make_multisource_task(shape, 4, 10, 1.0, 0.0, 7)
    assert len(data.batch) == 40
    assert sorted(set(data.batch.sources.tolist())) == [0, 1, 2, 3]
    means = [data.batch.inputs[data.batch.sources == k].mean(axis=0) for k in range(4)]
    assert min(np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]) > 0.5


def test_shape_errors(rng):
    shape = ArchShape.linear(3, 2)
    w = {"W": np.zeros((2, 3))}
    with pytest.raises(ShapeError):
        model.forward_loss(shape, w, None, Batch(np.zeros((2, 4)), np.zeros((2, 2))))
    with pytest.raises(ShapeError):
        model.forward_loss(shape, w, {"W": np.zeros((3, 3))}, Batch(np.zeros((2, 3)), np.zeros((2, 2))))
    with pytest.raises(ShapeError):
        Batch(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Batch(np.array([[np.nan]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        ArchShape("mlp", (model.Site("a", 2, 3), model.Site("b", 2, 3)))
