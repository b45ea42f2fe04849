"""Small teacher-student models with per-sample gradients.

Two architectures stand in for the frozen pre-trained network:

* ``linear``: y = (W0 + dW) x, a single adapted site ``W``.
* ``mlp``: y = W2 tanh(W1 x), adapted sites ``W1`` and ``W2``.

Every function evaluates the model at ``W0 + dW`` per site.  ``updates`` may be
``None`` (all zero) or a mapping missing some sites (those are zero).
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from fedsb.linalg import ShapeError, seed_sequence

Weights = Dict[str, np.ndarray]

LOSSES = ("squared", "xent")
KINDS = ("linear", "mlp")


@dataclass(frozen=True)
class Site:
    name: str
    m: int  # out dim
    n: int  # in dim

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"site {self.name!r} needs positive dims, got {self.m}x{self.n}")


@dataclass(frozen=True)
class ArchShape:
    kind: str
    sites: Tuple[Site, ...]
    loss: str = "squared"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        names = [s.name for s in self.sites]
        if len(set(names)) != len(names):
            raise ValueError("site names must be unique")
        if self.kind == "linear" and len(self.sites) != 1:
            raise ValueError("linear model has exactly one site")
        if self.kind == "mlp":
            if len(self.sites) != 2 or self.sites[1].n != self.sites[0].m:
                raise ValueError("mlp needs two chained sites (hidden x in, out x hidden)")

    @classmethod
    def linear(cls, n_in: int, n_out: int, loss: str = "squared") -> "ArchShape":
        return cls("linear", (Site("W", n_out, n_in),), loss)

    @classmethod
    def mlp(cls, n_in: int, hidden: int, n_out: int, loss: str = "squared") -> "ArchShape":
        return cls("mlp", (Site("W1", hidden, n_in), Site("W2", n_out, hidden)), loss)

    @property
    def n_in(self) -> int:
        return self.sites[0].n

    @property
    def n_out(self) -> int:
        return self.sites[-1].m

    def site(self, name: str) -> Site:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # batch x n_in
    targets: np.ndarray  # batch x n_out
    sources: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError("inputs and targets have different row counts")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("batch contains non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        src = None if self.sources is None else self.sources[idx]
        return Batch(self.inputs[idx], self.targets[idx], src)

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        srcs = [b.sources for b in batches]
        sources = None if any(s is None for s in srcs) else np.concatenate(srcs)
        return Batch(np.vstack([b.inputs for b in batches]),
                     np.vstack([b.targets for b in batches]), sources)


def _effective(shape: ArchShape, weights: Mapping[str, np.ndarray],
               updates: Optional[Mapping[str, np.ndarray]]) -> Weights:
    out = {}
    for s in shape.sites:
        w = np.asarray(weights[s.name], dtype=np.float64)
        if w.shape != (s.m, s.n):
            raise ShapeError(f"weight {s.name} has shape {w.shape}, expected {(s.m, s.n)}")
        if updates is not None and s.name in updates:
            d = np.asarray(updates[s.name], dtype=np.float64)
            if d.shape != w.shape:
                raise ShapeError(f"update {s.name} has shape {d.shape}, expected {w.shape}")
            w = w + d
        out[s.name] = w
    return out


def _check_batch(shape: ArchShape, batch: Batch):
    if batch.inputs.shape[1] != shape.n_in:
        raise ShapeError(f"inputs have {batch.inputs.shape[1]} columns, model expects {shape.n_in}")
    if batch.targets.shape[1] != shape.n_out:
        raise ShapeError(f"targets have {batch.targets.shape[1]} columns, model expects {shape.n_out}")


def _log_softmax(y):
    z = y - y.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(shape, w, x):
    if shape.kind == "linear":
        return x @ w["W"].T, None
    h = np.tanh(x @ w["W1"].T)
    return h @ w["W2"].T, h


def predict(shape: ArchShape, weights, updates, inputs) -> np.ndarray:
    w = _effective(shape, weights, updates)
    return _forward(shape, w, np.asarray(inputs, dtype=np.float64))[0]


def per_sample_losses(shape: ArchShape, weights, updates, batch: Batch) -> np.ndarray:
    _check_batch(shape, batch)
    w = _effective(shape, weights, updates)
    y, _ = _forward(shape, w, batch.inputs)
    if shape.loss == "squared":
        return np.sum((y - batch.targets) ** 2, axis=1)
    return -np.sum(batch.targets * _log_softmax(y), axis=1)


def forward_loss(shape: ArchShape, weights, updates, batch: Batch) -> float:
    """Mean loss over the batch at W0 + dW."""
    return float(np.mean(per_sample_losses(shape, weights, updates, batch)))


def _output_grads(shape, y, targets):
    if shape.loss == "squared":
        return 2.0 * (y - targets)
    return np.exp(_log_softmax(y)) - targets


def per_sample_gradients(shape: ArchShape, weights, updates, batch: Batch) -> Weights:
    """Per-example d(loss)/dW for each site, stacked as (batch, m, n) arrays."""
    _check_batch(shape, batch)
    w = _effective(shape, weights, updates)
    x = batch.inputs
    y, h = _forward(shape, w, x)
    dy = _output_grads(shape, y, batch.targets)
    if shape.kind == "linear":
        return {"W": np.einsum("bi,bj->bij", dy, x)}
    dz = (dy @ w["W2"]) * (1.0 - h * h)
    return {"W1": np.einsum("bi,bj->bij", dz, x), "W2": np.einsum("bi,bj->bij", dy, h)}


def batch_gradient(shape: ArchShape, weights, updates, batch: Batch) -> Weights:
    """Gradient of the mean loss; equals the mean of :func:`per_sample_gradients`."""
    _check_batch(shape, batch)
    w = _effective(shape, weights, updates)
    x = batch.inputs
    b = x.shape[0]
    y, h = _forward(shape, w, x)
    dy = _output_grads(shape, y, batch.targets)
    if shape.kind == "linear":
        return {"W": dy.T @ x / b}
    dz = (dy @ w["W2"]) * (1.0 - h * h)
    return {"W1": dz.T @ x / b, "W2": dy.T @ h / b}


# --------------------------------------------------------------------------
# synthetic teacher tasks


def _random_update(rng, m, n, scale, rank):
    if scale == 0:
        return np.zeros((m, n))
    if rank is None:
        d = rng.standard_normal((m, n))
    else:
        if not 1 <= rank <= min(m, n):
            raise ValueError(f"delta_rank {rank} out of range for {m}x{n}")
        d = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    return d * (scale / np.linalg.norm(d))


@dataclass
class TeacherTask:
    """A frozen base model plus a hidden target update ``W0 + dW*``.

    ``input_mean`` shifts the input distribution (used for per-source data).
    With ``isotropic`` the sampled inputs are whitened so that X^T X / N = I
    exactly, which makes the first-step gradient of a noiseless linear task
    exactly proportional to ``dW*``.
    """

    shape: ArchShape
    weights: Weights
    target_update: Weights
    noise_std: float = 0.0
    isotropic: bool = False
    input_mean: Optional[np.ndarray] = None

    def sample(self, n_samples: int, rng_seed) -> Batch:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        rng = np.random.default_rng(rng_seed)
        d = self.shape.n_in
        if self.isotropic:
            if n_samples < d:
                raise ValueError("isotropic sampling needs n_samples >= n_in")
            q, r = np.linalg.qr(rng.standard_normal((n_samples, d)))
            x = q * np.sign(np.diag(r)) * np.sqrt(n_samples)
        else:
            x = rng.standard_normal((n_samples, d))
        if self.input_mean is not None:
            x = x + self.input_mean
        y = predict(self.shape, self.weights, self.target_update, x)
        if self.shape.loss == "xent":
            t = np.exp(_log_softmax(y))
        else:
            t = y + self.noise_std * rng.standard_normal(y.shape) if self.noise_std else y
        return Batch(x, t)


def make_teacher(shape: ArchShape, delta_scale: float, noise_std: float, rng_seed, *,
                 delta_rank: Optional[int] = None, isotropic: bool = False,
                 input_shift: float = 0.0) -> TeacherTask:
    rng = np.random.default_rng(rng_seed)
    weights = {s.name: rng.standard_normal((s.m, s.n)) / np.sqrt(s.n) for s in shape.sites}
    target = {s.name: _random_update(rng, s.m, s.n, delta_scale, delta_rank) for s in shape.sites}
    mean = input_shift * rng.standard_normal(shape.n_in) if input_shift else None
    return TeacherTask(shape, weights, target, noise_std, isotropic, mean)


class TaskData(NamedTuple):
    weights: Weights
    batch: Batch
    target_update: Weights


def make_teacher_task(shape: ArchShape, delta_scale: float, n_samples: int, noise_std: float,
                      rng_seed, *, delta_rank: Optional[int] = None,
                      isotropic: bool = False) -> TaskData:
    """Base weights W0 and a dataset drawn from the teacher at W0 + dW*.

    ``dW*`` has Frobenius norm ``delta_scale`` per site (rank ``delta_rank``
    when given).  Returned as ``(weights, batch, target_update)``.
    """
    ss = seed_sequence(rng_seed)
    teacher_seed, data_seed = ss.spawn(2)
    task = make_teacher(shape, delta_scale, noise_std, teacher_seed,
                        delta_rank=delta_rank, isotropic=isotropic)
    return TaskData(task.weights, task.sample(n_samples, data_seed), task.target_update)


def make_multisource_task(shape: ArchShape, n_sources: int, samples_per_source, delta_scale: float,
                          noise_std: float, rng_seed, *, input_shift: float = 2.0,
                          delta_rank: Optional[int] = None) -> TaskData:
    """Shared W0; each source has its own dW* direction and input mean.

    The returned batch carries integer source labels; ``target_update`` is the
    mean of the per-source targets.
    """
    if n_sources < 1:
        raise ValueError("n_sources must be >= 1")
    sizes = ([int(samples_per_source)] * n_sources if np.isscalar(samples_per_source)
             else [int(s) for s in samples_per_source])
    if len(sizes) != n_sources:
        raise ValueError("samples_per_source length must equal n_sources")
    ss = seed_sequence(rng_seed)
    base_seed, *source_seeds = ss.spawn(n_sources + 1)
    base = make_teacher(shape, 0.0, noise_std, base_seed)
    parts = []
    targets = []
    for k, (seed, size) in enumerate(zip(source_seeds, sizes)):
        t_seed, d_seed = seed.spawn(2)
        src = make_teacher(shape, delta_scale, noise_std, t_seed,
                           delta_rank=delta_rank, input_shift=input_shift)
        src.weights = base.weights
        b = src.sample(size, d_seed)
        parts.append(Batch(b.inputs, b.targets, np.full(size, k)))
        targets.append(src.target_update)
    mean_target = {s.name: np.mean([t[s.name] for t in targets], axis=0) for s in shape.sites}
    return TaskData(base.weights, Batch.concat(parts), mean_target)
