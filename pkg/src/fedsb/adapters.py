"""Adapter parameterizations and their initialization.

``LoraPair`` covers FedIT / FedEx-LoRA / FLoRA (B and A trainable) and
FFA-LoRA (``frozen_a=True``).  ``SbTriple`` is the B R A form where only the
r x r core ``R`` trains.
"""
import enum
import struct
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from fedsb import model as _model
from fedsb.linalg import ShapeError, as_matrix, truncated_svd

DEFAULT_ALPHA = 16.0


class AdapterMethod(str, enum.Enum):
    FEDIT = "fedit"
    FEDEX = "fedex"
    FLORA = "flora"
    FFA = "ffa"
    FEDSB = "fed-sb"

    @classmethod
    def parse(cls, name: str) -> "AdapterMethod":
        key = name.strip().lower().replace("_", "-")
        aliases = {
            "fedit": cls.FEDIT, "fed-it": cls.FEDIT,
            "fedex": cls.FEDEX, "fedex-lora": cls.FEDEX,
            "flora": cls.FLORA,
            "ffa": cls.FFA, "ffa-lora": cls.FFA,
            "fed-sb": cls.FEDSB, "fedsb": cls.FEDSB, "sb": cls.FEDSB,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown method {name!r}") from None

    @property
    def uses_sb(self) -> bool:
        return self is AdapterMethod.FEDSB


@dataclass(frozen=True)
class LoraPair:
    B: np.ndarray  # m x r
    A: np.ndarray  # r x n
    alpha: float = DEFAULT_ALPHA
    frozen_a: bool = False

    def __post_init__(self):
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"inconsistent LoRA shapes B{self.B.shape} A{self.A.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> Tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


@dataclass(frozen=True)
class SbTriple:
    B: np.ndarray  # m x r, frozen
    R: np.ndarray  # r x r, trainable
    A: np.ndarray  # r x n, frozen

    def __post_init__(self):
        r = self.R.shape[0]
        if self.R.shape != (r, r) or self.B.shape[1] != r or self.A.shape[0] != r:
            raise ShapeError(f"inconsistent SB shapes B{self.B.shape} R{self.R.shape} A{self.A.shape}")

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


Adapter = Union[LoraPair, SbTriple]


def effective_update(adapter: Adapter) -> np.ndarray:
    if isinstance(adapter, SbTriple):
        return adapter.B @ adapter.R @ adapter.A
    return adapter.scaling * (adapter.B @ adapter.A)


def trainable_names(adapter: Adapter) -> Tuple[str, ...]:
    if isinstance(adapter, SbTriple):
        return ("R",)
    return ("B",) if adapter.frozen_a else ("B", "A")


def trainable_params(adapter: Adapter) -> Dict[str, np.ndarray]:
    return {k: getattr(adapter, k) for k in trainable_names(adapter)}


def with_trainable(adapter: Adapter, params: Mapping[str, np.ndarray]) -> Adapter:
    """Copy of ``adapter`` with trainable parts replaced; frozen parts are shared."""
    unknown = set(params) - set(trainable_names(adapter))
    if unknown:
        raise KeyError(f"not trainable: {sorted(unknown)}")
    return replace(adapter, **params)


def trainable_gradient(adapter: Adapter, grad_w) -> Dict[str, np.ndarray]:
    """Chain rule from dL/d(dW) to the trainable parts.

    ``grad_w`` is m x n, or (batch, m, n) for per-sample gradients.
    """
    g = np.asarray(grad_w, dtype=np.float64)
    if g.shape[-2:] != adapter.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match adapter {adapter.shape}")
    if isinstance(adapter, SbTriple):
        return {"R": adapter.B.T @ g @ adapter.A.T}
    s = adapter.scaling
    out = {"B": s * (g @ adapter.A.T)}
    if not adapter.frozen_a:
        out["A"] = s * (adapter.B.T @ g)
    return out


def init_lora(site_shape: Tuple[int, int], r: int, alpha: float = DEFAULT_ALPHA, rng_seed=None,
              *, frozen_a: bool = False) -> LoraPair:
    """B = 0, A ~ N(0, 1/r)."""
    m, n = site_shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for a {m}x{n} site")
    rng = np.random.default_rng(rng_seed)
    a = rng.standard_normal((r, n)) / np.sqrt(r)
    return LoraPair(np.zeros((m, r)), a, float(alpha), frozen_a)


R_INIT_POLICIES = ("zero", "sigma-step")


def sb_from_update(update, r: int, r_init: str = "zero") -> SbTriple:
    """Frozen frames from the top-r singular vectors of an (estimated) update."""
    upd = as_matrix(update)
    if not 1 <= r <= min(upd.shape):
        raise ValueError(f"rank {r} out of range for a {upd.shape} site")
    if r_init not in R_INIT_POLICIES:
        raise ValueError(f"unknown R init policy {r_init!r}")
    svd = truncated_svd(upd, r)
    core = np.diag(svd.S) if r_init == "sigma-step" else np.zeros((r, r))
    return SbTriple(svd.U, core, np.ascontiguousarray(svd.V.T))


def estimate_first_step(shape: "_model.ArchShape", weights, init_batch: "_model.Batch",
                        lr: float) -> Dict[str, np.ndarray]:
    """-lr times the mean per-sample gradient at dW = 0, for every site."""
    if len(init_batch) == 0:
        raise ValueError("init batch is empty")
    grads = _model.per_sample_gradients(shape, weights, None, init_batch)
    return {name: -lr * g.mean(axis=0) for name, g in grads.items()}


def init_sb(shape: "_model.ArchShape", site: str, weights, init_batch: "_model.Batch", lr: float,
            r: int, r_init: str = "zero") -> SbTriple:
    """SB adapter for one site from a truncated SVD of the estimated first step."""
    s = shape.site(site)
    if not 1 <= r <= min(s.m, s.n):
        raise ValueError(f"rank {r} out of range for site {site} ({s.m}x{s.n})")
    step = estimate_first_step(shape, weights, init_batch, lr)[site]
    return sb_from_update(step, r, r_init)


def init_sb_all(shape, weights, init_batch, lr: float, r: int, r_init: str = "zero") -> Dict[str, SbTriple]:
    steps = estimate_first_step(shape, weights, init_batch, lr)
    return {name: sb_from_update(step, r, r_init) for name, step in steps.items()}


# --------------------------------------------------------------------------
# flat binary layout
#
#   magic  b"FSBA"        4 bytes
#   version               uint16
#   method tag            uint8   (index into METHOD_TAGS)
#   block count           uint8
#   per block: rows, cols uint32, uint32
#   payload               row-major little-endian float64, blocks in order

MAGIC = b"FSBA"
LAYOUT_VERSION = 1
METHOD_TAGS: Tuple[str, ...] = ("fedit", "fedex", "flora", "ffa", "fed-sb", "dense")
_HEAD = struct.Struct("<4sHBB")
_DIM = struct.Struct("<II")


def pack_blocks(method: str, blocks: Sequence[np.ndarray]) -> bytes:
    tag = METHOD_TAGS.index(method)
    if len(blocks) > 255:
        raise ValueError("too many blocks")
    head = [_HEAD.pack(MAGIC, LAYOUT_VERSION, tag, len(blocks))]
    body = []
    for b in blocks:
        b = as_matrix(b)
        head.append(_DIM.pack(*b.shape))
        body.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(head + body)


def unpack_blocks(payload: bytes) -> Tuple[str, List[np.ndarray]]:
    magic, version, tag, count = _HEAD.unpack_from(payload, 0)
    if magic != MAGIC or version != LAYOUT_VERSION:
        raise ValueError("not an adapter payload")
    off = _HEAD.size
    dims = []
    for _ in range(count):
        dims.append(_DIM.unpack_from(payload, off))
        off += _DIM.size
    blocks = []
    for rows, cols in dims:
        nbytes = rows * cols * 8
        blocks.append(np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off)
                      .reshape(rows, cols).astype(np.float64))
        off += nbytes
    if off != len(payload):
        raise ValueError("trailing bytes in adapter payload")
    return METHOD_TAGS[tag], blocks


def payload_param_count(payload: bytes) -> int:
    """Number of float64 parameters carried by a packed payload."""
    _, _, _, count = _HEAD.unpack_from(payload, 0)
    return (len(payload) - _HEAD.size - count * _DIM.size) // 8


def pack_trainable(method: str, adapter: Adapter) -> bytes:
    return pack_blocks(method, list(trainable_params(adapter).values()))


def pack_adapter(method: str, adapter: Adapter) -> bytes:
    """Every block of the adapter (checkpoint form)."""
    if isinstance(adapter, SbTriple):
        return pack_blocks(method, [adapter.B, adapter.R, adapter.A])
    return pack_blocks(method, [adapter.B, adapter.A])
