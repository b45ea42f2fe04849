"""Communicated-parameter accounting per method and round.

``cost_per_round`` predicts counts in closed form from an architecture table;
``CommLedger`` records what a simulated run actually serialized, and
``CommLedger.reconcile`` checks the two agree exactly.

The reported "# Comm." figure is the per-client upload for
FedIT, FFA-LoRA and Fed-SB, and the exact-update download for FedEx-LoRA and
FLoRA, which is min(c (m + n) r, m n) per site.
"""
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from fedsb.adapters import AdapterMethod

FFA_CONVENTIONS = ("half", "b-only")


@dataclass(frozen=True)
class CatalogSite:
    name: str
    m: int
    n: int
    count: int = 1


@dataclass(frozen=True)
class Arch:
    name: str
    sites: Tuple[CatalogSite, ...]

    @property
    def n_sites(self) -> int:
        return sum(s.count for s in self.sites)

    @property
    def max_rank(self) -> int:
        return min(min(s.m, s.n) for s in self.sites)


def parse_catalog(text: str, name: str = "custom") -> Arch:
    sites = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"{name}:{lineno}: expected 'site m n [multiplicity]'")
        m, n = int(parts[1]), int(parts[2])
        count = int(parts[3]) if len(parts) == 4 else 1
        if m < 1 or n < 1 or count < 1:
            raise ValueError(f"{name}:{lineno}: dimensions must be >= 1")
        sites.append(CatalogSite(parts[0], m, n, count))
    if not sites:
        raise ValueError(f"{name}: catalog has no sites")
    return Arch(name, tuple(sites))


def builtin_archs() -> List[str]:
    pkg = resources.files("fedsb") / "catalogs"
    return sorted(p.name[:-4] for p in pkg.iterdir() if p.name.endswith(".txt"))


def load_arch(name_or_path: str) -> Arch:
    """A built-in catalog by name, or a catalog file by path."""
    pkg = resources.files("fedsb") / "catalogs" / f"{name_or_path}.txt"
    if pkg.is_file():
        return parse_catalog(pkg.read_text(), name_or_path)
    path = Path(name_or_path)
    if path.is_file():
        return parse_catalog(path.read_text(), path.stem)
    raise KeyError(f"unknown architecture {name_or_path!r}; built-ins: {', '.join(builtin_archs())}")


def arch_from_shape(shape, name: str = "sim") -> Arch:
    """Catalog for a simulator :class:`~fedsb.model.ArchShape`."""
    return Arch(name, tuple(CatalogSite(s.name, s.m, s.n, 1) for s in shape.sites))


def to_millions(count: int) -> Decimal:
    return (Decimal(count) / Decimal(1_000_000)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class CostBreakdown:
    arch: str
    method: AdapterMethod
    rank: int
    clients: int
    per_site_upload: Dict[str, int]  # per client, multiplicity included
    upload_per_client: Tuple[int, ...]
    download: int

    @property
    def total_upload(self) -> int:
        return sum(self.upload_per_client)

    @property
    def reported(self) -> int:
        if self.method in (AdapterMethod.FEDEX, AdapterMethod.FLORA):
            return self.download
        return max(self.upload_per_client)

    @property
    def reported_millions(self) -> Decimal:
        return to_millions(self.reported)


def _site_upload(method: AdapterMethod, s: CatalogSite, r: int, ffa_convention: str) -> int:
    if method is AdapterMethod.FEDSB:
        return r * r
    if method is AdapterMethod.FFA:
        if ffa_convention == "b-only":
            return s.m * r
        return (s.m + s.n) * r // 2
    return (s.m + s.n) * r


def _site_download(method: AdapterMethod, s: CatalogSite, r: int, c: int, ffa_convention: str) -> int:
    if method in (AdapterMethod.FEDEX, AdapterMethod.FLORA):
        return min(c * (s.m + s.n) * r, s.m * s.n)
    return _site_upload(method, s, r, ffa_convention)


def cost_per_round(arch: Arch, method, r: int, clients: int = 1, *,
                   ranks: Optional[Sequence[int]] = None,
                   ffa_convention: str = "half") -> CostBreakdown:
    """Exact per-round parameter counts.

    ``ranks`` gives per-client ranks for rank-heterogeneous Fed-SB (``r`` is
    then the global r_max).  ``ffa_convention='half'`` counts FFA-LoRA as half
    of FedIT's (m + n) r, the usual way it is reported;
    ``'b-only'`` counts the m x r matrix actually sent.
    """
    method = AdapterMethod.parse(method) if isinstance(method, str) else method
    if ffa_convention not in FFA_CONVENTIONS:
        raise ValueError(f"unknown FFA convention {ffa_convention!r}")
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if r < 1:
        raise ValueError("rank must be >= 1")
    for s in arch.sites:
        if r > min(s.m, s.n):
            raise ValueError(f"rank {r} too large for site {s.name} ({s.m}x{s.n})")
    if ranks is not None:
        if method is not AdapterMethod.FEDSB:
            raise ValueError("per-client ranks apply to Fed-SB only")
        if len(ranks) != clients or any(not 1 <= k <= r for k in ranks):
            raise ValueError("need one rank in [1, r] per client")
    per_site = {s.name: _site_upload(method, s, r, ffa_convention) * s.count for s in arch.sites}
    if ranks is None:
        uploads = (sum(per_site.values()),) * clients
    else:
        uploads = tuple(k * k * arch.n_sites for k in ranks)
    download = sum(_site_download(method, s, r, clients, ffa_convention) * s.count for s in arch.sites)
    return CostBreakdown(arch.name, method, r, clients, per_site, uploads, download)


# --------------------------------------------------------------------------
# measured counts


class CommMismatch(AssertionError):
    """Measured parameter counts differ from the closed-form prediction."""


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    method: str
    direction: str  # "up", "down" or "setup"
    client_id: Optional[int]
    params: int


@dataclass
class CommLedger:
    entries: List[LedgerEntry] = field(default_factory=list)

    def record(self, round_: int, method, direction: str, params: int,
               client_id: Optional[int] = None) -> LedgerEntry:
        if direction not in ("up", "down", "setup"):
            raise ValueError(f"bad direction {direction!r}")
        if params < 0:
            raise ValueError("parameter counts are non-negative")
        name = method.value if isinstance(method, AdapterMethod) else str(method)
        entry = LedgerEntry(round_, name, direction, client_id, int(params))
        self.entries.append(entry)
        return entry

    def rounds(self) -> List[int]:
        return sorted({e.round for e in self.entries if e.direction != "setup"})

    def upload(self, round_: int) -> Dict[int, int]:
        out: Dict[int, int] = {}
        for e in self.entries:
            if e.round == round_ and e.direction == "up":
                out[e.client_id] = out.get(e.client_id, 0) + e.params
        return out

    def download(self, round_: int) -> int:
        return sum(e.params for e in self.entries if e.round == round_ and e.direction == "down")

    def setup(self) -> int:
        return sum(e.params for e in self.entries if e.direction == "setup")

    def total(self) -> int:
        return sum(e.params for e in self.entries)

    def reconcile(self, predicted: CostBreakdown) -> None:
        """Raise :class:`CommMismatch` unless every round matches ``predicted`` exactly."""
        problems = []
        for rnd in self.rounds():
            up = self.upload(rnd)
            measured = tuple(up[k] for k in sorted(up))
            if measured != predicted.upload_per_client:
                problems.append(f"round {rnd}: upload {measured} != {predicted.upload_per_client}")
            down = self.download(rnd)
            if down != predicted.download:
                problems.append(f"round {rnd}: download {down} != {predicted.download}")
        if problems:
            raise CommMismatch("; ".join(problems))


def ledger_record(ledger: CommLedger, round_: int, method, direction: str, params: int,
                  client_id: Optional[int] = None) -> LedgerEntry:
    return ledger.record(round_, method, direction, params, client_id)
