"""Command line: ``fedsb run | sweep | cost | verify``.

Output schema (``SCHEMA_VERSION`` is the first column of every CSV):

rounds.csv
    schema_version, round, global_loss, divergence, upload_total, upload_max,
    download, epsilon, client_losses (``;``-separated)
summary.json
    config, initial and final loss, divergence stats, epsilon, comm totals
accountant.json
    per-client RDP ledgers (``{"private": false}`` for non-private runs)
costs.csv
    schema_version, round, direction, client, measured, predicted
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from fedsb import commcost
from fedsb import config as cfgio
from fedsb.adapters import AdapterMethod
from fedsb.fedsim import ConfigError, FederationConfig, FederationRun, run_federation

SCHEMA_VERSION = 1
ROUND_FIELDS = ("schema_version", "round", "global_loss", "divergence", "upload_total",
                "upload_max", "download", "epsilon", "client_losses")
COST_FIELDS = ("schema_version", "arch", "method", "rank", "clients", "upload_per_client",
               "download", "reported", "comm_millions")


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def rounds_csv(run: FederationRun, method_column: bool = False) -> str:
    rows = []
    for rep in run.reports:
        row = [SCHEMA_VERSION, rep.round, _num(rep.global_loss), _num(rep.divergence),
               sum(rep.upload), max(rep.upload), rep.download, _num(rep.epsilon),
               ";".join(_num(x) for x in rep.client_losses)]
        rows.append(([run.config.method] if method_column else []) + row)
    header = (("method",) if method_column else ()) + ROUND_FIELDS
    return _csv(rows, header)


def summary(run: FederationRun) -> dict:
    divs = [r.divergence for r in run.reports]
    return {
        "schema_version": SCHEMA_VERSION,
        "config": run.config.as_dict(),
        "rounds": len(run.reports),
        "initial_loss": run.initial_loss,
        "final_loss": run.reports[-1].global_loss if run.reports else run.initial_loss,
        "divergence_max": max(divs) if divs else 0.0,
        "divergence_mean": sum(divs) / len(divs) if divs else 0.0,
        "noise_multiplier": None if run.privacy is None else run.privacy.noise_multiplier,
        "epsilon": run.epsilon,
        "comm": {
            "setup": run.ledger.setup(),
            "upload_total": sum(sum(r.upload) for r in run.reports),
            "download_total": sum(r.download for r in run.reports),
            "predicted_upload_per_client": list(run.predicted.upload_per_client),
            "predicted_download": run.predicted.download,
        },
    }


def accountant_json(run: FederationRun) -> dict:
    if run.privacy is None:
        return {"schema_version": SCHEMA_VERSION, "private": False}
    return {"schema_version": SCHEMA_VERSION, "private": True,
            "noise_multiplier": run.privacy.noise_multiplier,
            "clip_norm": run.privacy.clip_norm,
            "sample_rate": run.privacy.sample_rate,
            "epsilon": run.epsilon,
            "clients": [a.state() for a in run.accountants]}


def ledger_csv(run: FederationRun) -> str:
    rows = []
    pred = run.predicted
    for e in run.ledger.entries:
        if e.direction == "up":
            p = pred.upload_per_client[e.client_id]
        elif e.direction == "down":
            p = pred.download
        else:
            p = ""
        rows.append([SCHEMA_VERSION, e.round, e.direction, "" if e.client_id is None else e.client_id,
                     e.params, p])
    return _csv(rows, ("schema_version", "round", "direction", "client", "measured", "predicted"))


def write_outputs(out_dir: Path, files: Dict[str, str]) -> None:
    """Write every file or none: stage into a temp dir, then rename into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out_dir, prefix=".staging-") as tmp:
        for name, text in files.items():
            with open(os.path.join(tmp, name), "w") as fh:
                fh.write(text)
        for name in files:
            os.replace(os.path.join(tmp, name), out_dir / name)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# config assembly


def build_config(args) -> FederationConfig:
    cfg = cfgio.load(args.config) if args.config else FederationConfig()
    over = {}
    for key in ("seed", "clients", "rank", "delta", "clip"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "sigma", None) is not None:
        over["sigma"], over["epsilon"] = args.sigma, None
    if getattr(args, "epsilon", None) is not None:
        over["epsilon"], over["sigma"] = args.epsilon, None
    return replace(cfg, **over).validate()


def cmd_run(args) -> int:
    cfg = build_config(args)
    run = run_federation(cfg)
    write_outputs(Path(args.out_dir), {
        "rounds.csv": rounds_csv(run),
        "summary.json": _dump_json(summary(run)),
        "accountant.json": _dump_json(accountant_json(run)),
        "costs.csv": ledger_csv(run),
        "config.ini": cfgio.dumps(cfg),
    })
    s = summary(run)
    print(f"{cfg.method}: {s['rounds']} rounds, final loss {s['final_loss']:.6g}, "
          f"max divergence {s['divergence_max']:.3g}"
          + ("" if run.epsilon is None else f", epsilon {run.epsilon:.4g}"))
    return 0


def cmd_sweep(args) -> int:
    base = build_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    configs = []
    for m in methods:
        try:
            AdapterMethod.parse(m)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        configs.append(replace(base, method=m).validate())
    runs = [run_federation(c) for c in configs]
    parts = [rounds_csv(r, method_column=True) for r in runs]
    body = parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:])
    write_outputs(Path(args.out_dir), {
        "sweep.csv": body,
        "summary.json": _dump_json({r.config.method: summary(r) for r in runs}),
    })
    for r in runs:
        s = summary(r)
        print(f"{r.config.method}: final loss {s['final_loss']:.6g}, max divergence {s['divergence_max']:.3g}")
    return 0


def cost_rows(arch: commcost.Arch, methods: Sequence[str], ranks: Sequence[int], clients: int,
              ffa_convention: str) -> List[list]:
    rows = []
    for m in methods:
        for r in ranks:
            b = commcost.cost_per_round(arch, m, r, clients, ffa_convention=ffa_convention)
            rows.append([SCHEMA_VERSION, arch.name, b.method.value, r, clients, b.upload_per_client[0],
                         b.download, b.reported, f"{b.reported_millions:.2f}"])
    return rows


def cmd_cost(args) -> int:
    try:
        arch = commcost.load_arch(args.arch)
    except (KeyError, ValueError) as e:
        raise ConfigError(str(e).strip("'\"")) from None
    methods = [m.value for m in AdapterMethod] if args.method == "all" else [args.method]
    try:
        ranks = [int(x) for x in str(args.rank).split(",")]
        text = _csv(cost_rows(arch, methods, ranks, args.clients, args.ffa_convention), COST_FIELDS)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    sys.stdout.write(text)
    if args.out_dir:
        write_outputs(Path(args.out_dir), {"costs.csv": text})
    return 0


def cmd_verify(args) -> int:
    from fedsb import verify

    names = args.check or None
    t0 = time.perf_counter()
    results = verify.run_checks(names, args.inject_fault or (), args.seed or 0)
    failed = 0
    for name, detail, secs in results:
        if detail is None:
            print(f"PASS {name} ({secs:.2f}s)")
        else:
            failed += 1
            print(f"FAIL {name}: {detail}")
    print(f"{len(results) - failed}/{len(results)} invariants hold ({time.perf_counter() - t0:.1f}s)")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# argument parsing


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--clients", type=int)
    p.add_argument("--method")
    p.add_argument("--rank", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--clip", type=float)
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--sigma", type=float, help="noise multiplier")
    noise.add_argument("--epsilon", type=float, help="target epsilon; sigma is calibrated")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsb", description="Federated low-rank fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one federated experiment")
    _experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the same experiment for several methods")
    _experiment_flags(p)
    p.add_argument("--methods", default="fedit,fedex,fed-sb")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="communicated parameters per round")
    p.add_argument("arch", help="built-in catalog name or catalog file")
    p.add_argument("method", help="method name or 'all'")
    p.add_argument("rank", help="rank, or comma-separated ranks")
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--ffa-convention", choices=commcost.FFA_CONVENTIONS, default="half")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--check", action="append", help="run only this check (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, commcost.CommMismatch, OSError) as e:
        print(f"fedsb {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
