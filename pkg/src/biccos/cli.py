"""Command line: ``verify`` one instance, run a ``suite`` manifest, or ``gen`` random instances.

Exit codes of ``verify``: 0 verified, 1 unknown, 2 counterexample found,
64 bad flags, 65 unreadable instance, 70 internal error.
"""
from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from .bab import FALSIFIED, MODES, UNKNOWN, UNSAT, BabConfig, bab_verify
from .model import DimensionMismatchError, InstanceError, canonicalize, load_instance
from .propagation import OptimizerConfig

EXIT_CODES = {UNSAT: 0, UNKNOWN: 1, FALSIFIED: 2}
EXIT_USAGE, EXIT_DATA, EXIT_SOFTWARE = 64, 65, 70

_num = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["network", "spec", "mode", "resolved_mode", "status", "bound", "time_s",
                 "domains_visited", "cuts_generated", "witness", "stats", "config"],
    "properties": {
        "network": {"type": "string"},
        "spec": {"type": "string"},
        "mode": {"enum": list(MODES)},
        "resolved_mode": {"enum": ["plain", "biccos-base", "biccos-mts"]},
        "status": {"enum": [UNSAT, UNKNOWN, FALSIFIED]},
        "bound": _num,
        "time_s": {"type": "number", "minimum": 0},
        "domains_visited": {"type": "integer", "minimum": 0},
        "cuts_generated": {"type": "integer", "minimum": 0},
        "witness": {"type": ["array", "null"], "items": {"type": "number"}},
        "witness_value": _num,
        "stats": {"type": "object"},
        "config": {"type": "object"},
        "cut_pool": {"type": ["array", "null"]},
    },
}
SUITE_SCHEMA = {
    "type": "object",
    "required": ["rows", "aggregates", "comparison"],
    "properties": {
        "rows": {"type": "array", "items": {
            "type": "object",
            "required": ["instance", "mode", "status", "bound", "time_s", "domains_visited", "cuts_generated"],
            "properties": {
                "instance": {"type": "string"},
                "mode": {"type": "string"},
                "status": {"enum": [UNSAT, UNKNOWN, FALSIFIED, "error"]},
                "bound": _num,
                "time_s": {"type": "number", "minimum": 0},
                "domains_visited": {"type": "integer", "minimum": 0},
                "cuts_generated": {"type": "integer", "minimum": 0},
                "error": {"type": ["string", "null"]},
            }}},
        "aggregates": {"type": "object", "additionalProperties": {
            "type": "object",
            "required": ["count", "verified_count", "mean_time", "median_domains"],
            "properties": {"count": {"type": "integer"}, "verified_count": {"type": "integer"},
                           "mean_time": _num, "median_domains": _num}}},
        "comparison": {"type": "array"},
    },
}
TIME_FIELDS = ("time_s", "wall_time", "mean_time")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _clean(value):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def _add_run_flags(p):
    p.add_argument("--mode", choices=MODES, default="biccos-base")
    p.add_argument("--timeout", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--drop-percentage", type=float, default=0.5)
    p.add_argument("--presolve-iters", type=int, default=5)
    p.add_argument("--presolve-pick", type=int, default=50)
    p.add_argument("--presolve-gen", type=int, default=400)
    p.add_argument("--opt-iters", type=int, default=20)
    p.add_argument("--lr-alpha", type=float, default=0.1)
    p.add_argument("--lr-beta", type=float, default=0.02)
    p.add_argument("--lr-decay", type=float, default=0.98)
    p.add_argument("--pool-cap", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--auto-threshold", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biccos", description="Complete verification of ReLU networks with inferred cuts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    v = sub.add_parser("verify", help="verify one instance")
    v.add_argument("--network", required=True)
    v.add_argument("--spec", required=True)
    v.add_argument("--report", help="write the JSON report here instead of stdout")
    v.add_argument("--stats-stream", help="append one JSON line per batch")
    v.add_argument("--dump-cuts", action="store_true", help="include the final cut pool in the report")
    _add_run_flags(v)
    s = sub.add_parser("suite", help="run every (instance, mode) pair of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--modes", help="comma-separated modes, overriding the manifest")
    s.add_argument("--report")
    _add_run_flags(s)
    g = sub.add_parser("gen", help="generate calibrated random instances")
    g.add_argument("--seed", type=int, default=11)
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--shape", default="3-16-16-1")
    g.add_argument("--out", required=True)
    g.add_argument("--max-unstable", type=int, default=12)
    g.add_argument("--margin-min", type=float, default=1e-3)
    g.add_argument("--margin-max", type=float, default=0.05)
    return parser


def config_from_args(args, stats_callback=None) -> BabConfig:
    try:
        opt = OptimizerConfig(iterations=args.opt_iters, lr_alpha=args.lr_alpha, lr_beta=args.lr_beta,
                              decay=args.lr_decay)
        if opt.iterations < 0 or opt.lr_alpha <= 0 or opt.lr_beta <= 0 or not 0 < opt.decay <= 1:
            raise ValueError("optimizer flags out of range")
        return BabConfig(mode=args.mode, timeout=args.timeout, batch_size=args.batch_size,
                         drop_percentage=args.drop_percentage, presolve_iters=args.presolve_iters,
                         presolve_pick=args.presolve_pick, presolve_gen=args.presolve_gen, optimizer=opt,
                         pool_cap=args.pool_cap, seed=args.seed, workers=args.workers,
                         auto_threshold=args.auto_threshold, stats_callback=stats_callback)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _config_dict(cfg: BabConfig) -> dict:
    out = {k: v for k, v in cfg.__dict__.items() if k not in ("optimizer", "stats_callback")}
    out["optimizer"] = dict(cfg.optimizer.__dict__)
    return out


def verify_instance(network_file, spec_file, cfg: BabConfig, dump_cuts: bool = False) -> dict:
    network, spec, prop = load_instance(network_file, spec_file)
    result = bab_verify(canonicalize(network, prop), spec, cfg)
    rep, st = result.report, result.stats
    report = {
        "network": str(network_file), "spec": str(spec_file), "mode": cfg.mode, "resolved_mode": st.mode,
        "status": rep.status, "bound": rep.bound, "time_s": st.wall_time,
        "domains_visited": st.domains_visited, "cuts_generated": st.cuts_generated,
        "witness": rep.witness, "witness_value": rep.witness_value,
        "stats": st.to_dict(), "config": _config_dict(cfg),
    }
    if dump_cuts:
        report["cut_pool"] = [c.to_dict() for c in result.pool] if result.pool is not None else None
    return _clean(report)


def run_verify(args) -> int:
    stream = open(args.stats_stream, "a") if args.stats_stream else None

    def emit(record):
        stream.write(json.dumps(_clean(record)) + "\n")
        stream.flush()

    try:
        cfg = config_from_args(args, emit if stream else None)
        report = verify_instance(args.network, args.spec, cfg, args.dump_cuts)
    finally:
        if stream:
            stream.close()
    text = json.dumps(report, indent=1)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    return EXIT_CODES[report["status"]]


def aggregate(rows: list, modes: list) -> dict:
    out = {}
    for mode in modes:
        mine = [r for r in rows if r["mode"] == mode]
        times = [r["time_s"] for r in mine]
        doms = [r["domains_visited"] for r in mine]
        out[mode] = {"count": len(mine), "verified_count": sum(r["status"] == UNSAT for r in mine),
                     "mean_time": statistics.fmean(times) if times else None,
                     "median_domains": float(statistics.median(doms)) if doms else None}
    return out


def compare(rows: list, modes: list) -> list:
    table = {}
    for r in rows:
        entry = table.setdefault(r["instance"], {"instance": r["instance"]})
        entry[r["mode"]] = {"status": r["status"], "domains_visited": r["domains_visited"],
                            "cuts_generated": r["cuts_generated"]}
    return list(table.values())


def run_suite_manifest(manifest_path, modes: list | None, base_args) -> dict:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InstanceError(f"manifest {manifest_path}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("instances", []), list):
        raise InstanceError(f"manifest {manifest_path}: expected an object with an 'instances' list")
    modes = modes or doc.get("modes") or ["plain", "biccos-base"]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
    root = manifest_path.parent
    rows = []
    for item in doc.get("instances", []):
        name = item.get("name") or item.get("network", "?")
        for mode in modes:
            args = argparse.Namespace(**{**vars(base_args), "mode": mode})
            cfg = config_from_args(args)
            try:
                rep = verify_instance(root / item["network"], root / item["spec"], cfg)
                rows.append({"instance": name, "mode": mode, "status": rep["status"], "bound": rep["bound"],
                             "time_s": rep["time_s"], "domains_visited": rep["domains_visited"],
                             "cuts_generated": rep["cuts_generated"], "error": None})
            except (InstanceError, DimensionMismatchError, KeyError, ValueError) as exc:
                rows.append({"instance": name, "mode": mode, "status": "error", "bound": None, "time_s": 0.0,
                             "domains_visited": 0, "cuts_generated": 0, "error": str(exc)})
    return _clean({"rows": rows, "aggregates": aggregate(rows, modes), "comparison": compare(rows, modes)})


def run_suite(args) -> int:
    modes = args.modes.split(",") if args.modes else None
    report = run_suite_manifest(args.manifest, modes, args)
    text = json.dumps(report, indent=1)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    return 0


def run_gen(args) -> int:
    from .generate import gen_instances
    if args.count < 0 or not 0 < args.margin_min <= args.margin_max:
        raise UsageError("count must be nonnegative and 0 < margin-min <= margin-max")
    gen_instances(args.seed, args.count, args.shape, args.out, args.max_unstable,
                  (args.margin_min, args.margin_max))
    print(json.dumps({"out": args.out, "count": args.count}))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"verify": run_verify, "suite": run_suite, "gen": run_gen}[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        print(f"biccos: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InstanceError, DimensionMismatchError) as exc:
        print(f"biccos: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"biccos: internal error: {exc}", file=sys.stderr)
        return EXIT_SOFTWARE


if __name__ == "__main__":
    sys.exit(main())
