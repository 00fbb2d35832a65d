"""Command-line entry points for runs, sweeps, trace replay, and reports."""

from __future__ import annotations

import argparse
import math
import sys

import yaml

from .pipeline import RunConfig

CONFIG_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    for k in ("pair_budget_bytes", "max_comm_range"):
        if raw.get(k) in ("inf", None) and k in raw:
            raw[k] = math.inf
    return raw


def _base_config(args) -> RunConfig:
    raw = _load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "scenario", None):
        raw["scenario"] = args.scenario
    if getattr(args, "mode", None):
        raw["mode"] = args.mode
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    return RunConfig(**raw)


def _cmd_run(args) -> int:
    from . import pipeline
    cfg = _base_config(args)
    report = pipeline.run(cfg)
    yaml.safe_dump(report.to_dict(), sys.stdout, sort_keys=False)
    return 0


def _cmd_sweep_k(args) -> int:
    from .report import sweep_collaborators
    cfg = _base_config(args)
    ks = [int(v) for v in args.k_values.split(",")]
    rows = sweep_collaborators(cfg, ks, args.out)
    yaml.safe_dump({"rows": rows}, sys.stdout, sort_keys=False)
    return 0


def _cmd_sweep_budget(args) -> int:
    from .report import sweep_budget
    cfg = _base_config(args)
    budgets = [int(v) for v in args.budgets.split(",")]
    rows = sweep_budget(cfg, budgets, args.out)
    yaml.safe_dump({"rows": rows}, sys.stdout, sort_keys=False)
    return 0


def _cmd_replay(args) -> int:
    from .report import replay
    out = replay(args.trace, args.out)
    yaml.safe_dump(out, sys.stdout, sort_keys=False)
    return 0


def _cmd_report(args) -> int:
    from .report import render_report
    written = render_report(args.dir)
    if not written:
        print("no renderable artifacts found", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coopsim",
        description="Cooperative multi-vehicle SLAM and tracking simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one simulation run")
    run.add_argument("--config", help="YAML run configuration")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--scenario", help="builtin:<name> or a scenario YAML")
    run.add_argument("--mode", choices=("single_vehicle", "coop_slam_only",
                                        "coop_perception_only", "full",
                                        "full_broadcast"))
    run.add_argument("--out", help="directory for run artifacts")
    run.set_defaults(func=_cmd_run)

    sk = sub.add_parser("sweep-k", help="sweep the collaborator count")
    sk.add_argument("--config", help="YAML run configuration")
    sk.add_argument("--seed", type=int)
    sk.add_argument("--scenario")
    sk.add_argument("--k-values", default="0,1,2,3",
                    help="comma-separated collaborator counts")
    sk.add_argument("--out", required=True)
    sk.set_defaults(func=_cmd_sweep_k)

    sb = sub.add_parser("sweep-budget", help="sweep the critical-cell budget")
    sb.add_argument("--config", help="YAML run configuration")
    sb.add_argument("--seed", type=int)
    sb.add_argument("--scenario")
    sb.add_argument("--budgets", default="4,16,64,144",
                    help="comma-separated cell budgets")
    sb.add_argument("--out", required=True)
    sb.set_defaults(func=_cmd_sweep_budget)

    rp = sub.add_parser("replay", help="recompute estimates from a trace file")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=_cmd_replay)

    rep = sub.add_parser("report", help="render figures for a run directory")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
