"""Run artifacts: summary YAML, delimited tables, traces, and figures.

Sweeps over collaborator count and byte budget reuse the same writer so a
directory produced by any entry point renders with ``render_report``.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict

import numpy as np
import yaml

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .pipeline import Pipeline, RunConfig, RunReport  # noqa: E402
from .scenarios import resolve_scenario  # noqa: E402


def write_run_outputs(config: RunConfig, pipe: Pipeline, report: RunReport,
                      out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.yaml"), "w") as f:
        yaml.safe_dump({"config": _config_dict(config),
                        "report": report.to_dict()}, f, sort_keys=False)
    with open(os.path.join(out_dir, "ego_path.csv"), "w") as f:
        f.write("step,gt_x,gt_y,gt_yaw,est_x,est_y,est_yaw\n")
        for step, gt, est in pipe.ego_path:
            f.write(f"{step},{gt.x:.9f},{gt.y:.9f},{gt.yaw:.9f},"
                    f"{est.x:.9f},{est.y:.9f},{est.yaw:.9f}\n")
    with open(os.path.join(out_dir, "ledger.csv"), "w") as f:
        f.write(pipe.ledger.export_csv())
    with open(os.path.join(out_dir, "trace.txt"), "w") as f:
        f.write("\n".join(pipe.trace_lines) + "\n")


def _config_dict(config: RunConfig) -> dict:
    d = asdict(config)
    for k, v in d.items():
        if isinstance(v, float) and math.isinf(v):
            d[k] = "inf"
    return d


def sweep_collaborators(base: RunConfig, k_values, out_dir: str) -> list:
    """One run per collaborator count; k = 0 disables cooperation."""
    from . import pipeline as P

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k in k_values:
        cfg = RunConfig(**{**asdict(base), "out_dir": None})
        cfg.k_collaborators = max(int(k), 0)
        cfg.rank_only = True
        if k == 0:
            cfg.mode = "single_vehicle"
        report = P.run(cfg)
        rows.append({"k": int(k), "ego_rmse": report.ego_rmse,
                     "ego_mean": report.ego_mean,
                     "slam_bytes": report.slam_bytes,
                     "perception_bytes": report.perception_bytes,
                     "total_bytes": report.slam_bytes + report.perception_bytes,
                     "comm_vol": report.comm_vol_total})
    _write_rows(os.path.join(out_dir, "sweep_k.csv"), rows)
    with open(os.path.join(out_dir, "summary.yaml"), "w") as f:
        yaml.safe_dump({"sweep": "collaborators", "rows": rows}, f,
                       sort_keys=False)
    return rows


def sweep_budget(base: RunConfig, budgets_cells, out_dir: str) -> list:
    """One run per critical-area cell budget."""
    from . import pipeline as P

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for b in budgets_cells:
        cfg = RunConfig(**{**asdict(base), "out_dir": None})
        cfg.budget_cells = int(b)
        report = P.run(cfg)
        rows.append({"budget_cells": int(b),
                     "fused_recall": report.fused_recall,
                     "ap_03": report.ap.get(0.3),
                     "perception_bytes": report.perception_bytes,
                     "total_bytes": report.slam_bytes + report.perception_bytes,
                     "comm_vol": report.comm_vol_total})
    _write_rows(os.path.join(out_dir, "sweep_budget.csv"), rows)
    with open(os.path.join(out_dir, "summary.yaml"), "w") as f:
        yaml.safe_dump({"sweep": "budget", "rows": rows}, f, sort_keys=False)
    return rows


def _write_rows(path: str, rows: list):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join("" if r[k] is None else str(r[k])
                             for k in keys) + "\n")


def replay(trace_path: str, out_dir: str | None = None) -> dict:
    """Recompute single-vehicle dead reckoning from a recorded trace.

    Returns per-vehicle (MEAN, RMSE) of the replayed odometry chain
    against the recorded ground truth, plus detection counts.
    """
    from .geometry import Pose2, compose
    from .metrics import ego_accuracy
    from .worldsim import parse_trace_line

    records: dict = {}
    with open(trace_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            step, vid, gt, odom, dets = parse_trace_line(line)
            records.setdefault(vid, []).append((step, gt, odom, dets))

    out = {"vehicles": {}, "total_detections": 0}
    for vid in sorted(records):
        rows = sorted(records[vid])
        est, gts = {}, {}
        pose = None
        for step, gt, odom, dets in rows:
            pose = gt if pose is None else compose(pose, odom)
            est[step], gts[step] = pose, gt
            out["total_detections"] += len(dets)
        mean, rmse = ego_accuracy(est, gts)
        out["vehicles"][vid] = {"mean": mean, "rmse": rmse,
                                "steps": len(rows)}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "replay.yaml"), "w") as f:
            yaml.safe_dump(out, f, sort_keys=False)
    return out


# ---------------------------------------------------------------------------
# Rendering


def render_report(run_dir: str) -> list:
    """Render figures for a finished run directory; returns written paths."""
    written = []
    path_csv = os.path.join(run_dir, "ego_path.csv")
    if os.path.exists(path_csv):
        data = np.genfromtxt(path_csv, delimiter=",", names=True)
        fig, ax = plt.subplots(figsize=(6, 6))
        ax.plot(data["gt_x"], data["gt_y"], "k-", label="ground truth")
        ax.plot(data["est_x"], data["est_y"], "r--", label="estimate")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal")
        ax.legend()
        ax.set_title("ego trajectory")
        out = os.path.join(run_dir, "trajectory.png")
        fig.savefig(out, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(out)

        errs = np.hypot(data["est_x"] - data["gt_x"],
                        data["est_y"] - data["gt_y"])
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(data["step"], errs)
        ax.set_xlabel("step")
        ax.set_ylabel("position error [m]")
        ax.set_title("ego position error")
        out = os.path.join(run_dir, "ego_error.png")
        fig.savefig(out, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(out)

    ledger_csv = os.path.join(run_dir, "ledger.csv")
    if os.path.exists(ledger_csv):
        steps: dict = {}
        with open(ledger_csv) as f:
            next(f)
            for line in f:
                parts = line.strip().split(",")
                if len(parts) != 6:
                    continue
                step, nbytes, channel = int(parts[0]), int(parts[4]), parts[5]
                steps.setdefault(step, {"slam": 0, "perception": 0})
                steps[step][channel] += nbytes
        if steps:
            xs = sorted(steps)
            fig, ax = plt.subplots(figsize=(7, 3))
            ax.plot(xs, [steps[s]["slam"] for s in xs], label="slam")
            ax.plot(xs, [steps[s]["perception"] for s in xs],
                    label="perception")
            ax.set_xlabel("step")
            ax.set_ylabel("bytes")
            ax.legend()
            ax.set_title("transmitted bytes per step")
            out = os.path.join(run_dir, "comm_per_step.png")
            fig.savefig(out, dpi=120, bbox_inches="tight")
            plt.close(fig)
            written.append(out)

    for name, xkey, ykey, title in (
            ("sweep_k.csv", "k", "ego_rmse", "accuracy vs collaborators"),
            ("sweep_budget.csv", "budget_cells", "fused_recall",
             "recall vs cell budget")):
        csv = os.path.join(run_dir, name)
        if not os.path.exists(csv):
            continue
        data = np.genfromtxt(csv, delimiter=",", names=True)
        data = np.atleast_1d(data)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(data[xkey], data[ykey], "o-")
        ax.set_xlabel(xkey)
        ax.set_ylabel(ykey)
        ax.set_title(title)
        out = os.path.join(run_dir, name.replace(".csv", ".png"))
        fig.savefig(out, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(out)
    return written
