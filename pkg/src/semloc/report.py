"""Run artifacts: trajectory files, CSV tables, a text summary, figures.

Everything lands in one output directory:

    estimate.txt          every frame's emitted pose (trajectory format)
    estimate_tracked.txt  only frames with an optimized pose
    reference.txt         ground-truth trajectory
    states.csv            per-frame status / action / confidence / timing
    rpe.csv               per-pair relative errors
    summary.txt           aggregate table
    trajectory.png        top-down path overlay
    errors.png            per-pair error curves

The RPE block is computed over tracked frames only; frames emitted as
odometry backup are visible in states.csv and the full estimate file.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import NoAssociations
from .rpe import RpeReport, Trajectory, compute_rpe, save_trajectory


def write_states_csv(path, records) -> None:
    with open(path, "w") as fh:
        fh.write("frame_id,timestamp,status,action,confidence,dof_mode,track_ms\n")
        for r in records:
            fh.write(
                f"{r.frame_id},{r.timestamp:.9f},{r.status},{r.action},"
                f"{r.confidence:.6f},{r.dof_mode},{r.track_ms:.3f}\n"
            )


def write_rpe_csv(path, report: RpeReport) -> None:
    with open(path, "w") as fh:
        fh.write("time_a,time_b,err_3d,lateral,longitudinal,rotation_deg\n")
        for p in report.pairs:
            fh.write(
                f"{p.time_a:.9f},{p.time_b:.9f},{p.err_3d:.9f},"
                f"{p.lateral:.9f},{p.longitudinal:.9f},{p.rotation_deg:.9f}\n"
            )


def format_summary(report: RpeReport, extra_lines=()) -> str:
    lines = [
        f"pairs                {len(report.pairs)}",
        f"frame interval       {report.frame_interval}",
        f"max 3d trans (m)     {report.max_3d:.4f}",
        f"mean 3d trans (m)    {report.mean_3d:.4f}",
        f"median 3d trans (m)  {report.median_3d:.4f}",
        f"mean lateral (m)     {report.mean_lateral:.4f}",
        f"mean longitudinal (m) {report.mean_longitudinal:.4f}",
        f"mean rotation (deg)  {report.mean_rotation_deg:.4f}",
    ]
    lines.extend(extra_lines)
    return "\n".join(lines) + "\n"


def render_figures(out_dir, estimate: Trajectory, reference: Trajectory, report, records=None):
    """Write trajectory.png and errors.png; returns their paths."""
    out_dir = Path(out_dir)
    paths = []

    fig, ax = plt.subplots(figsize=(8, 6))
    if len(reference):
        ref_xy = np.array([p.translation[:2] for p in reference.poses])
        ax.plot(ref_xy[:, 0], ref_xy[:, 1], "-", color="0.6", lw=2, label="reference")
    if len(estimate):
        est_xy = np.array([p.translation[:2] for p in estimate.poses])
        ax.plot(est_xy[:, 0], est_xy[:, 1], "-", color="tab:blue", lw=1, label="estimate")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.set_title("top-down trajectory")
    fig.tight_layout()
    path = out_dir / "trajectory.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    if report is not None and report.pairs:
        t = np.array([p.time_a for p in report.pairs])
        axes[0].plot(t, [p.lateral for p in report.pairs], lw=0.8)
        axes[1].plot(t, [p.longitudinal for p in report.pairs], lw=0.8)
        axes[2].plot(t, [p.rotation_deg for p in report.pairs], lw=0.8)
    axes[0].set_ylabel("lateral (m)")
    axes[1].set_ylabel("longitudinal (m)")
    axes[2].set_ylabel("rotation (deg)")
    axes[2].set_xlabel("time (s)")
    axes[0].set_title(f"relative pose error, interval {report.frame_interval if report else '-'}")
    if records:
        tracked_t = [r.timestamp for r in records if not r.tracked]
        for ax in axes:
            for tt in tracked_t:
                ax.axvline(tt, color="tab:red", alpha=0.08, lw=0.8)
    fig.tight_layout()
    path = out_dir / "errors.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)
    return paths


def write_run_artifacts(out_dir, result, reference: Trajectory, cfg) -> dict:
    """Write the full artifact set; returns a name -> path dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    estimate = result.estimate()
    tracked = result.tracked_estimate()
    save_trajectory(out_dir / "estimate.txt", estimate)
    save_trajectory(out_dir / "estimate_tracked.txt", tracked)
    save_trajectory(out_dir / "reference.txt", reference)
    paths["estimate"] = out_dir / "estimate.txt"
    paths["estimate_tracked"] = out_dir / "estimate_tracked.txt"
    paths["reference"] = out_dir / "reference.txt"

    write_states_csv(out_dir / "states.csv", result.records)
    paths["states"] = out_dir / "states.csv"

    report = None
    try:
        report = compute_rpe(tracked, reference, cfg.rpe_interval)
    except NoAssociations:
        pass
    if report is not None:
        write_rpe_csv(out_dir / "rpe.csv", report)
        paths["rpe"] = out_dir / "rpe.csv"
        track_ms = np.array([r.track_ms for r in result.records])
        n_tracked = sum(1 for r in result.records if r.tracked)
        extra = (
            f"frames               {len(result.records)}",
            f"tracked frames       {n_tracked}",
            f"mean track time (ms) {track_ms.mean():.2f}",
            f"p95 track time (ms)  {np.percentile(track_ms, 95):.2f}",
        )
        (out_dir / "summary.txt").write_text(format_summary(report, extra))
        paths["summary"] = out_dir / "summary.txt"
    for p in render_figures(out_dir, estimate, reference, report, result.records):
        paths[p.stem] = p
    return paths
