"""
Report rendering for AHNET
Every number comes from the CSVs a run already wrote; nothing is recomputed.
"""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from core.evaluation import write_csv  # noqa: E402
from utils import EvaluationError, get_error_message, log_event  # noqa: E402

logger = logging.getLogger("ahnet.report")

LOSS_FILES = ("loss_stage1.csv", "loss_stage2.csv")
DETECTION_FILES = ("froc.csv",)
SEGMENTATION_FILES = ("dice.csv",)
OPTIONAL_FROC = {"ahnet": "froc.csv", "mcgcn": "froc_mcgcn.csv"}
PNG_METADATA = {"Software": None}


def required_artifacts(task):
    return LOSS_FILES + (DETECTION_FILES if task == "detection" else SEGMENTATION_FILES)


def check_artifacts(run_dir, task):
    run_dir = Path(run_dir)
    missing = [name for name in required_artifacts(task) if not (run_dir / name).is_file()]
    if missing:
        raise EvaluationError(get_error_message('missing_artifacts', names=", ".join(missing)))


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def plot_froc(run_dir, path):
    """Grid FROC per model; the full curve is drawn when froc_curve.csv exists."""
    run_dir = Path(run_dir)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, name in OPTIONAL_FROC.items():
        if (run_dir / name).is_file():
            frame = pd.read_csv(run_dir / name)
            ax.plot(frame["fp_per_volume"], frame["tpr"], marker="o", label=label)
    if (run_dir / "froc_curve.csv").is_file():
        curve = pd.read_csv(run_dir / "froc_curve.csv")
        ax.step(curve["fp_per_volume"], curve["tpr"], where="post", color="0.6", linewidth=0.8,
                label="ahnet (all thresholds)")
    ax.set_xlabel("False positives per volume")
    ax.set_ylabel("True positive rate")
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    _save(fig, path)


def plot_losses(run_dir, path):
    run_dir = Path(run_dir)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in LOSS_FILES:
        frame = pd.read_csv(run_dir / name)
        for stage, rows in frame.groupby("stage", sort=False):
            ax.plot(rows["step"], rows["base_loss"], linewidth=0.8, label=f"{stage} (base)")
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _save(fig, path)


def summary_frame(run_dir, task):
    """Long-format rows (model, metric, value)."""
    run_dir = Path(run_dir)
    rows = []
    if task == "detection":
        for model, name in OPTIONAL_FROC.items():
            if not (run_dir / name).is_file():
                continue
            for r in pd.read_csv(run_dir / name).itertuples(index=False):
                rows.append({"model": model, "metric": f"TPR@FP={r.fp_per_volume:.2f}", "value": r.tpr})
    else:
        frame = pd.read_csv(run_dir / "dice.csv", dtype={"volume_id": str})
        for key in ("DG", "DPC"):
            value = frame.loc[frame["volume_id"] == key, "dice"]
            if len(value):
                rows.append({"model": "ahnet", "metric": key, "value": float(value.iloc[0])})
    for name in LOSS_FILES:
        frame = pd.read_csv(run_dir / name)
        if len(frame):
            stage = name[len("loss_"):-len(".csv")]
            rows.append({"model": stage, "metric": "initial_loss", "value": float(frame["base_loss"].iloc[0])})
            rows.append({"model": stage, "metric": "final_loss", "value": float(frame["base_loss"].iloc[-1])})
    return pd.DataFrame(rows, columns=["model", "metric", "value"])


def render_report(run_dir, task="detection"):
    """froc.png (detection), loss.png and summary.csv; returns the written paths."""
    run_dir = Path(run_dir)
    check_artifacts(run_dir, task)
    written = []
    if task == "detection":
        plot_froc(run_dir, run_dir / "froc.png")
        written.append(run_dir / "froc.png")
    plot_losses(run_dir, run_dir / "loss.png")
    written.append(run_dir / "loss.png")
    write_csv(summary_frame(run_dir, task), run_dir / "summary.csv")
    written.append(run_dir / "summary.csv")
    logger.info("Report written to %s", run_dir)
    log_event("report", stage="report", details={"files": [p.name for p in written]})
    return written
