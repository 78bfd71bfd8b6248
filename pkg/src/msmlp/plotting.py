"""Figures written next to the CLI's CSV output (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import ScalingRecord, fit_scaling  # noqa: E402
from .flops import FlopsReport  # noqa: E402


def figure_path(csv_path, suffix: str) -> Path:
    """``out/run.csv`` -> ``out/run_<suffix>.png``."""
    p = Path(csv_path)
    return p.with_name(f"{p.stem}_{suffix}.png")


def plot_scaling(records: Iterable[ScalingRecord], path, title: Optional[str] = None) -> Path:
    """Log-log wall time against token count, one line per operator with its fitted slope."""
    records = list(records)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for op in sorted({r.op for r in records}):
        rs = sorted((r for r in records if r.op == op), key=lambda r: r.tokens)
        hw = np.array([r.tokens for r in rs], dtype=float)
        t = np.array([r.median_s for r in rs])
        label = op
        if len(rs) >= 4:
            fit = fit_scaling(rs)
            label = f"{op} (slope {fit.slope:.2f})"
            ax.plot(hw, np.exp(fit.intercept) * hw ** fit.slope, "--", linewidth=0.8, color="grey")
        ax.plot(hw, t, "o-", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("tokens (H x W)")
    ax.set_ylabel("median time [s]")
    ax.set_title(title or "spatial mixing cost")
    ax.grid(True, which="both", linewidth=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _group_rows(report: FlopsReport) -> tuple[list[str], dict]:
    """Sum per-block rows into per-stage totals by layer kind."""
    kinds = ("embed", "mix", "mlp", "head")
    stages: list[str] = []
    totals: dict = {k: [] for k in kinds}
    for row in report.rows:
        parts = row.name.split(".")
        stage = f"stage {int(parts[1]) + 1}" if parts[0] == "stages" else "head"
        if stage not in stages:
            stages.append(stage)
            for k in kinds:
                totals[k].append(0)
        if parts[-1] == "embed":
            kind = "embed"
        elif "mix" in parts:
            kind = "mix"
        elif "mlp" in parts:
            kind = "mlp"
        else:
            kind = "head"
        totals[kind][stages.index(stage)] += row.macs
    return stages, totals


def plot_flops(report: FlopsReport, path, title: Optional[str] = None) -> Path:
    """Stacked bar chart of MACs per stage, split into embedding / spatial mix / channel MLP / head."""
    stages, totals = _group_rows(report)
    x = np.arange(len(stages))
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    bottom = np.zeros(len(stages))
    for kind, vals in totals.items():
        v = np.array(vals, dtype=float) / 1e9
        if not v.any():
            continue
        ax.bar(x, v, bottom=bottom, label=kind)
        bottom += v
    ax.set_xticks(x)
    ax.set_xticklabels(stages)
    ax.set_ylabel("GMACs")
    ax.set_title(title or f"{report.total_macs / 1e9:.2f} GMACs, {report.total_params / 1e6:.2f}M params")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history: Sequence, path, title: Optional[str] = None) -> Path:
    """Loss and accuracy against step."""
    steps = [m.step for m in history]
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.plot(steps, [m.loss for m in history], label="loss", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [m.acc for m in history], color="tab:orange", linewidth=0.8, label="batch acc")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel("accuracy")
    ax.set_title(title or "training")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
