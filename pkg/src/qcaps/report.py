"""Render training-curve figures next to a metrics CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .train import read_metrics

FIGURES = ("loss.png", "accuracy.png", "margin.png")


def render_metrics(metrics_path, out_dir=None):
    """Write loss/accuracy/margin curves as PNGs alongside the CSV.

    Returns the list of files written. Rows with no evaluation entry are
    simply absent from the accuracy panel.
    """
    metrics_path = Path(metrics_path)
    out = Path(out_dir) if out_dir else metrics_path.parent
    out.mkdir(parents=True, exist_ok=True)
    _, cols = read_metrics(metrics_path)
    step = cols.get("step")
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(step, cols["loss"], marker="o", lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("spread loss")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "loss.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(step, cols["train_acc"], marker="o", lw=1.2, label="train")
    for col, label in (("eval_familiar", "eval (familiar)"), ("eval_novel", "eval (novel)")):
        series = cols.get(col)
        if series is not None and not _all_nan(series):
            ax.plot(step, series, marker="s", lw=1.2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title("accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "accuracy.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(step, cols["margin"], marker="o", lw=1.2, color="tab:purple")
    ax.set_xlabel("step")
    ax.set_ylabel("margin m")
    ax.set_title("margin schedule")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "margin.png"))
    return written


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def _all_nan(series):
    import numpy as np

    return bool(np.all(np.isnan(series)))
