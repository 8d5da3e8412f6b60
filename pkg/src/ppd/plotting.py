"""Figures for evaluation reports and training histories (rendered to files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps re-rendered PNGs byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_rows(report: dict, path) -> None:
    """Bar chart of mean Dice and IoU per report row, with std error bars."""
    rows = report["rows"]
    names = [r["name"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 2.5, 3.5))
    ax.bar(x - 0.2, [r["dice_mean"] for r in rows], 0.4, yerr=[r["dice_std"] for r in rows], label="Dice", capsize=3)
    ax.bar(x + 0.2, [r["iou_mean"] for r in rows], 0.4, yerr=[r["iou_std"] for r in rows], label="IoU", capsize=3)
    ax.set_xticks(x, names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"{report['mode']} ({rows[0]['n']} scenes)")
    ax.legend(loc="lower right")
    _save(fig, path)


def plot_scenes(report: dict, path) -> None:
    """Per-scene Dice of the first row against every later row."""
    names = [r["name"] for r in report["rows"]]
    base = np.array([s[f"dice_{names[0]}"] for s in report["scenes"]])
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    for name in names[1:]:
        ax.scatter(base, [s[f"dice_{name}"] for s in report["scenes"]], s=10, label=name)
    lo = min(0.0, float(base.min()))
    ax.plot([lo, 1.0], [lo, 1.0], color="grey", lw=0.8, ls="--")
    ax.set_xlabel(f"Dice ({names[0]})")
    ax.set_ylabel("Dice")
    ax.legend(loc="lower right")
    _save(fig, path)


def plot_history(history: list[dict], path, window: int = 10) -> None:
    """Per-episode Dice curves, smoothed with a trailing mean."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ep = np.array([h["episode"] for h in history])
    for key in ("dice_ideal", "dice_attacked", "dice_defended"):
        v = np.array([h[key] for h in history], dtype=float)
        smooth = np.array([v[max(0, i - window + 1) : i + 1].mean() for i in range(len(v))])
        ax.plot(ep, smooth, label=key.removeprefix("dice_"))
    ax.set_xlabel("episode")
    ax.set_ylabel(f"Dice (mean of last {window})")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left")
    _save(fig, path)
