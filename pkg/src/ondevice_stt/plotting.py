"""Figures written next to the CSV / JSONL reports."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def new_figure(ncols=1, width=3.4, height=None):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    height = height or width * golden
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def save(fig, path):
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)


def plot_history(history, path, best_epoch=None):
    """Loss and validation WER per epoch for one personalization session."""
    epochs = [m.epoch for m in history]
    fig, (ax_loss, ax_wer) = new_figure(ncols=2)
    ax_loss.plot(epochs, [m.mean_train_loss for m in history], marker="o", ms=3, label="train")
    ax_loss.plot(epochs, [m.val_loss for m in history], marker="s", ms=3, label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("CTC loss")
    ax_loss.legend(frameon=False)
    ax_wer.plot(epochs, [m.val_wer for m in history], marker="o", ms=3, color="C2")
    ax_wer.set_xlabel("epoch")
    ax_wer.set_ylabel("validation WER (%)")
    if best_epoch is not None:
        for ax in (ax_loss, ax_wer):
            ax.axvline(best_epoch, color="0.6", ls="--", lw=0.8)
    save(fig, path)


def plot_sweep(rows, path):
    """Epoch time against batch size, and best WER per configuration."""
    ok = [r for r in rows if r.status == "ok"]
    fig, (ax_time, ax_wer) = new_figure(ncols=2)
    series = defaultdict(list)
    for r in ok:
        series[(r.lr, r.freeze)].append(r)
    for (lr, freeze), rs in sorted(series.items()):
        rs = sorted(rs, key=lambda r: r.batch)
        label = f"{freeze}, lr={lr:g}"
        ax_time.plot([r.batch for r in rs], [r.mean_epoch_s for r in rs], marker="o", ms=3, label=label)
        ax_wer.plot([r.batch for r in rs], [r.final_wer for r in rs], marker="o", ms=3, label=label)
    ax_time.set_xlabel("batch size")
    ax_time.set_ylabel("time per epoch (s)")
    ax_wer.set_xlabel("batch size")
    ax_wer.set_ylabel("best validation WER (%)")
    if series:
        ax_wer.legend(frameon=False)
    save(fig, path)


def plot_wer_comparison(labels, before, after, path):
    """Grouped bars of WER before and after personalization."""
    fig, (ax,) = new_figure(width=max(3.4, 0.6 * len(labels) + 1.5))
    xs = range(len(labels))
    ax.bar([x - 0.2 for x in xs], before, width=0.4, label="baseline")
    ax.bar([x + 0.2 for x in xs], after, width=0.4, label="personalized")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylabel("WER (%)")
    ax.legend(frameon=False)
    save(fig, path)
