"""Figure rendering for training logs, evaluation reports, and benchmarks.

Every function takes already-computed rows and writes one PNG next to the
delimited file it illustrates.  The Agg backend keeps rendering headless and
the Software metadata field is stripped so repeated runs produce identical
bytes on one matplotlib install.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def training_curves(records: list[dict], path: str | Path) -> Path:
    """Loss components per epoch on top, validation mAP and lr below."""
    path = Path(path)
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_val) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)

    for key, style in (("loss", "-"), ("loss_cls", "--"), ("loss_reg", ":"), ("loss_l1", "-.")):
        ax_loss.plot(epochs, [r[key] for r in records], style, label=key)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.grid(True, alpha=0.3)

    maps = [r["val_map"] for r in records]
    if any(m is not None for m in maps):
        ax_val.plot(epochs, [m if m is not None else float("nan") for m in maps], "-o", ms=3, label="val mAP")
        ax_val.set_ylim(0.0, 1.0)
    else:
        ax_val.text(0.5, 0.5, "no validation split", ha="center", va="center", transform=ax_val.transAxes)
    ax_val.set_ylabel("val mAP")
    ax_val.set_xlabel("epoch")
    ax_twin = ax_val.twinx()
    ax_twin.plot(epochs, [r["lr"] for r in records], color="gray", alpha=0.5, label="lr")
    ax_twin.set_ylabel("lr", color="gray")
    ax_val.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def eval_figure(report_dict: dict, path: str | Path) -> Path:
    """Bar chart of mAP per tIoU threshold with the mean drawn across."""
    path = Path(path)
    per = report_dict["map_per_threshold"]
    keys = sorted(per)
    values = [per[k] for k in keys]
    mean = report_dict["mean_map"]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(keys)), values, color="#4878a8", width=0.6)
    ax.axhline(mean, color="#c44e52", linestyle="--", label=f"mean {mean:.3f}")
    ax.set_xticks(range(len(keys)), [f"tIoU {k}" for k in keys])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mAP")
    ax.legend(loc="upper right")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def bench_figure(rows: list[dict], path: str | Path) -> Path:
    """Dot-product counts and wall-clock medians against sequence length."""
    path = Path(path)
    lengths = [r["length"] for r in rows]
    fig, (ax_ops, ax_ms) = plt.subplots(1, 2, figsize=(10, 4))

    ax_ops.plot(lengths, [r["dense"] for r in rows], "-o", label="dense T^2")
    ax_ops.plot(lengths, [r["actual"] for r in rows], "-s", label="windowed actual")
    ax_ops.plot(lengths, [r["interior"] for r in rows], "--", label="interior 3wT")
    ax_ops.set_xscale("log", base=2)
    ax_ops.set_yscale("log")
    ax_ops.set_xlabel("sequence length T")
    ax_ops.set_ylabel("query-key dots per head")
    ax_ops.legend(fontsize=8)
    ax_ops.grid(True, alpha=0.3)

    ax_ms.plot(lengths, [r["windowed_ms"] for r in rows], "-s", label="windowed")
    ax_ms.plot(lengths, [r["dense_ms"] for r in rows], "-o", label="dense")
    ax_ms.set_xscale("log", base=2)
    ax_ms.set_xlabel("sequence length T")
    ax_ms.set_ylabel("median wall-clock (ms)")
    ax_ms.legend(fontsize=8)
    ax_ms.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
