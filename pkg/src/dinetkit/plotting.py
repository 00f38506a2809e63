"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(rows: list[dict], path, title: str = "") -> Path:
    """Loss and validation CC per epoch."""
    epochs = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.4))
    a.plot(epochs, [r["train_loss"] for r in rows], "o-", label="train")
    a.plot(epochs, [r["val_loss"] for r in rows], "s--", label="validation")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(epochs, [r["val_cc"] for r in rows], "o-", color="tab:green", label="CC")
    b.plot(epochs, [r["val_nss"] for r in rows], "s--", color="tab:purple", label="NSS")
    b.set_xlabel("epoch")
    b.legend()
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def compare_curves(runs: dict[str, list[dict]], key: str, path, ylabel: str | None = None) -> Path:
    """One line per named run for a single log column."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, rows in runs.items():
        ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], "o-", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel or key)
    ax.legend()
    return _save(fig, path)


def metric_bars(names: list[str], reports, path) -> Path:
    """Grouped bars of CC, sAUC, AUC and NSS per named model."""
    metrics = ("cc", "sauc", "auc", "nss")
    fig, axes = plt.subplots(1, 4, figsize=(11, 3))
    for ax, m in zip(axes, metrics):
        vals = [getattr(r, m) for r in reports]
        ax.bar(range(len(names)), vals, color="tab:blue")
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_title(m.upper())
    return _save(fig, path)


def branch_panel(image: np.ndarray, maps: dict[str, np.ndarray], path) -> Path:
    """Image followed by one panel per map, all maps on a shared color scale."""
    lo = min(float(m.min()) for m in maps.values())
    hi = max(float(m.max()) for m in maps.values())
    fig, axes = plt.subplots(1, len(maps) + 1, figsize=(2.4 * (len(maps) + 1), 2.6))
    axes[0].imshow(np.clip(np.moveaxis(image, 0, -1), 0, 1))
    axes[0].set_title("image")
    for ax, (name, m) in zip(axes[1:], maps.items()):
        ax.imshow(m, cmap="inferno", vmin=lo, vmax=hi)
        ax.set_title(name)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)


def param_bars(table: list[tuple[str, int]], path, unit: int = 65536) -> Path:
    """Extra weights of each module variant over the baseline, in multiples of ``unit``."""
    names = [t for t, _ in table]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(names, [d / unit for _, d in table], color="tab:orange")
    ax.set_ylabel("extra weights / W")
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
