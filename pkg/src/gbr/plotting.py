"""Report figures written to PNG files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "viridis",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a fixed creation date keeps the PNG bytes stable across reruns
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def cost_history(history, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        h = np.asarray(history, dtype=float)
        ax.semilogy(np.arange(len(h)), np.maximum(h, 1e-300), marker="o", ms=3, lw=1)
        ax.set_xlabel("accepted step")
        ax.set_ylabel("robust cost")
        ax.set_title("Bundle adjustment")
        return _save(fig, path)


def depth_panels(maps: dict[str, np.ndarray], path, masks: dict[str, np.ndarray] | None = None) -> Path:
    """Side-by-side rasters sharing one colour scale per row kind (depth vs error)."""
    names = list(maps)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 2.3), squeeze=False)
        for ax, name in zip(axes[0], names):
            a = np.asarray(maps[name], dtype=float)
            if masks and name in masks:
                a = np.where(masks[name], a, np.nan)
            im = ax.imshow(a)
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
        return _save(fig, path)


def error_histogram(errors, path, voxel: float | None = None, title: str = "Mesh to ground truth") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        e = np.asarray(errors, dtype=float)
        ax.hist(e, bins=60, color="0.35")
        if voxel:
            ax.axvline(voxel, color="C3", lw=1, ls="--", label="1 voxel")
            ax.legend(frameon=False)
        ax.set_xlabel("distance (scene units)")
        ax.set_ylabel("count")
        ax.set_title(title)
        return _save(fig, path)


def loss_breakdown(per_view: list[dict], path) -> Path:
    """Stacked weighted loss terms per view."""
    terms = ["photometric", "normal", "depth", "ndc", "cycle"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(per_view) + 1.5), 2.8))
        x = np.arange(len(per_view))
        bottom = np.zeros(len(per_view))
        for k, t in enumerate(terms):
            vals = np.array([v["weighted"][t] * v["scale"] for v in per_view])
            ax.bar(x, vals, bottom=bottom, label=t, color=f"C{k}", width=0.7)
            bottom += vals
        ax.set_xticks(x)
        ax.set_xticklabels([v["name"] for v in per_view], rotation=60, ha="right")
        ax.set_ylabel("weighted loss")
        ax.legend(frameon=False, ncol=3)
        return _save(fig, path)
