"""Report figures and gnuplot-readable data files.

Figures are written with the Agg backend, so no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}

SPLIT_STYLE = {"train": ("k", "o"), "test": ("tab:red", "s")}


def write_gnuplot_dat(rows: list[dict], path) -> None:
    """Whitespace-separated epoch table, one block per split (``index 0`` / ``index 1`` in gnuplot)."""
    cols = ("epoch", "mae", "pc", "ae_sd", "lr", "loss")
    splits = [s for s in ("train", "test") if any(r["split"] == s for r in rows)]
    with open(path, "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for k, split in enumerate(splits):
            if k:
                fh.write("\n\n")
            fh.write(f"# split {split}\n")
            for r in rows:
                if r["split"] != split:
                    continue
                vals = ["NaN" if r[c] is None else repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols]
                fh.write(" ".join(vals) + "\n")


def _series(rows, split, key):
    sel = [r for r in rows if r["split"] == split]
    x = np.array([r["epoch"] for r in sel])
    y = np.array([np.nan if r[key] is None else r[key] for r in sel], dtype=np.float64)
    return x, y


def plot_history(rows: list[dict], path, title: str | None = None) -> Path:
    """Loss, MAE and correlation per epoch, with the learning rate at each epoch end."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for ax, key, label in zip(axes, ("loss", "mae", "pc"), ("loss", "MAE", "Pearson r")):
            for split, (color, marker) in SPLIT_STYLE.items():
                x, y = _series(rows, split, key)
                if len(x):
                    ax.plot(x, y, color=color, marker=marker, label=split)
            ax.set_xlabel("epoch")
            ax.set_ylabel(label)
        axes[2].set_ylim(-1.05, 1.05)
        axes[0].legend()
        x, lr = _series(rows, "train", "lr")
        if len(x):
            twin = axes[0].twinx()
            twin.plot(x, lr, color="0.6", ls=":", lw=1)
            twin.set_ylabel("lr", color="0.5")
            twin.spines["right"].set_visible(True)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_predictions(series: dict[str, np.ndarray], targets, path, range_max: float | None = None) -> Path:
    """Predicted against true score, one marker set per model."""
    y = np.asarray(targets, dtype=np.float64)
    hi = range_max if range_max is not None else float(max(y.max(), *(np.max(p) for p in series.values())))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([0, hi], [0, hi], color="0.7", lw=1, ls="--")
        for name, preds in series.items():
            ax.plot(y, np.asarray(preds), ls="none", marker="o", alpha=0.6, label=name)
        ax.set_xlabel("true score")
        ax.set_ylabel("predicted score")
        ax.set_aspect("equal", adjustable="box")
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_mix_panel(rows: list[tuple[np.ndarray, np.ndarray, np.ndarray, str]], path) -> Path:
    """One row per mixed pair: anchor, partner, result; ``rows`` holds (a, b, mixed, caption)."""
    n = max(len(rows), 1)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
        for i, (a, b, mixed, caption) in enumerate(rows):
            for ax, img, name in zip(axes[i], (a, b, mixed), ("A", "B", "mixed")):
                ax.imshow(np.asarray(img)[0] if np.ndim(img) == 3 else img, cmap="gray", vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(name)
            axes[i][2].set_xlabel(caption, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
