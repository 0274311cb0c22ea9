"""Figures for the evaluate report. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
    "savefig.dpi": 120,
}

# PNG writers would otherwise stamp the matplotlib version into every file
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def central_slices(vol: np.ndarray) -> list[np.ndarray]:
    nx, ny, nz = vol.shape
    # transpose so the first index runs left-right on screen
    return [vol[:, :, nz // 2].T, vol[:, ny // 2, :].T, vol[nx // 2, :, :].T]


def slice_grid(volumes: dict[str, np.ndarray], path, vmin=0.0, vmax=1.0) -> Path:
    """Rows of central axial / coronal / sagittal slices, one row per volume."""
    names = list(volumes)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), 3, figsize=(6.0, 2.0 * len(names)), squeeze=False)
        for row, name in enumerate(names):
            for col, (img, plane) in enumerate(zip(central_slices(volumes[name]), ("axial", "coronal", "sagittal"))):
                ax = axes[row, col]
                ax.imshow(img, cmap="gray", vmin=vmin, vmax=vmax, origin="lower")
                ax.set_xticks([])
                ax.set_yticks([])
                if row == 0:
                    ax.set_title(plane)
                if col == 0:
                    ax.set_ylabel(name)
        return _save(fig, path)


def error_grid(reference: np.ndarray, volumes: dict[str, np.ndarray], path, limit: float | None = None) -> Path:
    """Signed axial-slice error against the reference for each volume."""
    names = list(volumes)
    errs = [central_slices(volumes[n])[0] - central_slices(reference)[0] for n in names]
    lim = limit or max(float(np.abs(e).max()) for e in errs) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.4), squeeze=False)
        for ax, name, err in zip(axes[0], names, errs):
            im = ax.imshow(err, cmap="RdBu_r", vmin=-lim, vmax=lim, origin="lower")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        return _save(fig, path)


def metric_bars(rows: list[dict], path) -> Path:
    names = [r["method"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        a.bar(names, [r["psnr"] for r in rows], color="0.4")
        a.set_ylabel("PSNR (dB)")
        lo = min(r["psnr"] for r in rows)
        a.set_ylim(lo - 1.0, max(r["psnr"] for r in rows) + 0.5)
        b.bar(names, [r["ssim"] for r in rows], color="0.6")
        b.set_ylabel("SSIM")
        lo = min(r["ssim"] for r in rows)
        b.set_ylim(max(0.0, lo - 0.05), min(1.0, max(r["ssim"] for r in rows) + 0.02))
        fig.tight_layout()
        return _save(fig, path)


def training_curve(history: list[dict], path) -> Path:
    it = [h["iter"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        ax.plot(it, [h["total"] for h in history], "k-", lw=1, label="total")
        ax.plot(it, [h["l1"] for h in history], "-", color="0.5", lw=1, label="L1")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(it, [h["count"] for h in history], ":", color="tab:blue", lw=1)
        twin.set_ylabel("Gaussians", color="tab:blue")
        ax.legend(frameon=False, loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def tstart_histogram(t_start: list[int], candidates: list[int], path) -> Path:
    counts = [t_start.count(c) for c in candidates]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 2.4))
        ax.bar([str(c) for c in candidates], counts, color="0.5")
        ax.set_xlabel("selected start step")
        ax.set_ylabel("projections")
        fig.tight_layout()
        return _save(fig, path)
