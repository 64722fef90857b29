"""Rendering: heatmaps, red detection overlays and ROC figures.

Everything is written with fixed metadata so repeated runs give identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

HEATMAP_CMAP = "inferno"
OVERLAY_COLOR = (255, 0, 0)
OVERLAY_ALPHA = 0.5


def heatmap_rgb(values: np.ndarray, vmax: float, cmap: str = HEATMAP_CMAP) -> np.ndarray:
    """Map ``values`` in ``[0, vmax]`` to uint8 RGB through a matplotlib colormap."""
    vmax = float(vmax) if vmax > 0 else 1.0
    scaled = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0)
    rgba = matplotlib.colormaps[cmap](scaled, bytes=True)
    return np.ascontiguousarray(rgba[..., :3])


def write_heatmap(path, values: np.ndarray, vmax: float, cmap: str = HEATMAP_CMAP):
    Image.fromarray(heatmap_rgb(values, vmax, cmap)).save(path, format="PNG")


def write_scale(path, vmax: float, cmap: str = HEATMAP_CMAP, **extra):
    """Sidecar describing how heatmap colors map back to abnormality values."""
    info = {"colormap": cmap, "vmin": 0.0, "vmax": float(vmax), **extra}
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def overlay(frame: np.ndarray, values: np.ndarray, threshold: float,
            color=OVERLAY_COLOR, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Tint pixels whose abnormality exceeds ``threshold``; others are copied unchanged."""
    frame = np.asarray(frame, dtype=np.uint8)
    values = np.asarray(values)
    if values.shape != frame.shape[:2]:
        raise ValueError(f"map shape {values.shape} does not match frame {frame.shape[:2]}")
    out = frame.copy()
    hit = values > threshold
    tint = (1.0 - alpha) * frame[hit].astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)
    out[hit] = np.rint(tint).astype(np.uint8)
    return out


def plot_roc(reports: Sequence, path):
    """One ROC panel per report, AUC and EER in the legend."""
    fig, axes = plt.subplots(1, len(reports), figsize=(4.2 * len(reports), 4.0), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        ax.plot(rep.curve.fpr, rep.curve.tpr, lw=1.6,
                label=f"AUC {rep.auc:.4f}, EER {rep.eer:.4f}")
        ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=1)
        ax.plot([0, 1], [1, 0], ls="--", color="0.8", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        title = rep.protocol.replace("_", " ")
        ax.set_title(f"{title} ({rep.dataset})" if rep.dataset else title)
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
