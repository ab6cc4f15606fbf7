"""Mosaic figures: fields, error maps, metric bars, and spectra for one
test sample."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import energy_spectrum
from .report import METRIC_NAMES

FIELD_CMAP = "RdBu_r"
ERROR_CMAP = "magma"

METHOD_ORDER = ("model", "bilinear", "bicubic")


def render_mosaic(
    gt: np.ndarray,
    recons: dict[str, np.ndarray],
    metrics: dict[str, dict[str, float]],
    out_path,
    title: str = "",
) -> None:
    """Render one sample's mosaic to a raster image.

    Panels: ground truth and each reconstruction, the corresponding
    absolute error fields, a bar chart of the three metrics per method,
    and the kinetic energy spectra of all fields (four curves).
    """
    methods = [m for m in METHOD_ORDER if m in recons]
    n_cols = 1 + len(methods)
    fig, axes = plt.subplots(3, n_cols, figsize=(3.2 * n_cols, 9.0))
    vmax = float(np.abs(gt).max()) or 1.0

    def show_field(ax, field, label):
        ax.imshow(field, cmap=FIELD_CMAP, vmin=-vmax, vmax=vmax)
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])

    show_field(axes[0, 0], gt, "ground truth")
    for j, method in enumerate(methods):
        show_field(axes[0, j + 1], recons[method], method)

    axes[1, 0].axis("off")
    err_max = max(float(np.abs(recons[m] - gt).max()) for m in methods) or 1.0
    for j, method in enumerate(methods):
        ax = axes[1, j + 1]
        ax.imshow(np.abs(recons[method] - gt), cmap=ERROR_CMAP, vmin=0, vmax=err_max)
        ax.set_title(f"|{method} - gt|", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])

    # bar chart of the three metrics per method
    bar_ax = axes[2, 0]
    x = np.arange(len(METRIC_NAMES))
    width = 0.8 / max(len(methods), 1)
    for j, method in enumerate(methods):
        values = [metrics[method][m] for m in METRIC_NAMES]
        bar_ax.bar(x + j * width, values, width, label=method)
    bar_ax.set_xticks(x + width * (len(methods) - 1) / 2)
    bar_ax.set_xticklabels(["rel L2", "spectral", "high-k"], fontsize=8)
    bar_ax.legend(fontsize=7)
    bar_ax.set_title("errors", fontsize=9)

    # spectra: log E(k) vs k for ground truth and every reconstruction
    spec_ax = axes[2, 1]
    spectrum = energy_spectrum(gt)
    spec_ax.plot(spectrum.k, np.maximum(spectrum.E, 1e-16), label="ground truth", lw=1.5)
    for method in methods:
        s = energy_spectrum(recons[method])
        spec_ax.plot(s.k, np.maximum(s.E, 1e-16), label=method, lw=1.0)
    spec_ax.set_xscale("log")
    spec_ax.set_yscale("log")
    spec_ax.set_xlabel("wavenumber k", fontsize=8)
    spec_ax.set_ylabel("E(k)", fontsize=8)
    spec_ax.legend(fontsize=7)
    spec_ax.set_title("kinetic energy spectra", fontsize=9)

    for j in range(2, n_cols):
        axes[2, j].axis("off")

    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
