"""Reconstruction metrics for periodic vorticity fields.

The kinetic energy spectrum is derived spectrally from vorticity through
the streamfunction: psi_hat = omega_hat / |k|^2, u = d(psi)/dy,
v = -d(psi)/dx, so the per-mode energy is |omega_hat|^2 / |k|^2 and sign
conventions cancel. The domain is the 2*pi-periodic square with integer
wavenumbers; transforms are normalized so that the shell energies sum to
the mean kinetic energy density 0.5 * mean(u^2 + v^2).

Shells are unit-width annuli on rounded |k| with k_max = floor(min(H,W)/2);
modes beyond k_max (the spectral corners) are folded into the top shell so
that every nonzero mode lands in exactly one shell and Parseval holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

LOG_SPECTRUM_FLOOR = 1e-12

INTERP_ORDERS = {"bilinear": 1, "bicubic": 3}


class MetricError(ValueError):
    """Invalid metric input."""


@dataclass(frozen=True)
class EnergySpectrum:
    """Shell-binned kinetic energy: E[i] is the energy of shell k[i]."""

    k: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        if len(self.k) != len(self.E):
            raise MetricError("shell index and energy arrays differ in length")

    @property
    def k_max(self) -> int:
        return int(self.k[-1])

    def total_energy(self) -> float:
        return float(self.E.sum())


def rel_l2(rec, gt) -> float:
    """Relative L2 error ||rec - gt|| / ||gt|| over the flattened fields."""
    rec = _as_field(rec)
    gt = _as_field(gt)
    if rec.shape != gt.shape:
        raise MetricError(f"shape mismatch: {rec.shape} vs {gt.shape}")
    denom = np.linalg.norm(gt.ravel())
    if denom == 0.0:
        raise MetricError("ground truth has zero norm")
    return float(np.linalg.norm((rec - gt).ravel()) / denom)


def energy_spectrum(omega) -> EnergySpectrum:
    """Kinetic energy spectrum of a periodic vorticity field.

    The k=0 mode carries no energy (the streamfunction is undefined
    there); its content is ignored.
    """
    w = _as_field(omega)
    H, W = w.shape
    w_hat = np.fft.fft2(w) / (H * W)

    ky = np.fft.fftfreq(H, d=1.0 / H)
    kx = np.fft.fftfreq(W, d=1.0 / W)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2

    energy_density = np.zeros_like(k2)
    nonzero = k2 > 0  # the mean mode carries no kinetic energy
    energy_density[nonzero] = 0.5 * np.abs(w_hat[nonzero]) ** 2 / k2[nonzero]

    k_max = min(H, W) // 2
    shell = np.minimum(np.rint(np.sqrt(k2)).astype(int), k_max)
    E = np.bincount(shell.ravel(), weights=energy_density.ravel(), minlength=k_max + 1)[1:]
    return EnergySpectrum(k=np.arange(1, k_max + 1), E=E)


def velocity_from_vorticity(omega, refine: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Spectral velocity components (u, v) with omega = -laplacian(psi),
    u = d(psi)/dy, v = -d(psi)/dx. The mean flow (k=0) is set to zero.

    refine > 1 evaluates the band-limited velocities on a grid that much
    finer (zero-padded transform with symmetric Nyquist splitting).
    Sampling on the native grid cannot represent the sine part of Nyquist
    modes, so energy computed from pointwise velocities needs refine >= 2.
    """
    w = _as_field(omega)
    H, W = w.shape
    w_hat = np.fft.fft2(w) / (H * W)
    if refine > 1:
        w_hat = _pad_real_spectrum(w_hat, refine * H, refine * W)
        H, W = w_hat.shape
    ky = np.fft.fftfreq(H, d=1.0 / H)
    kx = np.fft.fftfreq(W, d=1.0 / W)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    k2[0, 0] = np.inf
    psi_hat = w_hat / k2
    u = np.fft.ifft2(1j * ky[:, None] * psi_hat * (H * W)).real
    v = np.fft.ifft2(-1j * kx[None, :] * psi_hat * (H * W)).real
    return u, v


def _pad_real_spectrum(hat: np.ndarray, Hf: int, Wf: int) -> np.ndarray:
    """Embed a real field's normalized spectrum in a finer spectral grid.

    The single Nyquist row/column of an even-sized grid is split evenly
    between the +N/2 and -N/2 slots of the fine grid (valid because the
    source field is real), so the interpolant is preserved exactly.
    """
    H, W = hat.shape
    src = np.fft.fftshift(hat).copy()
    if H % 2 == 0:
        src[0, :] *= 0.5
        src = np.vstack([src, src[0:1, :]])
    if W % 2 == 0:
        src[:, 0] *= 0.5
        src = np.hstack([src, src[:, 0:1]])
    out = np.zeros((Hf, Wf), dtype=complex)
    y0 = Hf // 2 - H // 2
    x0 = Wf // 2 - W // 2
    out[y0:y0 + src.shape[0], x0:x0 + src.shape[1]] = src
    return np.fft.ifftshift(out)


def spectral_error(rec, gt) -> float:
    """Relative L2 error of the log energy spectrum over all shells."""
    return _log_spectrum_error(rec, gt, lo_shell=1)


def highfreq_spectral_error(rec, gt) -> float:
    """Spectral error restricted to the top 25% of shells,
    k in [ceil(0.75 k_max) + 1, k_max]."""
    rec = _as_field(rec)
    k_max = min(rec.shape) // 2
    lo = math.ceil(0.75 * k_max) + 1
    return _log_spectrum_error(rec, gt, lo_shell=lo)


def _log_spectrum_error(rec, gt, lo_shell: int) -> float:
    rec = _as_field(rec)
    gt = _as_field(gt)
    if rec.shape != gt.shape:
        raise MetricError(f"shape mismatch: {rec.shape} vs {gt.shape}")
    e_rec = energy_spectrum(rec)
    e_gt = energy_spectrum(gt)
    sel = slice(lo_shell - 1, None)
    log_rec = np.log(np.maximum(e_rec.E[sel], LOG_SPECTRUM_FLOOR))
    log_gt = np.log(np.maximum(e_gt.E[sel], LOG_SPECTRUM_FLOOR))
    return float(np.linalg.norm(log_rec - log_gt) / np.linalg.norm(log_gt))


def interp_baseline(gt, depth: int, method: str):
    """Compression baseline: area-average downsample by 2^depth, then
    interpolate back to full resolution with periodic edge handling."""
    if method not in INTERP_ORDERS:
        raise MetricError(f"unknown method {method!r}; expected one of {tuple(INTERP_ORDERS)}")
    field = _as_field(gt)
    if depth == 0:
        return field.copy()
    f = 2 ** depth
    H, W = field.shape
    if H % f or W % f:
        raise MetricError(f"grid {field.shape} not divisible by 2^{depth}")
    coarse = field.reshape(H // f, f, W // f, f).mean(axis=(1, 3))
    # coarse samples live at the block centers of the fine grid
    yy = (np.arange(H) - (f - 1) / 2.0) / f
    xx = (np.arange(W) - (f - 1) / 2.0) / f
    coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    return map_coordinates(coarse, coords, order=INTERP_ORDERS[method], mode="grid-wrap")


def _as_field(x) -> np.ndarray:
    values = getattr(x, "values", x)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise MetricError(f"expected a 2-D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MetricError("field contains non-finite values")
    return arr
