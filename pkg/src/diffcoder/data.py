"""Dataset container, disk format, normalization, splitting, and the
synthetic spectrum-controlled field generator.

On disk a dataset is a directory holding one raw little-endian float32
binary per trajectory (frame-major, then row-major) plus a manifest.json
with grid shape, frame counts, dtype, normalization stats, split
membership and a format-version tag.

The synthetic generator is a desk-scale surrogate, not a flow solver: it
draws random-phase Fourier modes under a power-law envelope with an
amplified forcing mode, so its kinetic energy spectrum follows a
requested slope while the fields remain exactly real and periodic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DATASET_FORMAT_VERSION = "diffcoder-ds-v1"
MANIFEST_NAME = "manifest.json"

_REQUIRED_MANIFEST_KEYS = ("format_version", "grid", "dtype", "split", "norm_stats", "trajectories")

SPLITS = ("full", "train", "test")


class DataError(ValueError):
    """Invalid dataset contents or parameters."""


class DatasetFormatError(DataError):
    """Missing, inconsistent, or unreadable on-disk dataset."""


@dataclass(frozen=True)
class FlowField:
    """A single 2-D periodic vorticity snapshot."""

    values: np.ndarray
    boundary: str = "periodic"

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise DataError(f"field must be 2-D, got shape {arr.shape}")
        _check_grid(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise DataError("field contains non-finite values")

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class Trajectory:
    """A sequence of frames from one simulation run."""

    traj_id: int
    frames: np.ndarray  # (n_frames, H, W) float32


@dataclass(frozen=True)
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    norm_stats: tuple[float, float] | None = None
    split: str = "full"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if not self.trajectories:
            raise DataError("dataset has no trajectories")
        grids = {t.frames.shape[1:] for t in self.trajectories}
        if len(grids) != 1:
            raise DataError(f"trajectories disagree on grid size: {grids}")
        _check_grid(next(iter(grids)))
        if self.norm_stats is not None and self.norm_stats[1] <= 0:
            raise DataError(f"std must be positive, got {self.norm_stats[1]}")

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.trajectories[0].frames.shape[1:])

    @property
    def n_frames(self) -> int:
        return sum(t.frames.shape[0] for t in self.trajectories)

    def all_frames(self) -> np.ndarray:
        """All frames stacked as (n_frames, H, W)."""
        return np.concatenate([t.frames for t in self.trajectories], axis=0)


def write_dataset(ds: Dataset, path) -> None:
    """Write one raw float32 binary per trajectory plus the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, traj in enumerate(ds.trajectories):
        fname = f"traj_{idx:04d}.f32"
        data = np.ascontiguousarray(traj.frames, dtype="<f4")
        (root / fname).write_bytes(data.tobytes())
        records.append({"id": int(traj.traj_id), "file": fname, "frames": int(traj.frames.shape[0])})
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "grid": list(ds.grid),
        "dtype": "<f4",
        "split": ds.split,
        "norm_stats": None if ds.norm_stats is None else list(ds.norm_stats),
        "trajectories": records,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def read_dataset(path) -> Dataset:
    """Load a dataset directory, validating byte counts against the manifest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unparseable manifest: {exc}") from exc
    for key in _REQUIRED_MANIFEST_KEYS:
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing required key {key!r}")
    if manifest["format_version"] != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"unknown format version {manifest['format_version']!r}, "
            f"expected {DATASET_FORMAT_VERSION!r}"
        )
    if manifest["dtype"] != "<f4":
        raise DatasetFormatError(f"unknown dtype {manifest['dtype']!r}")
    H, W = (int(v) for v in manifest["grid"])
    trajectories = []
    for rec in manifest["trajectories"]:
        fpath = root / rec["file"]
        if not fpath.is_file():
            raise DatasetFormatError(f"missing trajectory binary: {fpath}")
        expected = rec["frames"] * H * W * 4
        actual = fpath.stat().st_size
        if actual != expected:
            raise DatasetFormatError(
                f"{fpath.name}: {actual} bytes on disk, manifest declares {expected}"
            )
        frames = np.fromfile(fpath, dtype="<f4").reshape(rec["frames"], H, W)
        trajectories.append(Trajectory(traj_id=int(rec["id"]), frames=frames))
    stats = manifest["norm_stats"]
    return Dataset(
        trajectories=trajectories,
        norm_stats=None if stats is None else (float(stats[0]), float(stats[1])),
        split=manifest["split"],
    )


def normalize(ds: Dataset, stats: tuple[float, float] | None = None) -> Dataset:
    """Standardize values to (x - mean) / std with global scalar stats.

    With stats=None the statistics are computed from this dataset (do this
    on the train split only); otherwise the given (mean, std) is applied,
    e.g. train stats onto the test split.
    """
    if stats is None:
        values = ds.all_frames()
        mean = float(values.mean())
        std = float(values.std())
        if std == 0.0:
            raise DataError("zero variance: cannot normalize a constant dataset")
        stats = (mean, std)
    mean, std = stats
    if std <= 0:
        raise DataError(f"std must be positive, got {std}")
    trajectories = [
        Trajectory(t.traj_id, ((t.frames - mean) / std).astype(np.float32))
        for t in ds.trajectories
    ]
    return Dataset(trajectories=trajectories, norm_stats=(mean, std), split=ds.split)


def denormalize(ds: Dataset) -> Dataset:
    """Exact inverse of normalize for a dataset carrying its stats."""
    if ds.norm_stats is None:
        raise DataError("dataset has no normalization stats")
    mean, std = ds.norm_stats
    trajectories = [
        Trajectory(t.traj_id, (t.frames * std + mean).astype(np.float32))
        for t in ds.trajectories
    ]
    return Dataset(trajectories=trajectories, norm_stats=None, split=ds.split)


def denormalize_array(values: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return values * std + mean


def split_dataset(ds: Dataset, n_train: int, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint split by trajectory (never by frame)."""
    n = len(ds.trajectories)
    if not 0 < n_train < n:
        raise DataError(f"n_train={n_train} out of range for {n} trajectories")
    order = np.random.default_rng(seed).permutation(n)
    train = [ds.trajectories[i] for i in order[:n_train]]
    test = [ds.trajectories[i] for i in order[n_train:]]
    return (
        Dataset(trajectories=train, norm_stats=ds.norm_stats, split="train"),
        Dataset(trajectories=test, norm_stats=ds.norm_stats, split="test"),
    )


def synth_generate(
    grid: int,
    n_traj: int,
    frames: int,
    spectrum_slope: float,
    forcing_wavenumber: int,
    seed: int,
    forcing_boost: float = 8.0,
) -> Dataset:
    """Generate random-phase periodic vorticity fields with a power-law
    kinetic energy spectrum plus an amplified forcing mode.

    The vorticity amplitude envelope is |k|^((slope+1)/2), which makes the
    shell-binned kinetic energy spectrum follow k^slope (each unit shell
    holds ~2*pi*k modes and each mode contributes |w_hat|^2/|k|^2).
    Hermitian symmetry is inherited from transforming white real noise, so
    the fields are exactly real. Deterministic under seed.
    """
    _check_grid((grid, grid))
    if spectrum_slope >= 0:
        raise DataError(f"spectrum_slope must be negative, got {spectrum_slope}")
    if not 0 < forcing_wavenumber < grid // 2:
        raise DataError(f"forcing_wavenumber {forcing_wavenumber} outside (0, {grid // 2})")
    if n_traj < 1 or frames < 1:
        raise DataError("need at least one trajectory and one frame")

    N = grid
    k = np.fft.fftfreq(N, 1.0 / N)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    envelope = np.zeros_like(k2)
    nonzero = k2 > 0
    envelope[nonzero] = np.sqrt(k2[nonzero]) ** ((spectrum_slope + 1.0) / 2.0)
    envelope[0, forcing_wavenumber] *= forcing_boost
    envelope[0, -forcing_wavenumber] *= forcing_boost
    # unit field variance in expectation: Var = sum(envelope^2) / N^2
    envelope /= np.sqrt((envelope ** 2).sum() / (N * N))

    rng = np.random.default_rng(seed)
    trajectories = []
    for traj_id in range(n_traj):
        stack = np.empty((frames, N, N), dtype=np.float32)
        for f in range(frames):
            white = rng.standard_normal((N, N))
            spectrum = np.fft.fft2(white) * envelope
            fld = np.fft.ifft2(spectrum)
            if np.abs(fld.imag).max() > 1e-10:
                raise DataError("generated field has non-negligible imaginary part")
            stack[f] = fld.real.astype(np.float32)
        trajectories.append(Trajectory(traj_id=traj_id, frames=stack))
    return Dataset(trajectories=trajectories, norm_stats=None, split="full")


def _check_grid(shape) -> None:
    for side in shape:
        side = int(side)
        if side < 16 or side & (side - 1):
            raise DataError(f"grid sides must be powers of two >= 16, got {tuple(shape)}")
