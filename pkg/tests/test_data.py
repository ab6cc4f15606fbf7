import json

import numpy as np
import pytest

from diffcoder.data import (
    DataError,
    Dataset,
    DatasetFormatError,
    FlowField,
    Trajectory,
    denormalize,
    denormalize_array,
    normalize,
    read_dataset,
    split_dataset,
    synth_generate,
    write_dataset,
)
from diffcoder.metrics import energy_spectrum


def make_dataset(rng, n_traj=3, frames=4, grid=16, split="full"):
    trajs = [
        Trajectory(traj_id=i, frames=rng.standard_normal((frames, grid, grid)).astype(np.float32))
        for i in range(n_traj)
    ]
    return Dataset(trajectories=trajs, split=split)


class TestFlowField:
    def test_valid(self):
        f = FlowField(np.zeros((16, 32), dtype=np.float32))
        assert f.grid == (16, 32)
        assert f.boundary == "periodic"

    @pytest.mark.parametrize("shape", [(8, 8), (16, 48), (15, 16)])
    def test_bad_grid(self, shape):
        with pytest.raises(DataError):
            FlowField(np.zeros(shape))

    def test_non_finite(self):
        values = np.zeros((16, 16))
        values[0, 0] = np.inf
        with pytest.raises(DataError):
            FlowField(values)


class TestDiskRoundTrip:
    def test_binary_size(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = make_dataset(rng, n_traj=1, frames=2, grid=16)
        write_dataset(ds, tmp_path)
        assert (tmp_path / "traj_0000.f32").stat().st_size == 2 * 16 * 16 * 4

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        ds = make_dataset(rng, n_traj=3, frames=5, grid=32)
        write_dataset(ds, tmp_path)
        loaded = read_dataset(tmp_path)
        assert len(loaded.trajectories) == 3
        assert loaded.split == ds.split
        for a, b in zip(ds.trajectories, loaded.trajectories):
            assert a.traj_id == b.traj_id
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_norm_stats_preserved(self, tmp_path):
        rng = np.random.default_rng(2)
        ds = normalize(make_dataset(rng))
        write_dataset(ds, tmp_path)
        loaded = read_dataset(tmp_path)
        assert loaded.norm_stats == pytest.approx(ds.norm_stats)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError, match="manifest"):
            read_dataset(tmp_path)

    def test_manifest_missing_key(self, tmp_path):
        rng = np.random.default_rng(3)
        write_dataset(make_dataset(rng), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        del manifest["grid"]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetFormatError, match="grid"):
            read_dataset(tmp_path)

    def test_truncated_binary(self, tmp_path):
        rng = np.random.default_rng(4)
        write_dataset(make_dataset(rng), tmp_path)
        target = tmp_path / "traj_0001.f32"
        target.write_bytes(target.read_bytes()[:-8])
        with pytest.raises(DatasetFormatError, match="bytes"):
            read_dataset(tmp_path)

    def test_unknown_version(self, tmp_path):
        rng = np.random.default_rng(5)
        write_dataset(make_dataset(rng), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["format_version"] = "diffcoder-ds-v9"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(tmp_path)


class TestNormalize:
    def test_standardizes(self):
        rng = np.random.default_rng(6)
        ds = make_dataset(rng, n_traj=4, frames=8, grid=32)
        normed = normalize(ds)
        values = normed.all_frames()
        assert abs(values.mean()) < 1e-4
        assert abs(values.std() - 1.0) < 1e-4

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        ds = make_dataset(rng)
        back = denormalize(normalize(ds))
        np.testing.assert_allclose(back.all_frames(), ds.all_frames(), atol=1e-6)

    def test_constant_input(self):
        traj = Trajectory(0, np.full((2, 16, 16), 5.0, dtype=np.float32))
        ds = Dataset(trajectories=[traj])
        with pytest.raises(DataError, match="variance"):
            normalize(ds)

    def test_apply_external_stats(self):
        rng = np.random.default_rng(8)
        ds = make_dataset(rng)
        normed = normalize(ds, stats=(2.0, 4.0))
        np.testing.assert_allclose(
            normed.all_frames(), (ds.all_frames() - 2.0) / 4.0, atol=1e-6
        )
        assert normed.norm_stats == (2.0, 4.0)

    def test_denormalize_array(self):
        x = np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(denormalize_array(x, (3.0, 2.0)), [3.0, 5.0, 1.0])


class TestSplit:
    def test_paper_sizes(self):
        rng = np.random.default_rng(9)
        ds = make_dataset(rng, n_traj=120, frames=1)
        train, test = split_dataset(ds, 100, seed=0)
        assert len(train.trajectories) == 100
        assert len(test.trajectories) == 20
        assert train.split == "train" and test.split == "test"

    def test_disjoint(self):
        rng = np.random.default_rng(10)
        ds = make_dataset(rng, n_traj=12, frames=1)
        train, test = split_dataset(ds, 9, seed=3)
        train_ids = {t.traj_id for t in train.trajectories}
        test_ids = {t.traj_id for t in test.trajectories}
        assert not train_ids & test_ids
        assert train_ids | test_ids == set(range(12))

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        ds = make_dataset(rng, n_traj=10, frames=1)
        a = split_dataset(ds, 7, seed=42)
        b = split_dataset(ds, 7, seed=42)
        assert [t.traj_id for t in a[0].trajectories] == [t.traj_id for t in b[0].trajectories]
        c = split_dataset(ds, 7, seed=43)
        assert [t.traj_id for t in a[0].trajectories] != [t.traj_id for t in c[0].trajectories]

    @pytest.mark.parametrize("n_train", [0, 10, 11])
    def test_out_of_range(self, n_train):
        rng = np.random.default_rng(12)
        ds = make_dataset(rng, n_traj=10, frames=1)
        with pytest.raises(DataError):
            split_dataset(ds, n_train, seed=0)


class TestSynthGenerate:
    def test_deterministic(self):
        a = synth_generate(32, 2, 3, -3.0, 4, seed=7)
        b = synth_generate(32, 2, 3, -3.0, 4, seed=7)
        for ta, tb in zip(a.trajectories, b.trajectories):
            np.testing.assert_array_equal(ta.frames, tb.frames)
        c = synth_generate(32, 2, 3, -3.0, 4, seed=8)
        assert not np.array_equal(a.trajectories[0].frames, c.trajectories[0].frames)

    def test_realness(self):
        # the float32 cast happens after the residue check inside the
        # generator; verify the float64 pipeline directly here
        N = 64
        rng = np.random.default_rng(13)
        k = np.fft.fftfreq(N, 1.0 / N)
        k2 = k[:, None] ** 2 + k[None, :] ** 2
        env = np.zeros_like(k2)
        env[k2 > 0] = np.sqrt(k2[k2 > 0]) ** (-1.0)
        field = np.fft.ifft2(np.fft.fft2(rng.standard_normal((N, N))) * env)
        assert np.abs(field.imag).max() <= 1e-10

    def test_spectrum_slope(self):
        # least-squares fit of log E(k) vs log k over k in [4, grid/4],
        # with the forcing mode placed below the fit band
        for slope in (-3.0, -2.0, -4.0):
            ds = synth_generate(64, 4, 8, slope, forcing_wavenumber=3, seed=0)
            E = np.mean([energy_spectrum(f).E for f in ds.all_frames()], axis=0)
            k = np.arange(1, len(E) + 1)
            sel = (k >= 4) & (k <= 16)
            fit = np.polyfit(np.log(k[sel]), np.log(E[sel]), 1)
            assert abs(fit[0] - slope) <= 0.3

    def test_forcing_shell_amplified(self):
        ds = synth_generate(64, 2, 8, -3.0, forcing_wavenumber=4, seed=1)
        E = np.mean([energy_spectrum(f).E for f in ds.all_frames()], axis=0)
        # shell 4 rises well above the power-law continuation of shell 3
        assert E[3] > E[2]

    def test_invalid_grid(self):
        with pytest.raises(DataError):
            synth_generate(48, 1, 1, -3.0, 4, seed=0)
        with pytest.raises(DataError):
            synth_generate(8, 1, 1, -3.0, 2, seed=0)

    def test_invalid_slope(self):
        with pytest.raises(DataError):
            synth_generate(32, 1, 1, 1.0, 4, seed=0)

    def test_unit_scale(self):
        ds = synth_generate(64, 2, 8, -3.0, 4, seed=2)
        std = ds.all_frames().std()
        assert 0.5 < std < 2.0
