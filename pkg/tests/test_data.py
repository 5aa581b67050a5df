import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditslim.data import (
    build_calibration_set,
    calibration_t_bins,
    gen_condition,
    gen_latent_clip,
    mean_interslice_diff,
)
from ditslim.errors import ContractError


class TestLatentClips:
    def test_zero_motion_means_identical_slices(self):
        clip = gen_latent_clip(5, 0.0)
        for f in range(1, clip.x0.shape[0]):
            assert np.array_equal(clip.x0[f], clip.x0[0])

    def test_more_motion_more_interslice_change(self):
        low = gen_latent_clip(5, 0.1)
        high = gen_latent_clip(5, 1.0)
        assert mean_interslice_diff(high) > mean_interslice_diff(low)

    def test_same_seed_same_clip(self):
        a = gen_latent_clip(9, 0.7)
        b = gen_latent_clip(9, 0.7)
        assert np.array_equal(a.x0, b.x0)

    def test_values_bounded(self):
        for seed in range(10):
            clip = gen_latent_clip(seed, 1.0)
            assert np.abs(clip.x0).max() <= 3.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_motion_monotonicity(self, seed):
        levels = [0.0, 0.25, 0.5, 0.75, 1.0]
        diffs = [mean_interslice_diff(gen_latent_clip(seed, m)) for m in levels]
        for lo, hi in zip(diffs, diffs[1:]):
            assert hi >= lo - 1e-9

    def test_bad_motion_level(self):
        with pytest.raises(ContractError):
            gen_latent_clip(0, 1.5)


class TestConditions:
    def test_text_vectors_unit_norm(self):
        cond = gen_condition(3, "t2v")
        assert np.allclose(np.linalg.norm(cond.text, axis=1), 1.0, atol=1e-9)

    def test_image_embedding_unit_norm(self):
        clip = gen_latent_clip(4, 0.5)
        cond = gen_condition(3, "i2v", clip=clip)
        assert abs(np.linalg.norm(cond.image) - 1.0) <= 1e-9

    def test_motion_changes_image_embedding(self):
        a = gen_condition(3, "i2v", clip=gen_latent_clip(4, 0.2))
        b = gen_condition(3, "i2v", clip=gen_latent_clip(4, 0.9))
        assert not np.allclose(a.image, b.image)

    def test_same_seed_same_condition(self):
        clip = gen_latent_clip(4, 0.5)
        a = gen_condition(3, "i2v", clip=clip)
        b = gen_condition(3, "i2v", clip=clip)
        assert np.array_equal(a.text, b.text)
        assert np.array_equal(a.image, b.image)

    def test_t2v_has_no_image(self):
        assert gen_condition(3, "t2v").image is None


class TestCalibrationSet:
    def test_single_bin_center(self):
        assert calibration_t_bins(1, 1000) == [500]

    def test_five_bin_centers(self):
        assert calibration_t_bins(5, 1000) == [100, 300, 500, 700, 900]

    def test_motion_grid_of_four(self):
        calib = build_calibration_set(4, 2, seed=0)
        motions = [clip.motion_level for clip, _ in calib.samples]
        assert np.allclose(motions, [0.0, 1 / 3, 2 / 3, 1.0])

    def test_bins_strictly_increasing_in_range(self):
        calib = build_calibration_set(2, 7, seed=0)
        bins = calib.t_bins
        assert all(1 <= t <= 1000 for t in bins)
        assert all(b > a for a, b in zip(bins, bins[1:]))

    def test_reproducible(self):
        a = build_calibration_set(3, 4, seed=42, mode="i2v")
        b = build_calibration_set(3, 4, seed=42, mode="i2v")
        for (ca, na), (cb, nb) in zip(a.samples, b.samples):
            assert np.array_equal(ca.x0, cb.x0)
            assert np.array_equal(na.image, nb.image)

    def test_disk_cache_round_trip(self, tmp_path):
        from ditslim.data import load_calibration_set, save_calibration_set

        calib = build_calibration_set(3, 4, seed=42, mode="i2v")
        path = tmp_path / "calib.tarc"
        save_calibration_set(path, calib)
        loaded = load_calibration_set(path)
        assert loaded.t_bins == calib.t_bins
        assert loaded.seed == calib.seed
        for (ca, na), (cb, nb) in zip(calib.samples, loaded.samples):
            assert ca.x0.tobytes() == cb.x0.tobytes()
            assert ca.motion_level == cb.motion_level
            assert na.text.tobytes() == nb.text.tobytes()
            assert na.image.tobytes() == nb.image.tobytes()
