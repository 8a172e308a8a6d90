import math

import numpy as np
import pytest

from mdvsc.data import read_frames, write_frames
from mdvsc.metrics import (
    gop_quality,
    max_ms_ssim_levels,
    ms_ssim,
    ms_ssim_db,
    mse,
    psnr,
)
from mdvsc.video_model import Frame, Gop


class TestMse:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert mse(x, x) == 0.0

    def test_constant_offset(self):
        x = np.full((8, 8, 3), 0.4)
        y = np.full((8, 8, 3), 0.5)
        assert mse(x, y) == pytest.approx(0.01, rel=1e-12)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(7, 5, 3))
        y = rng.uniform(size=(7, 5, 3))
        total = 0.0
        for i in range(7):
            for j in range(5):
                for c in range(3):
                    total += (x[i, j, c] - y[i, j, c]) ** 2
        assert mse(x, y) == pytest.approx(total / (7 * 5 * 3), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            mse(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestPsnr:
    def test_twenty_db(self):
        x = np.full((4, 4, 3), 0.5)
        y = np.full((4, 4, 3), 0.6)
        assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)

    def test_identical_is_inf(self):
        x = np.zeros((4, 4, 3))
        assert psnr(x, x) == math.inf

    def test_thirty_db(self):
        x = np.zeros((10, 10, 1))
        y = np.full((10, 10, 1), math.sqrt(0.001))
        assert psnr(x, y) == pytest.approx(30.0, abs=1e-9)

    def test_decreases_with_noise_variance(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.2, 0.8, size=(32, 32, 3))
        values = []
        for sigma in (0.01, 0.02, 0.05, 0.1, 0.2):
            trials = [
                psnr(x, np.clip(x + rng.normal(0, sigma, x.shape), 0, 1))
                for _ in range(5)
            ]
            values.append(np.mean(trials))
        assert all(a > b for a, b in zip(values, values[1:]))


class TestMsSsim:
    def test_self_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(64, 64, 3))
        assert ms_ssim(x, x, levels=3) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(48, 48, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert abs(ms_ssim(x, y, levels=2) - ms_ssim(y, x, levels=2)) <= 1e-9

    def test_inverted_high_contrast_scores_low(self):
        # checkerboard against its negative: structure anti-correlated
        tile = np.indices((64, 64)).sum(axis=0) % 2
        x = np.repeat(tile[:, :, None], 3, axis=2).astype(np.float64)
        y = 1.0 - x
        assert ms_ssim(x, y, levels=3) < 0.5

    def test_level_validation(self):
        x = np.zeros((64, 64, 3))
        with pytest.raises(ValueError, match="at most 3 levels"):
            ms_ssim(x, x, levels=5)
        assert ms_ssim(x, x, levels=3) == 1.0
        assert max_ms_ssim_levels(64) == 3
        assert max_ms_ssim_levels(256) >= 5

    def test_value_in_unit_interval(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(64, 64, 3))
        y = rng.uniform(size=(64, 64, 3))
        d = ms_ssim(x, y, levels=3)
        assert 0.0 <= d <= 1.0

    def test_exact_one_after_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        f = Frame(pixels=rng.uniform(size=(64, 64, 3)), index=0)
        write_frames([f], tmp_path)
        (back,) = read_frames(tmp_path)
        assert ms_ssim(back, back, levels=3) == 1.0


class TestMsSsimDb:
    @pytest.mark.parametrize("d,expected", [(0.9, 10.0), (0.99, 20.0), (0.0, 0.0)])
    def test_values(self, d, expected):
        assert ms_ssim_db(d) == pytest.approx(expected, abs=1e-9)

    def test_one_is_inf(self):
        assert ms_ssim_db(1.0) == math.inf

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ms_ssim_db(1.5)
        with pytest.raises(ValueError):
            ms_ssim_db(-0.1)


class TestGopQuality:
    def test_report_consistency(self):
        rng = np.random.default_rng(9)
        frames = tuple(
            Frame(pixels=rng.uniform(size=(64, 64, 3)), index=i) for i in range(2)
        )
        noisy = tuple(
            Frame(pixels=np.clip(f.pixels + rng.normal(0, 0.05, f.shape), 0, 1), index=f.index)
            for f in frames
        )
        report = gop_quality(Gop(frames=frames), Gop(frames=noisy))
        assert len(report.per_frame) == 2
        assert report.psnr_db == pytest.approx(
            np.mean([q.psnr_db for q in report.per_frame])
        )
        assert report.ms_ssim_db == pytest.approx(ms_ssim_db(report.ms_ssim))
