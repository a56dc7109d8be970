import csv
import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from lgtd.data import Clip, MovingObject, SceneParams, synth_scene
from lgtd.metrics import (PSNR_INF, EvalProtocol, SceneResult, bicubic_scene_scores, evaluate_scene, frame_scores,
                          psnr, rgb_to_y, ssim, temporal_profile, window_indices, write_results)
from lgtd.model import ModelConfig, build_model


def skimage_ssim(a, b):
    return structural_similarity(a, b, data_range=255.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


class TestY:
    def test_black_and_white(self):
        assert rgb_to_y(np.zeros((3, 1, 1)))[0, 0] == 16 / 255
        assert rgb_to_y(np.ones((3, 1, 1)))[0, 0] == pytest.approx(235 / 255, abs=1e-15)

    def test_gray_is_midpoint(self):
        g = rgb_to_y(np.full((3, 1, 1), 0.5))[0, 0]
        assert g == pytest.approx((16 / 255 + 235 / 255) / 2, abs=1e-15)

    def test_affine_combination(self):
        rng = np.random.default_rng(0)
        x, z = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        a = 0.3
        assert np.allclose(rgb_to_y(a * x + (1 - a) * z), a * rgb_to_y(x) + (1 - a) * rgb_to_y(z), atol=1e-15)

    def test_torch_batched(self):
        y = rgb_to_y(torch.rand(2, 5, 3, 4, 4))
        assert y.shape == (2, 5, 4, 4)


class TestPsnr:
    def test_identical_is_inf(self):
        x = np.random.default_rng(1).random((32, 32)) * 255
        assert psnr(x, x.copy()) == PSNR_INF == math.inf
        assert psnr(x, x.copy(), border=0) == PSNR_INF

    def test_full_range_error_is_zero_db(self):
        assert psnr(np.zeros((20, 20)), np.full((20, 20), 255.0)) == 0.0

    def test_uniform_unit_error(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(1, 254, (24, 24)).astype(float)
        sign = np.where(rng.random((24, 24)) > 0.5, 1.0, -1.0)
        assert abs(psnr(gt, gt + sign) - 48.1308) <= 1e-4
        assert psnr(gt, gt + 1) == pytest.approx(20 * math.log10(255), abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((20, 20)) * 255, rng.random((20, 20)) * 255
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_error(self):
        gt = np.full((20, 20), 100.0)
        values = [psnr(gt, gt + e) for e in (0.5, 1.0, 2.0, 8.0, 30.0)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_border_crop_ignores_edges(self):
        gt = np.zeros((20, 20))
        sr = gt.copy()
        sr[:8] = 255
        assert psnr(gt, sr, border=8) == PSNR_INF
        assert psnr(gt, sr, border=0) < 10

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError, match="no area"):
            psnr(np.zeros((16, 16)), np.zeros((16, 16)), border=8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((20, 20)), np.zeros((20, 21)))


class TestSsim:
    def test_identical_is_exactly_one(self):
        x = np.random.default_rng(4).random((40, 40)) * 255
        assert ssim(x, x.copy()) == 1.0
        assert ssim(x, x.copy(), border=0) == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_skimage(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((48, 40)) * 255
        b = np.clip(a + rng.normal(0, 10 + 5 * seed, a.shape), 0, 255)
        ours = ssim(a, b, border=0)
        assert abs(ours - skimage_ssim(a, b)) <= 1e-4

    def test_border_crop_equals_skimage_on_cropped(self):
        rng = np.random.default_rng(11)
        a, b = rng.random((50, 50)) * 255, rng.random((50, 50)) * 255
        assert abs(ssim(a, b, border=8) - skimage_ssim(a[8:-8, 8:-8], b[8:-8, 8:-8])) <= 1e-4

    def test_constant_plus_noise_is_low(self):
        rng = np.random.default_rng(5)
        gt = np.full((48, 48), 128.0)
        sr = np.clip(gt + rng.normal(0, 60, gt.shape), 0, 255)
        assert ssim(gt, sr) < 0.5

    def test_bounded(self):
        rng = np.random.default_rng(6)
        a = rng.random((32, 32)) * 255
        assert -1 <= ssim(a, 255 - a, border=0) <= 1

    def test_smaller_than_window_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((26, 26)), np.zeros((26, 26)))

    def test_channels_averaged(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((3, 24, 24)) * 255, rng.random((3, 24, 24)) * 255
        per = [ssim(a[c], b[c], border=0) for c in range(3)]
        assert ssim(a, b, border=0) == pytest.approx(np.mean(per), abs=1e-15)


class TestFrameScores:
    def test_y_protocol(self):
        gt, sr = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
        p, s = frame_scores(gt, sr)
        ya, yb = rgb_to_y(gt.double().numpy()) * 255, rgb_to_y(sr.double().numpy()) * 255
        assert p == psnr(ya, yb) and s == ssim(ya, yb)

    def test_rgb_protocol(self):
        gt, sr = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
        p, _ = frame_scores(gt, sr, EvalProtocol(channel="RGB", border_crop=0))
        assert p == psnr(gt.double().numpy() * 255, sr.double().numpy() * 255, border=0)

    def test_bad_channel(self):
        with pytest.raises(ValueError, match="channel"):
            frame_scores(torch.rand(3, 32, 32), torch.rand(3, 32, 32), EvalProtocol(channel="Cb"))


class TestTemporalProfile:
    def test_static_video_rows_identical(self):
        frames = torch.rand(1, 3, 16, 20).expand(6, 3, 16, 20)
        prof = temporal_profile(frames, 5)
        assert prof.shape == (3, 6, 20)
        for k in range(6):
            assert torch.equal(prof[:, k], prof[:, 0])

    def test_shape_grayscale(self):
        assert temporal_profile(np.zeros((7, 9, 13)), 0).shape == (7, 13)

    def test_diagonal_streak(self):
        obj = MovingObject(y=4.0, x=3.0, h=8.0, w=4.0, vy=0.0, vx=1.0, color=(1.0, 0.0, 0.0))
        p = SceneParams(T=8, H=16, W=24, objects=[obj])
        frames = synth_scene(0, p).frames
        bg = synth_scene(0, SceneParams(T=1, H=16, W=24, objects=[])).frames[0]
        prof = temporal_profile(frames, 8)
        changed = (prof - temporal_profile(bg[None], 8)).abs().sum(0) > 1e-6
        left = [int(np.flatnonzero(changed[k].numpy())[0]) for k in range(8)]
        assert left == [3 + k for k in range(8)]

    def test_out_of_range_row(self):
        with pytest.raises(ValueError, match="row"):
            temporal_profile(torch.zeros(2, 3, 4, 4), 4)


class TestSceneEvaluation:
    def test_window_indices_replicate_ends(self):
        assert window_indices(0, 2, 6) == [0, 0, 0, 1, 2]
        assert window_indices(5, 2, 6) == [3, 4, 5, 5, 5]
        assert window_indices(3, 1, 6) == [2, 3, 4]

    def test_bicubic_model_matches_independent_scores(self):
        hr = synth_scene(3, SceneParams(T=6, H=64, W=64))
        model = build_model(ModelConfig(arch="bicubic"))
        got = evaluate_scene(model, hr, 2, 4)
        ref = bicubic_scene_scores(hr, 4)
        assert [f[0] for f in got.frames] == list(range(6))
        for (_, p1, s1), (_, p2, s2) in zip(got.frames, ref.frames):
            assert abs(p1 - p2) <= 1e-6 and abs(s1 - s2) <= 1e-9

    def test_short_scene_rejected(self):
        hr = Clip(torch.rand(3, 3, 32, 32), "short")
        with pytest.raises(ValueError, match="fewer than T=5"):
            evaluate_scene(build_model(ModelConfig(arch="bicubic")), hr, 2, 4)

    def test_csv_writes_inf_sentinel(self, tmp_path):
        res = [SceneResult("a", [(0, PSNR_INF, 1.0), (1, 30.0, 0.9)]), SceneResult("b", [(0, 20.0, 0.5)])]
        per_frame, summary = write_results(res, tmp_path)
        rows = list(csv.reader(per_frame.open()))
        assert rows[0] == ["scene", "frameIdx", "psnrY", "ssimY"]
        assert rows[1] == ["a", "0", "inf", "1.0"]
        assert float(rows[1][2]) == math.inf
        summ = list(csv.DictReader(summary.open()))
        assert [r["scene"] for r in summ] == ["a", "b", "overall"]
        assert summ[1]["psnrY"] == "20.0" and summ[2]["frames"] == "3"
