import pytest
import torch
import torch.nn.functional as F
from conftest import f64, rand, randn
from torchvision.ops import deform_conv2d

from lgtd.align import AlignedStack, CoarseAligner, FeatureExtractor, deformable_conv
from lgtd.common import zero_
from lgtd.training import grad_check

SEEDS = range(10)


def problem(seed, b=2, c=3, h=7, w=9, cout=4):
    x = randn(b, c, h, w, seed=seed)
    weight = randn(cout, c, 3, 3, seed=seed + 100)
    bias = randn(cout, seed=seed + 200)
    return x, weight, bias


class TestDeformableConv:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_zero_offsets_equal_plain_conv(self, seed):
        x, weight, bias = problem(seed)
        off = torch.zeros(2, 18, 7, 9, dtype=torch.float64)
        ref = F.conv2d(x, weight, bias, padding=1)
        assert (deformable_conv(x, off, weight, bias) - ref).abs().max() <= 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_integer_offset_equals_shift_then_conv(self, seed):
        x, weight, bias = problem(seed)
        off = torch.zeros(2, 9, 2, 7, 9, dtype=torch.float64)
        off[:, :, 1] = 1.0  # (dy, dx) = (0, 1) on every tap
        out = deformable_conv(x, off.flatten(1, 2), weight, bias)
        # shift the zero-extended plane, then a 'valid' conv
        padded = F.pad(x, (1, 2, 1, 1))
        ref = F.conv2d(padded[..., 1:], weight, bias)
        assert (out - ref).abs().max() <= 1e-6
        # cropping before the shift only disagrees in the first column, whose left tap reads x[..., 0]
        shifted = torch.zeros_like(x)
        shifted[..., :-1] = x[..., 1:]
        naive = F.conv2d(shifted, weight, bias, padding=1)
        assert (out - naive)[..., 1:].abs().max() <= 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_torchvision(self, seed):
        x, weight, bias = problem(seed)
        off = randn(2, 18, 7, 9, seed=seed + 300) * 2.5
        ref = deform_conv2d(x, off, weight, bias, padding=1)
        assert torch.allclose(deformable_conv(x, off, weight, bias), ref, atol=1e-10)

    def test_outside_image_gives_bias(self):
        x, weight, bias = problem(0)
        off = torch.full((2, 18, 7, 9), 100.0, dtype=torch.float64)
        out = deformable_conv(x, off, weight, bias)
        assert torch.equal(out, bias.view(1, -1, 1, 1).expand_as(out))

    def test_clamp_limits_displacement(self):
        x, weight, bias = problem(1)
        off = torch.full((2, 18, 7, 9), 50.0, dtype=torch.float64)
        clamped = deformable_conv(x, off, weight, bias, max_disp=2.0)
        ref = deformable_conv(x, torch.full_like(off, 2.0), weight, bias)
        assert torch.equal(clamped, ref)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_offsets_rejected(self, bad):
        x, weight, bias = problem(0)
        off = torch.zeros(2, 18, 7, 9, dtype=torch.float64)
        off[0, 3, 2, 2] = bad
        with pytest.raises(ValueError, match="non-finite"):
            deformable_conv(x, off, weight, bias)

    def test_offset_shape_checked(self):
        x, weight, bias = problem(0)
        with pytest.raises(ValueError, match="offset field"):
            deformable_conv(x, torch.zeros(2, 18, 6, 9, dtype=torch.float64), weight, bias)

    def test_gradients_at_fractional_offsets(self):
        x, weight, bias = problem(3, b=1, c=2, h=6, w=6, cout=2)
        frac = rand(1, 18, 6, 6, seed=9) * 0.6 + 0.2
        whole = torch.randint(-2, 3, (1, 18, 6, 6), generator=torch.Generator().manual_seed(9)).double()
        off = (whole + frac).requires_grad_(True)
        x.requires_grad_(True)
        weight.requires_grad_(True)
        err = grad_check(lambda a, o, w_: deformable_conv(a, o, w_, bias), [x, off, weight])
        assert err < 1e-4


class TestExtractor:
    def test_identical_frames_identical_features(self):
        fe = FeatureExtractor(8, 2)
        frames = torch.rand(1, 1, 3, 16, 16).expand(1, 3, 3, 16, 16)
        out = fe(frames)
        assert out.shape == (1, 3, 8, 16, 16)
        assert torch.equal(out[0, 0], out[0, 1]) and torch.equal(out[0, 0], out[0, 2])

    def test_naive_oracle(self):
        fe = f64(FeatureExtractor(3, 2), seed=1)
        frames = rand(1, 2, 3, 6, 6, seed=2)
        for k in range(2):
            y = F.conv2d(frames[:, k], fe.head.weight, fe.head.bias, padding=1)
            for blk in fe.blocks:
                h = F.relu(F.conv2d(y, blk.body.conv1.weight, blk.body.conv1.bias, padding=1))
                y = y + F.conv2d(h, blk.body.conv2.weight, blk.body.conv2.bias, padding=1)
            assert torch.allclose(fe(frames)[:, k], y, atol=1e-5)


class TestAligner:
    def test_shape(self):
        al = CoarseAligner(4)
        st = al(torch.rand(1, 5, 4, 16, 16))
        assert st.forward.shape == (1, 5, 4, 16, 16) and len(st) == 5

    def test_static_features_at_init(self):
        al = CoarseAligner(4).double()
        feat = randn(1, 1, 4, 8, 8, seed=0).expand(1, 3, 4, 8, 8)
        out = al(feat).forward
        ref = F.conv2d(feat[:, 0], al.dcn.weight, al.dcn.bias, padding=1)
        for k in range(3):
            assert torch.allclose(out[:, k], ref, atol=1e-12)
        assert torch.equal(out[:, 0], out[:, 1]) and torch.equal(out[:, 1], out[:, 2])

    def test_zero_predictor_is_plain_shared_conv(self):
        al = f64(CoarseAligner(3), seed=4)
        zero_(al.coarse.conv2)
        zero_(al.fine.conv2)
        feats = randn(2, 3, 3, 8, 8, seed=5)
        out = al(feats).forward
        for k in range(3):
            assert torch.allclose(out[:, k], F.conv2d(feats[:, k], al.dcn.weight, al.dcn.bias, padding=1), atol=1e-12)

    def test_target_uses_zero_offsets(self):
        al = f64(CoarseAligner(3), seed=6)
        feats = randn(1, 3, 3, 8, 8, seed=7)
        out = al(feats).forward
        ref = F.conv2d(feats[:, 1], al.dcn.weight, al.dcn.bias, padding=1)
        assert torch.allclose(out[:, 1], ref, atol=1e-12)

    def test_reversal_equivariance(self):
        al = f64(CoarseAligner(3), seed=8, std=0.3)
        feats = randn(1, 5, 3, 8, 8, seed=9)
        a = al(feats.flip(1)).forward
        b = al(feats).forward.flip(1)
        assert torch.allclose(a, b, atol=1e-12)
        # the offsets are genuinely non-zero here, so this is not the trivial case
        assert not torch.allclose(al(feats).forward[:, 0], F.conv2d(feats[:, 0], al.dcn.weight, al.dcn.bias,
                                                                    padding=1))

    def test_offsets_respect_bound(self):
        al = f64(CoarseAligner(3, max_disp=1.5), seed=10, std=2.0)
        feats = randn(1, 2, 3, 8, 8, seed=1)
        off = al.offsets(feats[:, 0], feats[:, 1])
        assert off.abs().max() <= 1.5

    def test_backward_view(self):
        st = AlignedStack(torch.rand(1, 5, 2, 4, 4))
        for k in range(5):
            assert torch.equal(st.backward[:, k], st.forward[:, 4 - k])

    def test_gradients(self):
        al = f64(CoarseAligner(2), seed=11, std=0.1)
        feats = randn(1, 3, 2, 8, 8, seed=12, requires_grad=True)
        err = grad_check(lambda f: al(f).forward, [feats], params=list(al.parameters()))
        assert err < 1e-4
