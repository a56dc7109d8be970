import dataclasses
import time

import pytest
import torch
from conftest import MICRO, TINY, f64, rand
from torch import nn

from lgtd.ablation import REGISTRY, variant_config
from lgtd.data import bicubic_upsample
from lgtd.model import (LGTD, ConfigError, Layer, ModelConfig, build_model, flops_estimate, layer_specs,
                        load_checkpoint, param_count, save_checkpoint)
from lgtd.training import grad_check, l1_loss


def clip_for(cfg, h=16, w=16, seed=0, dtype=torch.float32):
    return rand(1, cfg.frames, 3, h, w, seed=seed, dtype=dtype)


class TestForward:
    def test_full_model_shape(self):
        out = LGTD(ModelConfig())(torch.rand(5, 3, 64, 64))
        assert out.shape == (1, 3, 256, 256)
        assert out.min() >= 0 and out.max() <= 1

    def test_zero_init_is_reconstruction_of_guide_feature(self, micro_cfg):
        torch.manual_seed(0)
        m = LGTD(micro_cfg)
        frames = clip_for(micro_cfg)
        centre = frames[:, micro_cfg.n]
        with torch.no_grad():
            ref = m.recon(m.guide_conv(centre), bicubic_upsample(centre, 4))
            assert torch.equal(m(frames), ref)

    def test_zero_init_ignores_neighbours(self, micro_cfg):
        m = LGTD(micro_cfg)
        a = clip_for(micro_cfg, seed=1)
        b = a.clone()
        b[:, 0] = torch.rand_like(b[:, 0])
        with torch.no_grad():
            assert torch.equal(m(a), m(b))

    def test_model5_and_full_share_interface_shapes(self, micro_cfg):
        frames = clip_for(micro_cfg)
        traces = []
        for name in ("Full", "Model-5"):
            trace = {}
            with torch.no_grad():
                build_model(variant_config(micro_cfg, name))(frames, trace)
            traces.append(trace)
        assert traces[0] == traces[1]
        assert traces[0]["F_T"] == (1, 5, 16, 16, 16)
        assert traces[0]["I_SR"] == (1, 3, 64, 64)

    @pytest.mark.parametrize("name", list(REGISTRY))
    def test_every_variant_same_output_shape(self, micro_cfg, name):
        with torch.no_grad():
            out = build_model(variant_config(micro_cfg, name))(clip_for(micro_cfg))
        assert out.shape == (1, 3, 64, 64)

    def test_disabled_stdm_passes_guide_feature(self, micro_cfg):
        cfg = variant_config(micro_cfg, "Model-2")
        m = build_model(cfg)
        assert not hasattr(m, "stdm") and not hasattr(m, "target_conv")
        trace = {}
        m(clip_for(cfg), trace)
        assert "g_s" not in trace and trace["F_s"] == trace["F_t"]

    def test_wrong_clip_length_rejected(self, micro_cfg):
        with pytest.raises(ValueError, match="2N\\+1"):
            LGTD(micro_cfg)(torch.rand(1, 3, 3, 16, 16))

    def test_indivisible_size_rejected(self, micro_cfg):
        with pytest.raises(ValueError, match="divisible by 8"):
            LGTD(micro_cfg)(torch.rand(1, 5, 3, 12, 16))

    def test_bicubic_baseline(self):
        cfg = ModelConfig(arch="bicubic")
        frames = torch.rand(1, 5, 3, 8, 8)
        m = build_model(cfg)
        assert not list(m.parameters()) and param_count(cfg) == 0
        assert torch.equal(m(frames), bicubic_upsample(frames[:, 2], 4).clamp(0, 1))


class TestConfigValidation:
    @pytest.mark.parametrize("changes, field", [
        (dict(use_stdm=False, use_ltdm=False), "use_ltdm"),
        (dict(stdm_mode="sum"), "stdm_mode"),
        (dict(ltdm_direction="sideways"), "ltdm_direction"),
        (dict(ltdm_mode="concat", ltdm_direction="forward"), "ltdm_direction"),
        (dict(use_ltdm=False, ltdm_direction="forward"), "ltdm_direction"),
        (dict(recon_mode="dense"), "recon_mode"),
        (dict(scale=3), "scale"),
        (dict(channels=6, msa_heads=4), "msa_heads"),
        (dict(channels=8), "ca_reduction"),
        (dict(alpha=-0.5), "alpha"),
        (dict(n=0), "model.n"),
    ])
    def test_offending_switch_named(self, changes, field):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**changes).validate()

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="model.depth"):
            ModelConfig.from_dict({"depth": 3})

    def test_registry_covers_every_variant(self):
        assert list(REGISTRY) == ["Full"] + [f"Model-{i}" for i in range(1, 12)]
        with pytest.raises(KeyError):
            variant_config(MICRO, "Model-12")


class TestStatistics:
    def test_hand_count_single_conv(self):
        layer = Layer("c", "conv", 3, 16, 3, 1, 1)
        assert layer.params == 3 * 16 * 9 + 16 == 448
        assert sum(p.numel() for p in nn.Conv2d(3, 16, 3).parameters()) == 448

    def test_conv_flops_formula(self):
        assert Layer("c", "conv", 3, 16, 3, 10, 20).flops == 2 * 3 * 16 * 9 * 10 * 20

    @pytest.mark.parametrize("name", list(REGISTRY))
    def test_analytic_count_matches_instantiated(self, name):
        for base in (MICRO, ModelConfig()):
            cfg = variant_config(base, name)
            assert param_count(cfg) == sum(p.numel() for p in build_model(cfg).parameters())

    def test_analytic_names_match_modules(self):
        m = LGTD(MICRO)
        modules = dict(m.named_modules())
        for layer in layer_specs(MICRO, 16, 16):
            if layer.kind == "conv":
                assert isinstance(modules[layer.name], nn.Conv2d), layer.name
                conv = modules[layer.name]
                assert (conv.in_channels, conv.out_channels, conv.kernel_size[0]) == (layer.cin, layer.cout, layer.k)

    def test_doubling_height_doubles_conv_flops(self):
        cfg = ModelConfig()

        def spatial_conv_flops(h, w):
            # channel-attention 1x1 convs act on the pooled 1x1 map and do not scale
            return sum(l.flops for l in layer_specs(cfg, h, w) if l.kind == "conv" and ".ca." not in l.name)

        assert spatial_conv_flops(320, 160) == 2 * spatial_conv_flops(160, 160)
        total = flops_estimate(cfg, 320, 160) / flops_estimate(cfg, 160, 160)
        assert 1.999999 < total <= 2.0

    def test_micro_reference_values(self):
        # regression pins for the analytic model, verified equal to the instantiated counts above
        assert param_count(ModelConfig()) == 1_882_299
        assert param_count(MICRO) == 115_641


class TestCheckpoint:
    def test_round_trip_forward_bit_identical(self, micro_cfg, tmp_path):
        torch.manual_seed(3)
        m = LGTD(micro_cfg)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        opt = torch.optim.Adam(m.parameters(), lr=1e-3)
        frames = clip_for(micro_cfg)
        loss = l1_loss(m(frames), torch.rand(1, 3, 64, 64))
        loss.backward()
        opt.step()
        with torch.no_grad():
            before = m(frames)
        path = save_checkpoint(tmp_path / "c.safetensors", m, micro_cfg, opt, epoch=7)
        ck = load_checkpoint(path)
        assert ck.config == micro_cfg and ck.epoch == 7
        restored = ck.model()
        with torch.no_grad():
            assert torch.equal(restored(frames), before)
        for (k, a), b in zip(m.state_dict().items(), restored.state_dict().values()):
            assert torch.equal(a, b), k
        opt2 = torch.optim.Adam(restored.parameters(), lr=1e-3)
        opt2.load_state_dict(ck.optimizer)
        sd1, sd2 = opt.state_dict()["state"], opt2.state_dict()["state"]
        assert sd1.keys() == sd2.keys()
        for i in sd1:
            for key in ("step", "exp_avg", "exp_avg_sq"):
                assert torch.equal(torch.as_tensor(sd1[i][key]), torch.as_tensor(sd2[i][key]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.safetensors")

    def test_foreign_file_rejected(self, tmp_path):
        from safetensors.torch import save_file

        save_file({"w": torch.zeros(2)}, str(tmp_path / "x.safetensors"))
        with pytest.raises(ValueError, match="not an LGTD checkpoint"):
            load_checkpoint(tmp_path / "x.safetensors")


class TestTraining:
    @pytest.mark.parametrize("name", list(REGISTRY))
    def test_every_variant_takes_an_optimizer_step(self, micro_cfg, name):
        torch.manual_seed(0)
        m = build_model(variant_config(micro_cfg, name))
        opt = torch.optim.Adam(m.parameters(), lr=1e-3)
        before = [p.detach().clone() for p in m.parameters()]
        loss = l1_loss(m(clip_for(micro_cfg)), torch.rand(1, 3, 64, 64))
        loss.backward()
        assert torch.isfinite(loss)
        opt.step()
        assert any(not torch.equal(a, p) for a, p in zip(before, m.parameters()))


def test_micro_end_to_end_gradients():
    start = time.perf_counter()
    cfg = dataclasses.replace(TINY)
    m = f64(LGTD(cfg), seed=0, std=0.15)
    frames = rand(1, 3, 3, 8, 8, seed=1, requires_grad=True)
    err = grad_check(lambda x: m(x, clamp=False), [frames], params=list(m.parameters()), max_coords=16)
    assert err < 1e-4
    assert time.perf_counter() - start < 60
