import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from refonly.blueprint_encoder import BlueprintEncoder, encode_blueprint, fuse_blueprint
from refonly.errors import ConfigError, DimensionError
from refonly.gradcheck import perturb_zero_init
from refonly.model import DualCondModel, ModelConfig, predict_eps
from refonly.numerics import Rng
from refonly.prompt_encoder import PromptEncoder, SelfAttentionBlock, encode_prompt, multihead_attention
from refonly.unet import CrossAttention, UNet, cross_attention, timestep_embedding

SMALL = dict(resolution=16, base_width=8, context_dim=16, patch=4, prompt_depth=1, prompt_heads=2, heads=2, T=10)


def random_bp(rng, shape):
    return torch.from_numpy((rng.uniform(shape) > 0.8).astype(np.float32))


class TestBlueprintEncoder:
    @pytest.mark.parametrize("res", [32, 64])
    def test_latent_shape(self, res):
        enc = BlueprintEncoder(4)
        assert enc(torch.zeros(2, 1, res, res)).shape == (2, 4, res // 8, res // 8)

    def test_512_shape_only(self):
        enc = BlueprintEncoder(4)
        with torch.no_grad():
            assert encode_blueprint(torch.zeros(1, 512, 512), enc).shape == (4, 64, 64)

    def test_pixel_mode_keeps_resolution(self):
        assert BlueprintEncoder(3, downsample=1)(torch.zeros(1, 1, 8, 8)).shape == (1, 3, 8, 8)

    def test_zero_output_at_init(self):
        out = BlueprintEncoder(4)(random_bp(Rng(0), (3, 1, 32, 32)))
        assert torch.count_nonzero(out) == 0

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            BlueprintEncoder(4)(torch.zeros(1, 1, 30, 30))

    def test_bad_downsample(self):
        with pytest.raises(ConfigError):
            BlueprintEncoder(4, downsample=3)

    def test_fuse_is_addition(self):
        a, b = torch.randn(1, 4, 4, 4), torch.randn(1, 4, 4, 4)
        assert torch.equal(fuse_blueprint(a, b), a + b)
        with pytest.raises(DimensionError):
            fuse_blueprint(a, torch.zeros(1, 4, 2, 2))


class TestPromptEncoder:
    @pytest.mark.parametrize("res,patch", [(32, 8), (32, 4), (64, 8)])
    def test_token_count(self, res, patch):
        enc = PromptEncoder(res, patch, dim=32, depth=1, heads=4)
        assert encode_prompt(torch.rand(3, res, res), enc).shape == ((res // patch) ** 2 + 1, 32)

    def test_wrong_resolution(self):
        with pytest.raises(DimensionError):
            PromptEncoder(32, 8, 16, 1, 2)(torch.rand(1, 3, 16, 16))

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            SelfAttentionBlock(10, 3)

    def test_attention_matches_loop(self):
        g = torch.Generator().manual_seed(0)
        q, k, v = (torch.randn(5, 8, generator=g, dtype=torch.float64) for _ in range(3))
        k, v = k[:3], v[:3]
        out = multihead_attention(q, k, v, heads=2)
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            w = torch.softmax(q[:, sl] @ k[:, sl].T / 2.0, dim=-1)
            torch.testing.assert_close(out[:, sl], w @ v[:, sl])

    def test_single_token_context_returns_value(self):
        q = torch.randn(7, 4, dtype=torch.float64)
        v = torch.randn(1, 4, dtype=torch.float64)
        torch.testing.assert_close(multihead_attention(q, torch.randn(1, 4, dtype=torch.float64), v, 1),
                                   v.expand(7, 4))


class TestCrossAttention:
    def test_identity_at_init(self):
        p = CrossAttention(8, 16, 2)
        phi = torch.randn(10, 8)
        assert torch.equal(cross_attention(phi, torch.randn(3, 16), p), phi)

    def test_prompt_reaches_values_only(self):
        p = CrossAttention(8, 16, 2)
        torch.nn.init.normal_(p.to_out.weight)
        phi, ctx = torch.randn(10, 8), torch.randn(1, 16)
        # with one context token the attention weights are all 1, so queries cannot matter
        base = cross_attention(phi, ctx, p)
        torch.nn.init.normal_(p.to_q.weight)
        torch.testing.assert_close(cross_attention(phi, ctx, p), base)

    def test_dimension_errors(self):
        p = CrossAttention(8, 16, 2)
        with pytest.raises(DimensionError):
            cross_attention(torch.randn(4, 8), torch.randn(3, 12), p)


class TestUNet:
    def test_timestep_embedding(self):
        e = timestep_embedding(3, 6)
        f = [10000 ** (-i / 3) for i in range(3)]
        expect = [v for fi in f for v in (math.sin(3 * fi), math.cos(3 * fi))]
        np.testing.assert_allclose(e.numpy(), expect, rtol=1e-12)
        with pytest.raises(ConfigError):
            timestep_embedding(1, 5)

    def test_shape_over_random_configs(self):
        rng = Rng(2024)
        for trial in range(100):
            r = rng.spawn(trial)
            levels = int(r.integers(1, 4, 1)[0])
            mults = tuple(int(m) for m in r.integers(1, 3, levels))
            attn = tuple(i for i in range(levels) if r.uniform(1)[0] < 0.5)
            size = 2 ** (levels - 1) * int(r.integers(2, 4, 1)[0])
            cin = int(r.integers(1, 5, 1)[0])
            heads = int([1, 2, 4][r.integers(0, 3, 1)[0]])
            net = UNet(cin, cin, context_dim=8, base_width=8, channel_mults=mults,
                       num_res_blocks=int(r.integers(1, 3, 1)[0]), attn_levels=attn, heads=heads)
            x = torch.randn(2, cin, size, size)
            with torch.no_grad():
                y = net(x, torch.tensor([0, 5]), torch.randn(2, int(r.integers(1, 6, 1)[0]), 8))
            assert y.shape == x.shape, (trial, mults, size)

    def test_indivisible_size(self):
        net = UNet(3, 3, 8, 8, (1, 2, 2))
        with pytest.raises(DimensionError):
            net(torch.zeros(1, 3, 6, 6), torch.tensor([0]), torch.zeros(1, 2, 8))


class TestModelConfig:
    def test_round_trip(self):
        cfg = ModelConfig(**SMALL)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"widht": 3})

    def test_bad_fusion(self):
        with pytest.raises(ConfigError):
            ModelConfig(fusion="gate")

    def test_latent_geometry(self):
        cfg = ModelConfig(resolution=64, latent_mode=True)
        assert (cfg.z_channels, cfg.z_size) == (4, 8)


class TestDualCondModel:
    def test_same_seed_same_weights(self):
        a, b = DualCondModel(ModelConfig(**SMALL), 3), DualCondModel(ModelConfig(**SMALL), 3)
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
        c = DualCondModel(ModelConfig(**SMALL), 4)
        assert not torch.equal(a.unet.conv_in.weight, c.unet.conv_in.weight)

    def test_seed_does_not_touch_global_rng(self):
        torch.manual_seed(0)
        before = torch.rand(1)
        torch.manual_seed(0)
        DualCondModel(ModelConfig(**SMALL), 1)
        assert torch.equal(torch.rand(1), before)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(0, 9))
    def test_neutral_in_both_conditions_at_init(self, seed, t):
        model = DualCondModel(ModelConfig(**SMALL), seed=seed % 7)
        rng = Rng(seed)
        zt = rng.normal((2, 3, 16, 16))
        with torch.no_grad():
            ref = model(zt, t, torch.rand(2, 3, 16, 16), random_bp(rng, (2, 1, 16, 16)))
            for _ in range(3):
                out = model(zt, t, torch.from_numpy(rng.uniform((2, 3, 16, 16)).astype(np.float32)),
                            random_bp(rng, (2, 1, 16, 16)))
                assert torch.equal(out, ref)
        assert torch.count_nonzero(ref) > 0

    def test_conditions_matter_after_perturbation(self):
        model = DualCondModel(ModelConfig(**SMALL), 0)
        perturb_zero_init(model, Rng(1))
        rng = Rng(2)
        zt = rng.normal((1, 3, 16, 16))
        cp = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            a = model(zt, 4, cp, random_bp(rng, (1, 1, 16, 16)))
            b = model(zt, 4, cp, random_bp(rng, (1, 1, 16, 16)))
            c = model(zt, 4, torch.rand(1, 3, 16, 16), random_bp(Rng(2).spawn(), (1, 1, 16, 16)))
        assert not torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_latent_mode_shapes(self):
        model = DualCondModel(ModelConfig(**{**SMALL, "resolution": 32, "latent_mode": True}), 0)
        cbp = model.encode_blueprint(torch.zeros(1, 1, 32, 32))
        assert cbp.shape == (1, 4, 4, 4)
        with torch.no_grad():
            assert model.predict_eps(torch.zeros(1, 4, 4, 4), 0, model.encode_prompt(torch.rand(1, 3, 32, 32)),
                                     cbp).shape == (1, 4, 4, 4)
        assert not any(n.startswith("autoencoder.") for n in model.trainable_parameters())

    def test_concat_fusion(self):
        model = DualCondModel(ModelConfig(**{**SMALL, "fusion": "concat"}), 0)
        with torch.no_grad():
            out = model(torch.zeros(1, 3, 16, 16), 0, torch.rand(1, 3, 16, 16), torch.zeros(1, 1, 16, 16))
        assert out.shape == (1, 3, 16, 16)

    def test_contract_errors(self):
        model = DualCondModel(ModelConfig(**SMALL), 0)
        ctx = model.encode_prompt(torch.rand(1, 3, 16, 16))
        cbp = model.encode_blueprint(torch.zeros(1, 1, 16, 16))
        with pytest.raises(IndexError):
            model.predict_eps(torch.zeros(1, 3, 16, 16), 10, ctx, cbp)
        with pytest.raises(DimensionError):
            model.predict_eps(torch.zeros(1, 3, 8, 8), 0, ctx, cbp)
        with pytest.raises(DimensionError):
            model.encode_blueprint(torch.zeros(1, 1, 32, 32))

    def test_single_sample_wrapper(self):
        model = DualCondModel(ModelConfig(**SMALL), 0)
        with torch.no_grad():
            ctx = model.encode_prompt(torch.rand(1, 3, 16, 16))
            cbp = model.encode_blueprint(torch.zeros(1, 1, 16, 16))
            z = torch.randn(1, 3, 16, 16)
            torch.testing.assert_close(predict_eps(z[0], 3, ctx[0], cbp[0], model),
                                       model.predict_eps(z, 3, ctx, cbp)[0])
