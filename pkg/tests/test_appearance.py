import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attrbench import scenes
from attrbench.appearance import (
    AppearanceError,
    EditConfig,
    blend_latents,
    downsample_mask,
    edit_appearance,
    guided_update,
    inject_features,
    inject_self_attention,
    mask_energy,
    reconstruct,
)
from attrbench.diffusion import LinearDenoiser, make_schedule, train_toy_denoiser, ToyDenoiserConfig
from attrbench.prompt import (
    DEFAULT_VOCAB,
    AttributeKind,
    EditRequest,
    Tokenizer,
    caption_for_object,
    decompose_caption,
    edit_attribute,
)

F64 = torch.float64


def cfg(**kw):
    return EditConfig(**kw)


class TestInjection:
    def make(self, val_a, val_b):
        a = {"up0": torch.full((2, 4, 4), float(val_a), dtype=F64)}
        b = {"up0": torch.full((2, 4, 4), float(val_b), dtype=F64)}
        return a, b

    def test_theta_one_always_recon(self):
        rec, edit = self.make(1, 2)
        c = cfg(theta_f=1.0)
        for t in range(1, 51):
            assert inject_features(rec, edit, t, c)["up0"][0, 0, 0] == 1

    def test_theta_zero_never_except_t0(self):
        rec, edit = self.make(1, 2)
        c = cfg(theta_f=0.0)
        for t in range(1, 51):
            assert inject_features(rec, edit, t, c)["up0"][0, 0, 0] == 2
        assert inject_features(rec, edit, 0, c)["up0"][0, 0, 0] == 1

    def test_sweep_counts(self):
        rec, edit = self.make(1, 2)
        c = cfg(theta_f=0.8, theta_a=0.5)
        n_feat = sum(
            inject_features(rec, edit, t, c)["up0"][0, 0, 0].item() == 1
            for t in range(1, 51)
        )
        n_attn = sum(
            inject_self_attention(rec, edit, t, c)["up0"][0, 0, 0].item() == 1
            for t in range(1, 51)
        )
        assert n_feat == 40
        assert n_attn == 25

    def test_equal_branches_idempotent(self):
        rec, _ = self.make(3, 3)
        edit = {"up0": rec["up0"].clone()}
        c = cfg(theta_a=0.5)
        for t in (1, 26, 50):
            out = inject_self_attention(rec, edit, t, c)
            assert torch.equal(out["up0"], rec["up0"])

    def test_shape_mismatch_rejected(self):
        rec = {"up0": torch.zeros(2, 4, 4, dtype=F64)}
        edit = {"up0": torch.zeros(2, 3, 3, dtype=F64)}
        with pytest.raises(AppearanceError):
            inject_features(rec, edit, 1, cfg())


class TestMaskEnergy:
    def test_perfect_concentration_zero(self):
        attn = torch.zeros(3, 4, 4, dtype=F64)
        mask = torch.zeros(4, 4, dtype=F64)
        mask[1:3, 1:3] = 1.0
        attn[0][mask > 0] = 1.0  # edit token takes all attention inside mask
        attn[1][mask == 0] = 1.0
        attn[2] += 1e-9  # keep sums positive everywhere
        assert float(mask_energy(attn, [0], mask)) == pytest.approx(0.0, abs=1e-12)

    def test_half_ratio_quarter_energy(self):
        attn = torch.zeros(2, 4, 4, dtype=F64)
        attn[0] = 0.5
        attn[1] = 0.5
        mask = torch.ones(4, 4, dtype=F64)
        assert float(mask_energy(attn, [0], mask)) == pytest.approx(0.25, abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        g = torch.Generator().manual_seed(0)
        attn = torch.rand(5, 6, 6, generator=g, dtype=F64) + 0.01
        mask = (torch.rand(6, 6, generator=g, dtype=F64) > 0.5).to(F64)
        if mask.sum() == 0:
            mask[0, 0] = 1.0
        got = float(mask_energy(attn, [1, 3], mask))
        count = int((mask >= 0.5).sum())
        acc = 0.0
        for y in range(6):
            for x in range(6):
                tot = sum(float(attn[n, y, x]) for n in range(5))
                ratio = (float(attn[1, y, x]) + float(attn[3, y, x])) / tot
                acc += float(mask[y, x]) * ratio
        ref = (1.0 - min(acc / count, 1.0)) ** 2
        assert abs(got - ref) < 1e-8

    def test_multi_head_mean(self):
        g = torch.Generator().manual_seed(1)
        attn = torch.rand(4, 3, 5, 5, generator=g, dtype=F64) + 0.1
        mask = torch.ones(5, 5, dtype=F64)
        a = float(mask_energy(attn, [0], mask))
        b = float(mask_energy(attn.mean(dim=0), [0], mask))
        assert a == pytest.approx(b, abs=1e-12)

    def test_empty_mask_errors(self):
        attn = torch.ones(2, 4, 4, dtype=F64)
        with pytest.raises(AppearanceError, match="empty mask"):
            mask_energy(attn, [0], torch.zeros(4, 4, dtype=F64))

    def test_zero_attention_names_location(self):
        attn = torch.zeros(2, 4, 4, dtype=F64)
        attn[:, 0, 0] = 1.0
        mask = torch.ones(4, 4, dtype=F64)
        with pytest.raises(AppearanceError, match=r"\(0, 1\)"):
            mask_energy(attn, [0], mask)

    @given(scale=st.floats(min_value=0.01, max_value=100.0), seed=st.integers(0, 50))
    @settings(max_examples=40, deadline=None)
    def test_rescaling_invariance_and_range(self, scale, seed):
        g = torch.Generator().manual_seed(seed)
        attn = torch.rand(4, 5, 5, generator=g, dtype=F64) + 0.05
        mask = (torch.rand(5, 5, generator=g, dtype=F64) > 0.4).to(F64)
        if (mask >= 0.5).sum() == 0:
            mask[2, 2] = 1.0
        base = float(mask_energy(attn, [0, 2], mask))
        scaled = float(mask_energy(attn * scale, [0, 2], mask))
        assert base == pytest.approx(scaled, rel=1e-10)
        assert 0.0 <= base <= 1.0


class TestGuidedUpdate:
    def test_initial_below_gamma_zero_iterations(self):
        den = LinearDenoiser(channels=3, seed=2)
        z = torch.randn(3, 5, 5, dtype=F64)
        mask = torch.ones(5, 5, dtype=F64)
        out, l_value, iters = guided_update(
            z, den, [1, 2, 3], [0], mask, 3, cfg(gamma=2.0)
        )
        assert iters == 0
        assert torch.equal(out, z)

    def test_eta_zero_hits_iteration_cap(self):
        den = LinearDenoiser(channels=3, seed=2)
        z = torch.randn(3, 5, 5, dtype=F64)
        mask = torch.ones(5, 5, dtype=F64)
        out, l_value, iters = guided_update(
            z, den, [1, 2, 3], [0], mask, 3, cfg(eta=0.0, gamma=1e-9, max_guidance_iters=4)
        )
        assert iters == 4
        assert torch.equal(out, z)

    def test_single_update_matches_hand_derived_gradient(self):
        # synthetic attention: softmax over tokens of (w_k · z_p); the energy
        # gradient has the closed form 2(1-инner)·(-M_p/ΣM)·Σ_j σ_j(w_j - Σ_n σ_n w_n)
        den = LinearDenoiser(channels=3, seed=7)
        tokens = [5, 9, 13]
        g = torch.Generator().manual_seed(4)
        z = torch.randn(3, 4, 4, generator=g, dtype=F64)
        mask = torch.zeros(4, 4, dtype=F64)
        mask[1:3, 1:3] = 1.0
        eta = 0.7
        out, l_value, iters = guided_update(
            z, den, tokens, [1], mask, 2, cfg(eta=eta, gamma=1e-12, max_guidance_iters=1)
        )
        assert iters == 1

        dirs = torch.stack([den.token_direction(k) for k in tokens])  # (3 tokens, C)
        logits = torch.einsum("nc,chw->nhw", dirs, z)
        sig = torch.softmax(logits, dim=0)
        count = float((mask >= 0.5).sum())
        inner = float((mask * sig[1]).sum() / count)
        grad = torch.zeros_like(z)
        for y in range(4):
            for x in range(4):
                sbar = sum(float(sig[n, y, x]) * dirs[n] for n in range(3))
                dratio = float(sig[1, y, x]) * (dirs[1] - sbar)
                grad[:, y, x] = 2.0 * (1.0 - inner) * (-float(mask[y, x]) / count) * dratio
        expected = z - eta * grad
        assert (out - expected).abs().max().item() < 1e-6


class TestBlend:
    def test_all_ones_identity(self):
        a, b = torch.randn(3, 4, 4, dtype=F64), torch.randn(3, 4, 4, dtype=F64)
        out = blend_latents(a, b, torch.ones(4, 4))
        assert torch.equal(out, a)

    def test_all_zeros_replacement(self):
        a, b = torch.randn(3, 4, 4, dtype=F64), torch.randn(3, 4, 4, dtype=F64)
        out = blend_latents(a, b, torch.zeros(4, 4))
        assert torch.equal(out, b)

    @given(seed=st.integers(0, 200))
    @settings(max_examples=60, deadline=None)
    def test_elementwise_and_idempotent(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(2, 5, 5, generator=g, dtype=F64)
        b = torch.randn(2, 5, 5, generator=g, dtype=F64)
        m = torch.rand(5, 5, generator=g) > 0.5
        out = blend_latents(a, b, m)
        for y in range(5):
            for x in range(5):
                src = a if m[y, x] else b
                assert torch.equal(out[:, y, x], src[:, y, x])
        again = blend_latents(out, b, m)
        assert torch.equal(again, out)

    def test_shape_mismatch(self):
        with pytest.raises(AppearanceError):
            blend_latents(
                torch.zeros(3, 4, 4, dtype=F64),
                torch.zeros(3, 5, 5, dtype=F64),
                torch.ones(4, 4),
            )


def _toy_scene(size=32, color="red"):
    spec = scenes.SceneSpec(
        height=size,
        width=size,
        num_classes=4,
        shapes=(scenes.ShapePlacement("square", 2, color, (16.0, 16.0), (8.0, 8.0)),),
    )
    image, label, objects = scenes.generate_scene(spec)
    mask = scenes.BinaryMask(label.classes == 2)
    return image, label, mask, objects[0]


def _trained_toy(steps=60, size=32, t_steps=10):
    tok = Tokenizer(DEFAULT_VOCAB)
    data = []
    for seed in range(6):
        spec = scenes.random_scene_spec(seed=seed, height=size, width=size)
        img, lab, objs = scenes.generate_scene(spec)
        cap = caption_for_object(objs[0].color_name, objs[0].class_name)
        data.append((img, tok.encode(cap), lab))
    config = ToyDenoiserConfig(
        image_size=size, base_channels=8, num_classes=4, emb_dim=8, T=t_steps, vocab=DEFAULT_VOCAB
    )
    return train_toy_denoiser(config, data, steps=steps, seed=11)


def _noop_request(caption):
    toks = tuple(caption.split())
    return EditRequest(toks, toks, (((1, 2), (1, 2)),), AttributeKind.COLOR, "red")


class TestEditAppearance:
    def test_noop_edit_equals_reconstruction(self):
        image, label, mask, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        den = LinearDenoiser(channels=3, seed=3, attn_scale=0.0)
        config = cfg(T=10)
        result = edit_appearance(image, label, mask, _noop_request(caption), den, config)
        diff = np.abs(result.edited.pixels - result.recon.pixels).max()
        assert diff < 1e-4

    def test_branches_bitexact_with_eta_zero_gamma_inf(self):
        image, label, mask, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        den = _trained_toy()
        config = cfg(T=10, eta=0.0, gamma=float("inf"))
        result = edit_appearance(image, label, mask, _noop_request(caption), den, config)
        assert torch.equal(result.edited_latent, result.recon_latent)
        assert np.array_equal(result.edited.pixels, result.recon.pixels)

    def test_outside_mask_latents_track_reconstruction(self):
        image, label, mask, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        parts = decompose_caption(caption)
        req = edit_attribute(parts, AttributeKind.COLOR, "blue")
        den = _trained_toy()
        config = cfg(T=10, max_guidance_iters=3)
        result = edit_appearance(image, label, mask, req, den, config)
        _, m_bin = downsample_mask(mask, result.edited_latent.shape[-2:])
        outside = ~m_bin
        diff = (result.edited_latent - result.recon_latent)[:, outside]
        assert diff.abs().max().item() == 0.0
        assert len(result.state.steps) == 10

    def test_global_edit_skips_guidance_and_blend(self):
        image, label, mask, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        parts = decompose_caption(caption)
        req = edit_attribute(parts, AttributeKind.WEATHER, "night")
        den = _trained_toy()
        result = edit_appearance(image, label, mask, req, den, cfg(T=10))
        assert result.state.steps == []

    def test_reconstruct_matches_recon_branch(self):
        image, label, mask, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        den = _trained_toy()
        recon = reconstruct(image, label, caption, den, cfg(T=10))
        result = edit_appearance(image, label, mask, _noop_request(caption), den, cfg(T=10, eta=0.0))
        assert np.allclose(recon.pixels, result.recon.pixels, atol=1e-12)

    def test_empty_mask_rejected(self):
        image, label, _, obj = _toy_scene()
        caption = caption_for_object(obj.color_name, obj.class_name)
        empty = scenes.BinaryMask(np.zeros((32, 32), dtype=bool))
        with pytest.raises(AppearanceError):
            edit_appearance(
                image, label, empty, _noop_request(caption), LinearDenoiser(3), cfg(T=10)
            )


class TestDownsampleMask:
    def test_area_average_and_threshold(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[0:4, 0:4] = True  # exactly one latent cell at factor 4
        bits[0:2, 4:8] = True  # half of another cell
        cont, binary = downsample_mask(scenes.BinaryMask(bits), (2, 2))
        assert cont[0, 0] == 1.0
        assert cont[0, 1] == 0.5
        assert binary[0, 0].item() is True
        assert binary[0, 1].item() is True  # 0.5 counts (>= 0.5)
        assert binary[1, 1].item() is False
