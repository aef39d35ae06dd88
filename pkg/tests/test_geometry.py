import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrbench import scenes
from attrbench.geometry import (
    GeometryEditSpec,
    GeometryError,
    PrototypeInpainter,
    RigidTransform,
    apply_rigid,
    build_transform,
    edit_geometry,
    remaining_mask,
    repaint_prompt,
    soften_mask,
)
from attrbench.prompt import StubLanguageClient


def circle_mask(h=64, w=64, cy=32, cx=32, r=10):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


class TestApplyRigid:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32, 3))
        mask = circle_mask(32, 32, 16, 16, 6)
        tf = RigidTransform(anchor=(16.0, 16.0))
        assert np.array_equal(apply_rigid(img, tf, mask), img)
        assert np.array_equal(apply_rigid(mask, tf, mask, vacate_fill=False), mask)
        label = np.where(mask, 1, 0)
        assert np.array_equal(apply_rigid(label, tf, mask, vacate_fill=0), label)

    def test_half_scale_quarters_area(self):
        mask = circle_mask(64, 64, 32, 32, 14)
        ys, xs = np.nonzero(mask)
        anchor = (ys.mean(), xs.mean())
        tf = RigidTransform(e_x=0.5, e_y=0.5, anchor=anchor)
        out = apply_rigid(mask, tf, mask, vacate_fill=False)
        ratio = out.sum() / mask.sum()
        assert abs(ratio - 0.25) < 0.05 * 0.25 + 0.02

    def test_pure_translation_pixel_exact(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[10:20, 5:15] = True
        tf = RigidTransform(b_x=10.0, anchor=(14.5, 9.5))
        out = apply_rigid(mask, tf, mask, vacate_fill=False)
        expected = np.zeros_like(mask)
        expected[10:20, 15:25] = True
        assert np.array_equal(out, expected)

    def test_out_of_bounds_rejected(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[6:10, 6:10] = True
        tf = RigidTransform(b_x=10.0)
        with pytest.raises(GeometryError, match="out of bounds"):
            apply_rigid(mask, tf, mask, vacate_fill=False)


class TestRemainingMask:
    def test_disjoint_keeps_everything(self):
        m = scenes.BinaryMask(circle_mask(32, 32, 8, 8, 4))
        star = scenes.BinaryMask(circle_mask(32, 32, 24, 24, 4))
        assert np.array_equal(remaining_mask(m, star).bits, m.bits)

    def test_full_overlap_empties(self):
        m = scenes.BinaryMask(circle_mask(32, 32, 16, 16, 5))
        assert remaining_mask(m, m).count == 0

    def test_shifted_block_strip(self):
        bits = np.zeros((32, 32), dtype=bool)
        bits[10:20, 10:20] = True
        shifted = np.zeros_like(bits)
        shifted[10:20, 15:25] = True
        out = remaining_mask(scenes.BinaryMask(bits), scenes.BinaryMask(shifted))
        assert out.count == 50
        assert out.bits[10:20, 10:15].all()

    @given(seed=st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_mask_star(self, seed):
        rng = np.random.default_rng(seed)
        m = scenes.BinaryMask(rng.random((16, 16)) > 0.5)
        small = rng.random((16, 16)) > 0.7
        big = small | (rng.random((16, 16)) > 0.7)
        r_small = remaining_mask(m, scenes.BinaryMask(small))
        r_big = remaining_mask(m, scenes.BinaryMask(big))
        assert r_big.count <= r_small.count
        assert (r_big.bits <= r_small.bits).all()


class TestSoftenMask:
    def test_empty_stays_empty(self):
        out = soften_mask(scenes.BinaryMask(np.zeros((16, 16), dtype=bool)))
        assert (out == 0).all()

    def test_single_pixel_plate(self):
        bits = np.zeros((16, 16), dtype=bool)
        bits[8, 8] = True
        out = soften_mask(scenes.BinaryMask(bits))
        # oracle: dilate by hand, then 3x3 mean by hand
        plate = np.zeros((16, 16))
        plate[6:11, 6:11] = 1.0
        ref = np.zeros((16, 16))
        for y in range(16):
            for x in range(16):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < 16 and 0 <= xx < 16:
                            acc += plate[yy, xx]
                ref[y, x] = acc / 9.0
        assert np.allclose(out, ref, atol=1e-12)
        assert out[8, 8] == 1.0
        assert 0.0 < out[10, 11] < 1.0

    def test_all_ones_saturates(self):
        out = soften_mask(scenes.BinaryMask(np.ones((12, 12), dtype=bool)))
        assert np.allclose(out, 1.0)


class TestRepaintPrompt:
    def test_stub_passthrough(self):
        client = StubLanguageClient(["grass"])
        assert repaint_prompt(client, "horse") == "grass"

    def test_rule_based_fallback(self):
        assert repaint_prompt(None, "circle", fallback="sky") == "sky"

    def test_template_contains_object(self):
        client = StubLanguageClient(["grass"])
        repaint_prompt(client, "horse")
        template, _ = client.calls[0]
        assert "size or position of the horse" in template

    def test_empty_object_name_rejected(self):
        with pytest.raises(GeometryError):
            repaint_prompt(None, "")


def scene_with_mask(seed=3, size=96):
    spec = scenes.random_scene_spec(seed=seed, height=size, width=size)
    image, label, objects = scenes.generate_scene(spec)
    salient = max(objects, key=lambda o: o.area_fraction)
    mask = scenes.BinaryMask(label.classes == salient.class_id)
    return spec, image, label, mask, salient


def default_inpainter():
    protos = np.array([scenes.NAMED_COLORS["gray"], scenes.NAMED_COLORS["red"],
                       scenes.NAMED_COLORS["blue"], scenes.NAMED_COLORS["green"]])
    return PrototypeInpainter(protos)


class TestEditGeometry:
    def test_size_level_04_area(self):
        spec, image, label, mask, obj = scene_with_mask(seed=5)
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("size", 0.4, seed=1),
            default_inpainter(), class_names=spec.class_names,
        )
        ratio = res.mask.count / mask.count
        assert abs(ratio - 0.36) < 0.05

    def test_position_level_02_displacement(self):
        bits = circle_mask(256, 256, 128, 128, 30)
        label = scenes.SegLabel(np.where(bits, 1, 0), 2)
        pixels = np.where(bits[:, :, None], [[scenes.NAMED_COLORS["red"]]], [[scenes.NAMED_COLORS["gray"]]])
        image = scenes.Image(pixels)
        mask = scenes.BinaryMask(bits)
        protos = np.array([scenes.NAMED_COLORS["gray"], scenes.NAMED_COLORS["red"]])
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("position", 0.2, seed=2),
            PrototypeInpainter(protos), class_names=("backdrop", "circle"),
        )
        ys, xs = np.nonzero(mask.bits)
        ys2, xs2 = np.nonzero(res.mask.bits)
        disp = np.hypot(ys2.mean() - ys.mean(), xs2.mean() - xs.mean())
        assert abs(disp - 0.2 * 256) < 2.0

    def test_small_level_near_identity(self):
        spec, image, label, mask, obj = scene_with_mask(seed=7)
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("position", 0.001, seed=0),
            default_inpainter(), class_names=spec.class_names,
        )
        # displacement under a pixel: mask unchanged, no region to repaint
        assert np.array_equal(res.mask.bits, mask.bits)
        assert res.remaining.count == 0
        assert np.array_equal(res.image.pixels, image.pixels)

    def test_label_mask_consistency(self):
        for seed in range(8):
            spec, image, label, mask, obj = scene_with_mask(seed=seed)
            res = edit_geometry(
                image, label, mask, GeometryEditSpec("size", 0.3, seed=seed),
                default_inpainter(), class_names=spec.class_names,
            )
            from_label = res.label.classes == obj.class_id
            inter = (from_label & res.mask.bits).sum()
            union = (from_label | res.mask.bits).sum()
            assert inter == union  # IoU exactly 1.0

    def test_inpainter_no_touch_contract(self):
        spec, image, label, mask, obj = scene_with_mask(seed=9)
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("position", 0.15, seed=4),
            default_inpainter(), class_names=spec.class_names,
        )
        moved = scenes.Image(np.clip(apply_rigid(image.pixels, res.transform, mask.bits), 0, 1))
        untouched = res.soft_mask == 0
        assert np.array_equal(res.image.pixels[untouched], moved.pixels[untouched])

    def test_deterministic_given_seed(self):
        spec, image, label, mask, obj = scene_with_mask(seed=11)
        a = edit_geometry(image, label, mask, GeometryEditSpec("position", 0.2, seed=6),
                          default_inpainter(), class_names=spec.class_names)
        b = edit_geometry(image, label, mask, GeometryEditSpec("position", 0.2, seed=6),
                          default_inpainter(), class_names=spec.class_names)
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.label.classes, b.label.classes)
        assert a.log == b.log

    def test_impossible_move_errors(self):
        bits = circle_mask(64, 64, 32, 32, 20)
        with pytest.raises(GeometryError, match="no direction"):
            build_transform(GeometryEditSpec("position", 0.9, seed=0), bits, (64, 64))

    def test_vacated_area_relabeled_to_background(self):
        spec, image, label, mask, obj = scene_with_mask(seed=13)
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("size", 0.5, seed=3),
            default_inpainter(), class_names=spec.class_names,
        )
        vacated = res.remaining.bits
        assert (res.label.classes[vacated] != obj.class_id).all()

    def test_log_payload_fields(self):
        spec, image, label, mask, obj = scene_with_mask(seed=15)
        res = edit_geometry(
            image, label, mask, GeometryEditSpec("size", 0.2, seed=5),
            default_inpainter(), class_names=spec.class_names,
        )
        for key in ("kind", "level", "e_x", "e_y", "b_x", "b_y", "inpaint_area_fraction", "prompt"):
            assert key in res.log
        assert res.log["e_x"] == pytest.approx(0.8)
