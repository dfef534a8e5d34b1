import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridseg.data import (
    BoundingBox,
    Sample,
    SynthConfig,
    augment,
    box_fill_mask,
    box_from_mask,
    flip_sample,
    load_dataset,
    resize_sample,
    reversed_box_mask,
    save_dataset,
    synthesize_dataset,
    synthesize_sample,
)


@st.composite
def boxes_with_shape(draw):
    h = draw(st.integers(min_value=2, max_value=24))
    w = draw(st.integers(min_value=2, max_value=24))
    r0 = draw(st.integers(min_value=0, max_value=h - 1))
    r1 = draw(st.integers(min_value=r0 + 1, max_value=h))
    c0 = draw(st.integers(min_value=0, max_value=w - 1))
    c1 = draw(st.integers(min_value=c0 + 1, max_value=w))
    return BoundingBox(r0, c0, r1, c1), h, w


class TestBoxFromMask:
    def test_single_pixel(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[3, 4] = 1
        assert box_from_mask(mask) == BoundingBox(3, 4, 4, 5)

    def test_full_mask(self):
        assert box_from_mask(np.ones((8, 8), dtype=np.uint8)) == BoundingBox(0, 0, 8, 8)

    def test_rectangular_support(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:5, 3:7] = 1
        assert box_from_mask(mask) == BoundingBox(2, 3, 5, 7)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError, match="empty mask"):
            box_from_mask(np.zeros((4, 4), dtype=np.uint8))


class TestBoxMasks:
    def test_full_box_reversed_is_zero(self):
        assert reversed_box_mask(BoundingBox(0, 0, 5, 7), 5, 7).sum() == 0

    def test_single_cell(self):
        rev = reversed_box_mask(BoundingBox(1, 1, 2, 2), 3, 3)
        assert rev[1, 1] == 0 and rev.sum() == 8
        fill = box_fill_mask(BoundingBox(1, 1, 2, 2), 3, 3)
        assert fill[1, 1] == 1 and fill.sum() == 1

    def test_full_box_fill_is_ones(self):
        assert box_fill_mask(BoundingBox(0, 0, 4, 4), 4, 4).all()

    def test_out_of_bounds_raises(self):
        with pytest.raises(ValueError):
            reversed_box_mask(BoundingBox(0, 0, 5, 5), 4, 4)
        with pytest.raises(ValueError):
            box_fill_mask(BoundingBox(0, 0, 5, 5), 4, 4)

    @given(boxes_with_shape())
    def test_complement_identity(self, bhw):
        box, h, w = bhw
        rev = reversed_box_mask(box, h, w)
        fill = box_fill_mask(box, h, w)
        assert ((rev + fill) == 1).all()
        assert int(rev.sum()) + box.area == h * w

    @given(boxes_with_shape())
    def test_box_roundtrip_through_fill(self, bhw):
        box, h, w = bhw
        assert box_from_mask(box_fill_mask(box, h, w)) == box


class TestSynthesize:
    def test_determinism(self):
        cfg = SynthConfig(image_size=48, n_samples=5, seed=7)
        a = synthesize_dataset(cfg)
        b = synthesize_dataset(cfg)
        for sa, sb in zip(a, b):
            assert sa.id == sb.id
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.strong_mask, sb.strong_mask)
            assert sa.box == sb.box

    def test_high_contrast_threshold_recovers_mask(self):
        # with full contrast and essentially unsmoothed noise the mass sits far
        # above 0.5 wherever the true mask is on
        cfg = SynthConfig(image_size=64, n_samples=1, mass_radius_range=(0.15, 0.25),
                          mass_contrast=0.99, texture_scale=1e-9, seed=3)
        rng = np.random.default_rng(cfg.seed)
        for _ in range(5):
            s = synthesize_sample(rng, cfg)
            thresholded = s.image >= 0.5
            assert thresholded[s.strong_mask == 1].all()

    def test_mask_inside_box_and_labels_consistent(self):
        for s in synthesize_dataset(SynthConfig(image_size=48, n_samples=20, seed=1)):
            rev = reversed_box_mask(s.box, s.height, s.width)
            assert not (s.strong_mask & rev).any()
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_mean_foreground_fraction(self):
        # oracle: semi-axes are independent U(r0*S, r1*S), so the expected
        # pixel fraction is E[pi*a*b]/S^2 = pi*((r0+r1)/2)^2
        cfg = SynthConfig(image_size=64, n_samples=200, seed=11)
        r0, r1 = cfg.mass_radius_range
        expected = math.pi * ((r0 + r1) / 2.0) ** 2
        fractions = [s.strong_mask.mean() for s in synthesize_dataset(cfg)]
        assert abs(np.mean(fractions) - expected) <= 0.2 * expected


class TestDatasetIO:
    def test_roundtrip_strong_samples_derive_boxes(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_samples=3, seed=5)
        samples = synthesize_dataset(cfg)
        save_dataset(samples, tmp_path, synth_config=cfg)
        (tmp_path / "boxes.csv").unlink()  # force derivation from masks
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 3
        for orig, got in zip(samples, loaded):
            assert got.supervision == "strong"
            assert np.array_equal(got.strong_mask, orig.strong_mask)
            assert got.box == box_from_mask(got.strong_mask)
            assert np.abs(got.image - orig.image).max() <= 0.5 / 255.0

    def test_box_only_sample_is_weak(self, tmp_path):
        samples = synthesize_dataset(SynthConfig(image_size=32, n_samples=2, seed=5))
        save_dataset(samples, tmp_path)
        (tmp_path / "masks" / "synth_0001.png").unlink()
        loaded = load_dataset(tmp_path)
        assert [s.supervision for s in loaded] == ["strong", "weak"]
        assert loaded[1].strong_mask is None and loaded[1].box is not None

    def test_empty_directory(self, tmp_path):
        assert load_dataset(tmp_path) == []

    def test_unlabelled_image_raises_with_id(self, tmp_path):
        samples = synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=5))
        save_dataset(samples, tmp_path)
        (tmp_path / "masks" / "synth_0000.png").unlink()
        (tmp_path / "boxes.csv").unlink()
        with pytest.raises(ValueError, match="synth_0000"):
            load_dataset(tmp_path)

    def test_mismatched_mask_shape_raises(self, tmp_path):
        from PIL import Image

        samples = synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=5))
        save_dataset(samples, tmp_path)
        bad = Image.new("L", (16, 16), 255)
        bad.save(tmp_path / "masks" / "synth_0000.png")
        with pytest.raises(ValueError, match="shape"):
            load_dataset(tmp_path)


@pytest.fixture(scope="module")
def sample():
    return synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=9))[0]


class TestAugment:
    @pytest.mark.parametrize("h,v", [(True, False), (False, True), (True, True)])
    def test_flip_is_involution(self, sample, h, v):
        back = flip_sample(flip_sample(sample, h, v), h, v)
        assert np.array_equal(back.image, sample.image)
        assert np.array_equal(back.strong_mask, sample.strong_mask)
        assert back.box == sample.box

    def test_box_reflection(self):
        image = np.zeros((10, 10), dtype=np.float32)
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[2:5, 3:7] = 1
        s = Sample("t", image, mask, BoundingBox(2, 3, 5, 7), "strong")
        flipped = flip_sample(s, True, False)
        # cols map to (W - col_max, W - col_min) = (3, 7): symmetric placement
        assert flipped.box == BoundingBox(2, 3, 5, 7)
        assert np.array_equal(flipped.strong_mask, mask[:, ::-1])

    def test_foreground_count_invariant(self, sample):
        rng = np.random.default_rng(0)
        for _ in range(8):
            out = augment(sample, rng)
            assert out.strong_mask.sum() == sample.strong_mask.sum()

    def test_augment_actually_flips_sometimes(self):
        sample = synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=2))[0]
        rng = np.random.default_rng(4)
        unchanged = sum(np.array_equal(augment(sample, rng).image, sample.image)
                        for _ in range(40))
        assert 0 < unchanged < 40  # P(no flip) = 0.25


class TestResize:
    def test_identity(self):
        s = synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=9))[0]
        out = resize_sample(s, 32)
        assert np.array_equal(out.image, s.image)
        assert out.box == s.box

    def test_mask_stays_binary(self):
        s = synthesize_dataset(SynthConfig(image_size=48, n_samples=1, seed=9))[0]
        for size in (24, 96):
            out = resize_sample(s, size)
            assert set(np.unique(out.strong_mask)) <= {0, 1}
            assert out.image.shape == (size, size)

    def test_box_never_clips_foreground(self):
        # property sweep over the generator, both up- and downscaling
        samples = synthesize_dataset(SynthConfig(image_size=48, n_samples=100, seed=21))
        for s in samples:
            for size in (24, 64):
                out = resize_sample(s, size)
                if not out.strong_mask.any():
                    continue
                tight = box_from_mask(out.strong_mask)
                assert tight.row_min >= out.box.row_min
                assert tight.col_min >= out.box.col_min
                assert tight.row_max <= out.box.row_max
                assert tight.col_max <= out.box.col_max

    def test_too_small_target_raises(self):
        s = synthesize_dataset(SynthConfig(image_size=32, n_samples=1, seed=9))[0]
        with pytest.raises(ValueError):
            resize_sample(s, 8)


class TestSampleInvariants:
    def test_strong_requires_mask(self):
        with pytest.raises(ValueError, match="mask"):
            Sample("x", np.zeros((4, 4), dtype=np.float32), None, BoundingBox(0, 0, 2, 2),
                   "strong")

    def test_weak_requires_box(self):
        with pytest.raises(ValueError, match="box"):
            Sample("x", np.zeros((4, 4), dtype=np.float32), None, None, "weak")

    def test_mask_outside_box_rejected(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = 1
        with pytest.raises(ValueError, match="outside box"):
            Sample("x", np.zeros((4, 4), dtype=np.float32), mask, BoundingBox(2, 2, 4, 4),
                   "strong")

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="foreground"):
            Sample("x", np.zeros((4, 4), dtype=np.float32),
                   np.zeros((4, 4), dtype=np.uint8), None, "strong")
