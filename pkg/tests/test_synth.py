import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynssd.imaging import BoundingBox, hflip, scale_and_pad
from dynssd.synth import (
    Annotation,
    DatasetManifest,
    SceneConfig,
    SizeBand,
    annotate,
    apply_plan,
    augment,
    band_index,
    blob_weight,
    draw_plan,
    generate_scene,
    mask_box,
    relative_size,
    stratify,
    write_split,
    zoom_center,
)


def ann_with_size(r, i=0):
    return Annotation(f"img{i}", [BoundingBox(0, 0, 1, 1)], [r])


class TestRelativeSize:
    def test_full_image(self):
        assert relative_size(BoundingBox(0, 0, 64, 48), 48, 64) == 1.0

    def test_half(self):
        assert relative_size(BoundingBox(10, 10, 42, 34), 48, 64) == pytest.approx(0.5)

    def test_scaled_duplicate(self):
        rng = np.random.default_rng(9)
        img = rng.random((128, 128, 3))
        box = BoundingBox(30, 40, 70, 62)
        _, (moved,) = scale_and_pad(img, [box], 0.75)
        assert relative_size(moved, 128, 128) == pytest.approx(0.75 * relative_size(box, 128, 128), abs=1e-12)


class TestScene:
    def test_forced_negative(self):
        img, ann = generate_scene(3, n_polyps=0)
        assert not ann.is_positive
        assert ann.boxes == [] and ann.relative_sizes == []
        assert img.shape == (128, 128, 3)

    def test_deterministic(self):
        a_img, a_ann = generate_scene(1234)
        b_img, b_ann = generate_scene(1234)
        assert a_img.tobytes() == b_img.tobytes()
        assert a_ann == b_ann

    def test_different_seeds_differ(self):
        assert generate_scene(1)[0].tobytes() != generate_scene(2)[0].tobytes()

    @pytest.mark.parametrize("r", [6.0, 11.3, 20.0, 31.7])
    def test_centered_blob_box(self, r):
        size = 128
        c = size / 2
        box = mask_box(blob_weight(size, c, c, r, r, 0.08))
        for got, want in zip(box.as_tuple(), (c - r, c - r, c + r, c + r)):
            assert abs(got - want) <= 2.0

    def test_boxes_inside_and_sizes_aligned(self):
        for seed in range(20):
            img, ann = generate_scene(seed)
            assert len(ann.boxes) == len(ann.relative_sizes)
            for b, r in zip(ann.boxes, ann.relative_sizes):
                assert 0 <= b.x_min < b.x_max <= 128 and 0 <= b.y_min < b.y_max <= 128
                assert 0 < r <= 1
            assert 0.0 <= img.min() and img.max() <= 1.0

    def test_radius_must_fit(self):
        with pytest.raises(ValueError, match="cannot fit"):
            generate_scene(0, SceneConfig(image_size=32, radius_range=(4.0, 20.0)))


class TestAugment:
    def test_identity_plan(self):
        seed = next(s for s in range(1000) if draw_plan(s).is_identity)
        img, ann = generate_scene(5)
        out, out_ann = augment(img, ann, seed)
        np.testing.assert_array_equal(out, img)
        assert out_ann.boxes == ann.boxes

    def test_double_hflip(self):
        img, ann = generate_scene(8)
        once, b1 = hflip(img, ann.boxes)
        twice, b2 = hflip(once, b1)
        np.testing.assert_array_equal(twice, img)
        assert b2 == ann.boxes

    def test_zoom_grows_interior_boxes(self):
        img = np.random.default_rng(0).random((128, 128, 3))
        box = BoundingBox(50, 52, 70, 80)
        out, (moved,) = zoom_center(img, [box], 1.3)
        assert out.shape == img.shape
        before = relative_size(box, 128, 128)
        after = relative_size(moved, 128, 128)
        assert after / before >= 1.0
        assert moved.diagonal == pytest.approx(1.3 * box.diagonal)

    def test_zoom_identity(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        out, _ = zoom_center(img, [], 1.0)
        np.testing.assert_allclose(out, img, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.integers(0, 200))
    def test_boxes_stay_in_bounds(self, aug_seed, scene_seed):
        img, ann = generate_scene(scene_seed)
        out, new = augment(img, ann, aug_seed)
        assert out.shape == img.shape
        assert 0.0 <= out.min() and out.max() <= 1.0
        plan = draw_plan(aug_seed)
        for b in new.boxes:
            assert 0 <= b.x_min < b.x_max <= 128 and 0 <= b.y_min < b.y_max <= 128
        if plan.zoom is None:
            assert len(new.boxes) == len(ann.boxes)
        assert new.is_positive == bool(new.boxes)

    def test_contrast_and_saturation_only_touch_pixels(self):
        img, ann = generate_scene(2)
        plan = draw_plan(0).__class__(False, False, None, 1.2, 0.7)
        out, new = apply_plan(img, ann, plan)
        assert new.boxes == ann.boxes
        assert not np.array_equal(out, img)


class TestStratify:
    def test_single_band(self):
        bands = stratify([ann_with_size(0.3, i) for i in range(4)] + [ann_with_size(0.7)], 1)
        assert bands == [SizeBand(0.0, 1.0, closed=True)]

    def test_upper_median(self):
        anns = [ann_with_size(r, i) for i, r in enumerate([0.1, 0.2, 0.3, 0.4])]
        bands = stratify(anns, 2)
        assert [(b.lower, b.upper) for b in bands] == [(0.0, 0.3), (0.3, 1.0)]
        counts = np.bincount([band_index(bands, a.relative_sizes[0]) for a in anns])
        assert counts.tolist() == [2, 2]

    def test_all_equal_collapses(self, caplog):
        with caplog.at_level(logging.WARNING):
            bands = stratify([ann_with_size(0.25, i) for i in range(6)], 3)
        assert len(bands) == 1
        assert "single band" in caplog.text

    def test_too_few(self):
        with pytest.raises(ValueError):
            stratify([ann_with_size(0.2), Annotation("neg")], 2)

    def test_uses_largest_box(self):
        two = annotate("a", [BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 50, 50)], 100, 100)
        assert two.largest_relative_size == pytest.approx(0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=60, unique=True), st.integers(1, 5))
    def test_partition_and_balance(self, sizes, k):
        if len(sizes) < k:
            return
        bands = stratify([ann_with_size(r, i) for i, r in enumerate(sizes)], k)
        assert bands[0].lower == 0.0 and bands[-1].upper == 1.0 and bands[-1].closed
        for a, b in zip(bands, bands[1:]):
            assert a.upper == b.lower and a.lower < a.upper
        counts = np.bincount([band_index(bands, r) for r in sizes], minlength=len(bands))
        assert len(bands) == k
        assert counts.max() - counts.min() <= 1


class TestManifest:
    def test_write_and_reload(self, tmp_path):
        m = write_split(tmp_path / "a", "train", 42, 3, 2)
        back = DatasetManifest.load(tmp_path / "a" / "manifest.json")
        assert back.split == "train" and back.seed == 42 and back.scale_factor == 1.0
        assert [it.image_id for it in back.items] == [it.image_id for it in m.items]
        assert sum(it.annotation.is_positive for it in back.items) == 3
        for it in back.items:
            assert back.read_image(it).shape == (128, 128, 3)

    def test_regeneration_is_byte_identical(self, tmp_path):
        write_split(tmp_path / "a", "test", 7, 2, 2, scale_factor=0.75)
        write_split(tmp_path / "b", "test", 7, 2, 2, scale_factor=0.75)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_scaled_split_duplicates_parent(self, tmp_path):
        full = write_split(tmp_path / "full", "test", 7, 3, 0)
        small = write_split(tmp_path / "small", "test75", 7, 3, 0, scale_factor=0.75)
        for a, b in zip(full.items, small.items):
            assert a.image_id == b.image_id
            for ra, rb in zip(a.annotation.relative_sizes, b.annotation.relative_sizes):
                assert rb == pytest.approx(0.75 * ra, abs=1e-12)

    def test_train_and_test_disjoint(self, tmp_path):
        tr = write_split(tmp_path / "tr", "train", 7, 4, 0)
        te = write_split(tmp_path / "te", "test", 7, 4, 0)
        a = {(tmp_path / "tr" / i.image).read_bytes() for i in tr.items}
        b = {(tmp_path / "te" / i.image).read_bytes() for i in te.items}
        assert not a & b
