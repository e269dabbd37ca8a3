"""Tests for dataset loading, augmentation, and the synthetic generator."""

import numpy as np
import pytest
from PIL import Image

from gradattn.config import ConfigError
from gradattn.data import (
    DatasetError,
    SyntheticSpec,
    class_motif,
    generate_synthetic,
    load_image,
    load_manifest,
    load_synthetic_meta,
    map_bbox_through_eval,
    standard_augment,
)


def _write_images(root, split, classes, count=3):
    for cls in classes:
        d = root / split / cls
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            Image.fromarray(
                np.full((64, 64, 3), i * 10, dtype=np.uint8)
            ).save(d / f"{i}.png")


class TestManifest:
    def test_counts_and_labels(self, tmp_path):
        _write_images(tmp_path, "train", ["a", "b"])
        _write_images(tmp_path, "test", ["a", "b"], count=2)
        m = load_manifest(tmp_path)
        assert len(m.train) == 6 and len(m.test) == 4
        assert sorted({s.label for s in m.train}) == [0, 1]

    def test_lexicographic_label_order(self, tmp_path):
        _write_images(tmp_path, "train", ["sparrow", "finch"])
        _write_images(tmp_path, "test", ["sparrow", "finch"])
        m = load_manifest(tmp_path)
        assert m.classes == ["finch", "sparrow"]
        finch = [s for s in m.train if "finch" in s.path]
        assert all(s.label == 0 for s in finch)

    def test_mismatched_splits_rejected(self, tmp_path):
        _write_images(tmp_path, "train", ["a", "b"])
        _write_images(tmp_path, "test", ["a", "c"])
        with pytest.raises(DatasetError):
            load_manifest(tmp_path)

    def test_empty_class_dir_named_in_error(self, tmp_path):
        _write_images(tmp_path, "train", ["a"])
        _write_images(tmp_path, "test", ["a"])
        (tmp_path / "train" / "empty_cls").mkdir()
        with pytest.raises(DatasetError, match="empty_cls"):
            load_manifest(tmp_path)

    def test_missing_split_rejected(self, tmp_path):
        _write_images(tmp_path, "train", ["a"])
        with pytest.raises(DatasetError):
            load_manifest(tmp_path)


class TestAugment:
    def _img(self):
        rng = np.random.default_rng(0)
        return rng.integers(0, 255, size=(64, 64, 3)).astype(np.uint8)

    def test_eval_deterministic(self):
        img = self._img()
        a = standard_augment(img, training=False)
        b = standard_augment(img, training=False)
        assert np.array_equal(a, b)
        assert a.shape == (64, 64, 3)

    def test_forced_flip_is_mirror_of_crop(self):
        img = self._img()
        plain = standard_augment(
            img, training=True, crop_offset=(2, 3), flip=False, angle=0.0
        )
        flipped = standard_augment(
            img, training=True, crop_offset=(2, 3), flip=True, angle=0.0
        )
        assert np.array_equal(flipped, plain[:, ::-1])

    def test_crop_dimension_arithmetic(self):
        img = np.zeros((100, 120, 3), dtype=np.uint8)
        out = standard_augment(
            img, training=True, rng=np.random.default_rng(1), resize_to=72, crop_to=64
        )
        assert out.shape == (64, 64, 3)

    def test_training_needs_rng_when_draws_unpinned(self):
        with pytest.raises(ValueError):
            standard_augment(self._img(), training=True)


class TestSynthetic:
    def test_motif_size_constraint(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(image_size=32, motif_size=8)

    def test_regeneration_bit_identical(self, tmp_path):
        spec = SyntheticSpec(num_classes=2, train_per_class=2, test_per_class=1, noise=0.0)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        rel = "train/class_00/0000.png"
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_global_structure_identical_without_motifs(self, tmp_path):
        spec = SyntheticSpec(num_classes=2, train_per_class=1, test_per_class=1, noise=0.0)
        generate_synthetic(spec, tmp_path)
        meta = load_synthetic_meta(tmp_path)
        imgs, boxes = [], []
        for rel in ("train/class_00/0000.png", "train/class_01/0000.png"):
            imgs.append(load_image(tmp_path / rel).astype(np.int32))
            boxes.append(meta["motifs"][rel])
        for img in imgs:
            for y, x, s in boxes:
                img[y : y + s, x : x + s] = 0
        assert np.abs(imgs[0] - imgs[1]).max() == 0

    def test_counts(self, tiny_dataset):
        spec, manifest = tiny_dataset
        assert len(manifest.train) == spec.num_classes * spec.train_per_class
        assert len(manifest.test) == spec.num_classes * spec.test_per_class

    def test_template_matching_classifier(self, tiny_dataset):
        import cv2

        spec, manifest = tiny_dataset
        motifs = [
            class_motif(c, spec.motif_size).astype(np.float32)
            for c in range(spec.num_classes)
        ]
        masks = [
            np.repeat((m.sum(axis=2) > 0).astype(np.float32)[:, :, None], 3, axis=2)
            for m in motifs
        ]
        hits = 0
        for sample in manifest.test:
            img = load_image(sample.path).astype(np.float32)
            # best masked SSD over all placements, per class motif
            scores = [
                cv2.matchTemplate(img, m, cv2.TM_SQDIFF, mask=mask).min()
                for m, mask in zip(motifs, masks)
            ]
            hits += int(np.argmin(scores) == sample.label)
        assert hits / len(manifest.test) >= 0.99


class TestBboxMapping:
    def test_identity_when_no_resize(self):
        assert map_bbox_through_eval((10, 20, 8), 64, 64, 64) == (10, 20, 18, 28)

    def test_desk_profile_mapping(self):
        y0, x0, y1, x1 = map_bbox_through_eval((16, 16, 8), 64, 72, 64)
        # scale 1.125, center-crop offset 4
        assert (y0, x0) == (14, 14)
        assert (y1, x1) == (23, 23)

    def test_clipping(self):
        y0, x0, y1, x1 = map_bbox_through_eval((0, 60, 4), 64, 72, 64)
        assert y0 >= 0 and x1 <= 64
