"""Unit tests for phantom module."""

import numpy as np
import pytest
from scipy import ndimage

from tbad_synth.config import DataConfig
from tbad_synth.errors import ValidationError
from tbad_synth.phantom import (
    CLASS_IDS,
    CLASS_LABELS,
    CLASS_PROMPTS,
    build_dataset,
    class_counts,
    class_token,
    gen_phantom,
    read_manifest,
    stack,
    write_manifest,
)


class TestGenPhantom:
    """Test single phantom rendering."""

    @pytest.mark.parametrize("class_id", CLASS_IDS)
    def test_labels_match_class(self, class_id):
        for seed in range(5):
            s = gen_phantom(seed, class_id, 64)
            present = set(np.unique(s.mask).tolist()) - {0}
            if class_id == 3:
                assert 3 in present
                assert present <= {2, 3}
            else:
                assert present == CLASS_LABELS[class_id]

    def test_deterministic(self):
        a = gen_phantom(17, 4, 64)
        b = gen_phantom(17, 4, 64)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_range_and_shape(self):
        s = gen_phantom(3, 2, 48)
        assert s.image.shape == (48, 48)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.dtype == np.uint8

    def test_each_label_is_connected(self):
        for seed in range(5):
            s = gen_phantom(seed, 4, 64)
            for label in (1, 2):
                _, n = ndimage.label(s.mask == label)
                assert n == 1

    def test_lumen_brighter_than_background(self):
        s = gen_phantom(1, 4, 64)
        assert s.image[s.mask == 1].mean() > s.image[s.mask == 0].mean()

    def test_class5_has_empty_mask(self):
        assert not gen_phantom(2, 5, 64).mask.any()

    def test_invalid_inputs(self):
        with pytest.raises(ValidationError):
            gen_phantom(0, 6)
        with pytest.raises(ValidationError):
            gen_phantom(0, 1, 16)


class TestClassCounts:
    def test_floor_and_total(self):
        counts = class_counts(200, [501, 387, 121, 13544, 3582], 20)
        assert sum(counts.values()) == 200
        assert min(counts.values()) >= 20
        assert max(counts, key=counts.get) == 4

    def test_too_small_total(self):
        with pytest.raises(ValidationError):
            class_counts(50, [1, 1, 1, 1, 1])

    def test_empty_class_rejected(self):
        with pytest.raises(ValidationError):
            class_counts(200, [1, 1, 0, 1, 1])

    def test_floor_cannot_be_met(self):
        with pytest.raises(ValidationError):
            class_counts(100, [1, 1, 1, 1, 1], 30)


class TestBuildDataset:
    """Test dataset generation and splitting."""

    def test_splits_are_disjoint_and_complete(self, tiny_dataset):
        seeds = {name: {s.seed for s in tiny_dataset.split(name)} for name in ("train", "val", "test")}
        assert not seeds["train"] & seeds["test"]
        assert not seeds["train"] & seeds["val"]
        assert not seeds["val"] & seeds["test"]
        assert sum(len(v) for v in seeds.values()) == 100

    def test_every_class_in_every_split(self, tiny_dataset):
        for name in ("train", "val", "test"):
            classes = {s.class_id for s in tiny_dataset.split(name)}
            assert classes == set(CLASS_IDS)

    def test_independent_of_workers(self, tiny_data_config):
        a = build_dataset(tiny_data_config, seed=1, workers=1)
        b = build_dataset(tiny_data_config, seed=1, workers=3)
        assert a.manifest_rows() == b.manifest_rows()
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.test, b.test))

    def test_bad_split(self):
        with pytest.raises(ValidationError):
            build_dataset(DataConfig(total=100, size=32, min_per_class=10, split=(0.5, 0.5, 0.5)))

    def test_manifest_roundtrip(self, tiny_dataset, temp_dir):
        path = temp_dir / "manifest.csv"
        write_manifest(path, tiny_dataset)
        assert read_manifest(path) == tiny_dataset.manifest_rows()

    def test_unknown_split(self, tiny_dataset):
        with pytest.raises(ValidationError):
            tiny_dataset.split("holdout")


class TestHelpers:
    def test_class_token(self):
        assert [class_token(c) for c in CLASS_IDS] == [1, 2, 3, 4, 5]
        with pytest.raises(ValidationError):
            class_token(0)

    def test_prompts_cover_classes(self):
        assert set(CLASS_PROMPTS) == set(CLASS_IDS)

    def test_stack(self, tiny_dataset):
        images, masks, classes = stack(tiny_dataset.test)
        assert images.shape == (len(tiny_dataset.test), 32, 32)
        assert masks.shape == images.shape
        assert set(classes.tolist()) == set(CLASS_IDS)

    def test_stack_empty(self):
        with pytest.raises(ValidationError):
            stack([])
