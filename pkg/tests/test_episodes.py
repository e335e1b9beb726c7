import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from hsefss.episodes import (
    DEFAULT_CLASSES,
    EMBEDDINGS_FILE,
    DatasetSpec,
    class_hues,
    default_folds,
    generate_dataset,
    load_dataset,
    rasterize,
    render_sample,
    sample_episode,
)
from hsefss.errors import FormatError, SamplingError
from hsefss.semantics import load_embeddings

SMALL = DatasetSpec(extent=32, train_per_class=4, test_per_class=3)


def tree_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


class TestSpec:
    def test_default_folds_partition(self):
        folds = default_folds(DEFAULT_CLASSES)
        assert len(folds) == 3 and all(len(f) == 3 for f in folds)
        assert sorted(c for f in folds for c in f) == sorted(DEFAULT_CLASSES)

    def test_overlapping_folds_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(classes=["a", "b", "c"], folds=[["a"], ["a"], ["c"]])

    def test_hues_distinct_and_interleaved(self):
        classes = list(DEFAULT_CLASSES)
        hues = class_hues(classes, default_folds(classes))
        assert len(set(hues.values())) == 9
        assert all(0 <= h < 1 for h in hues.values())


class TestRender:
    @pytest.mark.parametrize("kind", DEFAULT_CLASSES)
    def test_every_shape_rasterizes(self, kind):
        hues = class_hues(list(DEFAULT_CLASSES), default_folds(DEFAULT_CLASSES))
        img, mask, rec = render_sample(kind, [], 64, np.random.default_rng(0), hues)
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}
        assert all(s["kind"] == kind for s in rec["shapes"])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(DEFAULT_CLASSES))
    def test_foreground_fraction(self, seed, kind):
        hues = class_hues(list(DEFAULT_CLASSES), default_folds(DEFAULT_CLASSES))
        _, mask, _ = render_sample(kind, ["circle", "bar"], 32, np.random.default_rng(seed), hues)
        assert 0 < mask.mean() <= 0.5

    def test_rasterize_circle_area(self):
        m = rasterize({"kind": "circle", "cx": 32.0, "cy": 32.0, "size": 10.0, "angle": 0.0}, 64)
        assert abs(m.sum() - np.pi * 100) / (np.pi * 100) < 0.05


class TestGenerate:
    def test_bytewise_deterministic(self, tmp_path):
        generate_dataset(SMALL, 5, tmp_path / "a")
        generate_dataset(SMALL, 5, tmp_path / "b")
        files = tree_files(tmp_path / "a")
        assert files == tree_files(tmp_path / "b")
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
        assert not mismatch and not errors

    def test_seed_changes_images(self, tmp_path):
        generate_dataset(SMALL, 5, tmp_path / "a")
        generate_dataset(SMALL, 6, tmp_path / "b")
        a = (tmp_path / "a/train/circle/img_0000.png").read_bytes()
        assert a != (tmp_path / "b/train/circle/img_0000.png").read_bytes()

    def test_manifest_counts_and_masks(self, tmp_path):
        manifest = generate_dataset(SMALL, 1, tmp_path)
        for phase, n in (("train", 4), ("test", 3)):
            assert manifest["counts"][phase] == {c: n for c in DEFAULT_CLASSES}
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk["counts"] == manifest["counts"]
        for path in tmp_path.rglob("mask_*.png"):
            m = np.asarray(Image.open(path))
            assert set(np.unique(m)) <= {0, 255}
            assert 0 < (m > 0).mean() <= 0.5

    def test_embeddings_written(self, tmp_path):
        generate_dataset(SMALL, 1, tmp_path, embed_dim=12)
        embs = load_embeddings(tmp_path / EMBEDDINGS_FILE)
        assert [e.name for e in embs] == list(DEFAULT_CLASSES)
        assert all(e.dim == 12 for e in embs)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(SMALL, 0, blocker / "sub")


class TestLoad:
    def test_round_trip(self, tmp_path):
        generate_dataset(SMALL, 2, tmp_path)
        ds = load_dataset(tmp_path)
        assert ds.classes == list(DEFAULT_CLASSES)
        assert ds.count("train", "ring") == 4 and ds.count("test", "ring") == 3
        s = ds.samples["test"]["ring"][0]
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}

    def test_missing_mask_names_file(self, tmp_path):
        generate_dataset(SMALL, 2, tmp_path)
        (tmp_path / "train/bar/mask_0001.png").unlink()
        with pytest.raises(FormatError, match="img_0001"):
            load_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        generate_dataset(SMALL, 2, tmp_path)
        (tmp_path / "test/cross/img_0002.png").unlink()
        with pytest.raises(FormatError, match="mask_0002"):
            load_dataset(tmp_path)

    def test_mask_thresholding(self, tmp_path):
        generate_dataset(SMALL, 2, tmp_path)
        path = tmp_path / "train/circle/mask_0000.png"
        raw = np.asarray(Image.open(path)).copy()
        raw[raw == 255] = 200
        raw[:2, :2] = 100
        Image.fromarray(raw).save(path)
        m = load_dataset(tmp_path).samples["train"]["circle"][0].mask
        np.testing.assert_array_equal(m, (raw >= 128).astype(np.uint8))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "nothing")


class TestSampling:
    def test_deterministic(self, small_dataset):
        a = sample_episode(small_dataset, 0, "test", 1, 7, 42)
        b = sample_episode(small_dataset, 0, "test", 1, 7, 42)
        assert a.class_name == b.class_name and a.support_keys == b.support_keys and a.query_key == b.query_key
        assert np.array_equal(a.query_image, b.query_image)

    @pytest.mark.parametrize("fold", [0, 1, 2])
    def test_test_phase_uses_held_out_classes(self, small_dataset, fold):
        held = set(small_dataset.fold_classes(fold))
        seen = {sample_episode(small_dataset, fold, "test", 1, 0, i).class_name for i in range(500)}
        assert seen == held

    @pytest.mark.parametrize("fold", [0, 1, 2])
    def test_train_phase_excludes_held_out(self, small_dataset, fold):
        held = set(small_dataset.fold_classes(fold))
        assert not any(sample_episode(small_dataset, fold, "train", 1, 0, i).class_name in held for i in range(200))

    def test_five_shot(self, small_dataset):
        ep = sample_episode(small_dataset, 1, "test", 5, 3, 9)
        assert ep.shots == 5 and len(set(ep.support_keys)) == 5
        assert ep.query_key not in ep.support_keys

    def test_index_addressable(self, small_dataset):
        # episode i does not depend on which other indices were drawn
        direct = sample_episode(small_dataset, 0, "train", 1, 4, 17)
        for i in range(17):
            sample_episode(small_dataset, 0, "train", 1, 4, i)
        assert sample_episode(small_dataset, 0, "train", 1, 4, 17).query_key == direct.query_key

    def test_too_few_samples(self, small_dataset):
        with pytest.raises(SamplingError, match="6-shot needs 7"):
            sample_episode(small_dataset, 0, "test", 6, 0, 0)

    @pytest.mark.parametrize("args", [(3, "test", 1), (0, "val", 1), (0, "test", 0)])
    def test_bad_arguments(self, small_dataset, args):
        fold, phase, shots = args
        with pytest.raises(ValueError):
            sample_episode(small_dataset, fold, phase, shots, 0, 0)
