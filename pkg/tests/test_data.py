"""Dataset splitting and metric computation against brute-force oracles."""

import json

import numpy as np
import pytest
from PIL import Image

from mghft.data import (
    DataError,
    EvalReport,
    SER30K_CLASSES,
    load_dataset,
    load_image,
    load_manifest,
    split_ids,
)
from mghft.text import HashEmbeddingProvider, encode_views
from tests.test_text import make_desc


class TestSplitIds:
    def test_exact_counts_for_seven_one_two(self):
        ids = [f"sticker{i}" for i in range(100)]
        train, val, test = split_ids(ids, (0.7, 0.1, 0.2), seed=0)
        assert (len(train), len(val), len(test)) == (70, 10, 20)
        assert set(train) | set(val) | set(test) == set(ids)
        assert not set(train) & set(val) and not set(val) & set(test)

    def test_rerun_and_reorder_are_identical(self):
        ids = [f"s{i}" for i in range(50)]
        a = split_ids(ids, (0.7, 0.1, 0.2), seed=3)
        b = split_ids(list(reversed(ids)), (0.7, 0.1, 0.2), seed=3)
        assert a == b

    def test_seed_changes_assignment(self):
        ids = [f"s{i}" for i in range(50)]
        a = split_ids(ids, (0.7, 0.1, 0.2), seed=0)
        b = split_ids(ids, (0.7, 0.1, 0.2), seed=1)
        assert a != b

    def test_bad_ratios_rejected(self):
        with pytest.raises(DataError, match="ratios"):
            split_ids(["a", "b"], (0.5, 0.1, 0.2), seed=0)


class TestManifest:
    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("\n")
        with pytest.raises(DataError, match="empty"):
            load_manifest(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rec = json.dumps({"sticker_id": "a", "image": "a.png", "label": 0})
        path.write_text(rec + "\n" + rec + "\n")
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(path)

    def test_join_excludes_missing_embeddings(self, tmp_path):
        path = tmp_path / "m.jsonl"
        with open(path, "w") as fh:
            for sid, label in (("a", 0), ("b", 1), ("c", 2)):
                fh.write(json.dumps({"sticker_id": sid, "image": "", "label": label}) + "\n")
        provider = HashEmbeddingProvider(8)
        embeddings = {s: encode_views(make_desc(s), provider) for s in ("a", "c")}
        splits = load_dataset(
            path, (0.7, 0.1, 0.2), 0, embeddings, num_classes=7, load_images=False
        )
        assert splits.excluded == 1
        kept = [e.sticker_id for e in splits.train + splits.val + splits.test]
        assert sorted(kept) == ["a", "c"]

    def test_label_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"sticker_id": "a", "image": "", "label": 7}) + "\n")
        provider = HashEmbeddingProvider(8)
        embeddings = {"a": encode_views(make_desc("a"), provider)}
        with pytest.raises(DataError, match="out of range"):
            load_dataset(path, (0.7, 0.1, 0.2), 0, embeddings, 7, load_images=False)


class TestLoadImage:
    def test_round_trip_and_scaling(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(pixels).save(path)
        arr = load_image(path, 16)
        assert arr.shape == (3, 16, 16)
        assert np.allclose(arr, pixels.transpose(2, 0, 1) / 255.0)

    def test_wrong_size_rejected(self, tmp_path):
        path = tmp_path / "img.png"
        Image.new("RGB", (8, 16)).save(path)
        with pytest.raises(DataError, match="size"):
            load_image(path, 16)


class TestMetrics:
    def test_class_roster(self):
        assert len(SER30K_CLASSES) == 7

    def test_perfect_predictions(self):
        y = [0, 1, 2, 3, 4, 5, 6]
        rep = EvalReport.from_predictions(y, y, 7)
        assert rep.accuracy == 1.0
        assert rep.macro_f1 == 1.0
        assert np.array_equal(rep.confusion, np.eye(7, dtype=int))

    def test_constant_predictor_on_balanced_labels(self):
        y_true = list(range(7)) * 10
        y_pred = [3] * 70
        rep = EvalReport.from_predictions(y_true, y_pred, 7)
        assert rep.accuracy == pytest.approx(1 / 7)
        # only class 3 has nonzero f1: precision 1/7, recall 1
        f1_3 = 2 * (1 / 7) / (1 / 7 + 1)
        assert rep.macro_f1 == pytest.approx(f1_3 / 7)

    def test_brute_force_cross_check(self):
        rng = np.random.default_rng(1)
        y_true = rng.integers(0, 7, size=50)
        y_pred = rng.integers(0, 7, size=50)
        rep = EvalReport.from_predictions(y_true, y_pred, 7)

        acc = np.mean(y_true == y_pred)
        f1s = []
        for c in range(7):
            tp = np.sum((y_pred == c) & (y_true == c))
            fp = np.sum((y_pred == c) & (y_true != c))
            fn = np.sum((y_pred != c) & (y_true == c))
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            assert rep.per_class_precision[c] == pytest.approx(prec)
            assert rep.per_class_recall[c] == pytest.approx(rec)
        assert rep.accuracy == pytest.approx(acc)
        assert rep.macro_f1 == pytest.approx(np.mean(f1s))

    def test_confusion_row_sums_are_class_counts(self):
        rng = np.random.default_rng(2)
        y_true = rng.integers(0, 4, size=30)
        y_pred = rng.integers(0, 4, size=30)
        rep = EvalReport.from_predictions(y_true, y_pred, 4)
        assert np.array_equal(rep.confusion.sum(axis=1), np.bincount(y_true, minlength=4))
        assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / 30)

    def test_empty_split_rejected(self):
        with pytest.raises(DataError):
            EvalReport.from_predictions([], [], 7)

    def test_to_dict_is_json_serializable(self):
        rep = EvalReport.from_predictions([0, 1], [0, 0], 3)
        json.dumps(rep.to_dict())
