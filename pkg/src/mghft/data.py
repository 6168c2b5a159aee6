"""Dataset ingestion, deterministic splitting, and evaluation metrics."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SER30K_CLASSES = (
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Neutral",
    "Sadness",
    "Surprise",
)


class DataError(ValueError):
    pass


@dataclass
class LabeledExample:
    sticker_id: str
    label: int
    image: np.ndarray = None  # (3, H, W) float in [0, 1]
    image_path: str = None
    embeddings: object = None  # ViewEmbeddings


@dataclass
class Splits:
    train: list
    val: list
    test: list
    excluded: int = 0


def load_image(path, image_size):
    img = Image.open(path).convert("RGB")
    if img.size != (image_size, image_size):
        raise DataError(
            f"image {path} has size {img.size}, expected "
            f"({image_size}, {image_size})"
        )
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _split_key(sticker_id, seed):
    return hashlib.sha256(f"{seed}:{sticker_id}".encode()).hexdigest()


def split_ids(ids, ratios, seed):
    """Deterministic split: ids ordered by seeded hash, then sliced to
    exact ratio counts. Pure function of (id set, seed, ratios)."""
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise DataError(f"split ratios {ratios} do not sum to 1")
    ordered = sorted(ids, key=lambda s: _split_key(s, seed))
    n = len(ordered)
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    return (
        ordered[:n_train],
        ordered[n_train : n_train + n_val],
        ordered[n_train + n_val :],
    )


def load_manifest(path):
    """JSON Lines {"sticker_id", "image", "label"}; duplicate ids rejected."""
    rows = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sid = rec["sticker_id"]
            if sid in rows:
                raise DataError(f"duplicate sticker_id {sid!r} in manifest")
            rows[sid] = rec
    if not rows:
        raise DataError(f"manifest {path} is empty")
    return rows


def load_dataset(
    manifest_path,
    ratios,
    seed,
    embeddings,
    num_classes,
    image_size=None,
    load_images=True,
):
    """Build deterministic train/val/test splits joined with embeddings.

    ``embeddings`` maps sticker_id -> ViewEmbeddings; manifest entries
    without embeddings are excluded and counted.
    """
    rows = load_manifest(manifest_path)
    examples = {}
    excluded = 0
    for sid, rec in sorted(rows.items()):
        if sid not in embeddings:
            excluded += 1
            continue
        label = int(rec["label"])
        if not 0 <= label < num_classes:
            raise DataError(f"label {label} out of range for sticker {sid!r}")
        image = None
        if load_images:
            image = load_image(rec["image"], image_size)
        examples[sid] = LabeledExample(
            sticker_id=sid,
            label=label,
            image=image,
            image_path=rec.get("image"),
            embeddings=embeddings[sid],
        )
    if not examples:
        raise DataError("no usable examples after joining embeddings")
    train_ids, val_ids, test_ids = split_ids(list(examples), ratios, seed)
    return Splits(
        train=[examples[s] for s in train_ids],
        val=[examples[s] for s in val_ids],
        test=[examples[s] for s in test_ids],
        excluded=excluded,
    )


# ---- metrics -----------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    confusion: np.ndarray  # rows = actual, cols = predicted

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes):
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.size == 0:
            raise DataError("cannot evaluate an empty split")
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(conf, (y_true, y_pred), 1)
        tp = np.diag(conf).astype(np.float64)
        pred_count = conf.sum(axis=0).astype(np.float64)
        actual_count = conf.sum(axis=1).astype(np.float64)
        precision = np.divide(
            tp, pred_count, out=np.zeros(num_classes), where=pred_count > 0
        )
        recall = np.divide(
            tp, actual_count, out=np.zeros(num_classes), where=actual_count > 0
        )
        denom = precision + recall
        f1 = np.divide(
            2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0
        )
        return cls(
            accuracy=float(tp.sum() / conf.sum()),
            macro_f1=float(f1.mean()),
            per_class_precision=precision,
            per_class_recall=recall,
            confusion=conf,
        )

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_precision": self.per_class_precision.tolist(),
            "per_class_recall": self.per_class_recall.tolist(),
            "confusion": self.confusion.tolist(),
        }
