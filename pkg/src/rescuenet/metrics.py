"""XView2-style scoring from a pixel confusion matrix.

score = 0.3 * F1_loc + 0.7 * harmonic_mean(F1 of each damage class)

Counts are accumulated once over the whole dataset (micro-average). A class
that never occurs and is never predicted scores F1 = 1; any class with F1 = 0
drives the harmonic mean to 0.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

NUM_CLASSES = 5  # background + 4 damage levels
IGNORE = 255
LOC_WEIGHT = 0.3
DAMAGE_WEIGHT = 0.7


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self + other

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, gt_mask, pred_mask, ignore_mask=None) -> ConfusionMatrix:
    """Add one mask pair to ``cm`` (rows = ground truth, cols = prediction)."""
    gt = np.asarray(gt_mask)
    pred = np.asarray(pred_mask)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: gt {gt.shape} vs pred {pred.shape}")
    keep = gt != IGNORE
    if ignore_mask is not None:
        keep &= ~np.asarray(ignore_mask, dtype=bool)
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    for name, arr in (("ground truth", g), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise ValueError(f"{name} class value out of range 0..{NUM_CLASSES - 1}")
    flat = np.bincount(g * NUM_CLASSES + p, minlength=NUM_CLASSES * NUM_CLASSES)
    return ConfusionMatrix(cm.counts + flat.reshape(NUM_CLASSES, NUM_CLASSES))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def class_f1(cm: ConfusionMatrix, k: int) -> float:
    if not 1 <= k < NUM_CLASSES:
        raise ValueError(f"damage class must be in 1..{NUM_CLASSES - 1}, got {k}")
    c = cm.counts
    tp = int(c[k, k])
    return _f1(tp, int(c[:, k].sum()) - tp, int(c[k, :].sum()) - tp)


def loc_f1(cm: ConfusionMatrix) -> float:
    c = cm.counts
    tp = int(c[1:, 1:].sum())
    return _f1(tp, int(c[0, 1:].sum()), int(c[1:, 0].sum()))


def harmonic_mean(values: Iterable[float]) -> float:
    vals = list(values)
    if any(v == 0 for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


@dataclass
class EvalReport:
    f1_loc: float
    f1_per_class: tuple[float, ...]
    harmonic_mean: float
    overall: float
    n_pixels: int = 0

    def as_dict(self) -> dict:
        d = {"f1_loc": self.f1_loc}
        for i, v in enumerate(self.f1_per_class, start=1):
            d[f"f1_damage_{i}"] = v
        d["f1_harmonic"] = self.harmonic_mean
        d["score"] = self.overall
        d["n_pixels"] = self.n_pixels
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = tuple(d[k] for k in sorted(d) if k.startswith("f1_damage_"))
        return cls(d["f1_loc"], per, d["f1_harmonic"], d["score"], int(d.get("n_pixels", 0)))

    def write(self, path: str | os.PathLike) -> None:
        """Write ``path`` as JSON and a sibling ``.txt`` key=value report, atomically."""
        path = os.fspath(path)
        atomic_write(path, self.to_json().encode())
        atomic_write(os.path.splitext(path)[0] + ".txt", self.to_text().encode())


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def xview2_score(f1_loc: float, f1_per_class, n_pixels: int = 0) -> EvalReport:
    per = tuple(float(v) for v in f1_per_class)
    for v in (f1_loc, *per):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"F1 value {v} outside [0, 1]")
    hm = harmonic_mean(per)
    return EvalReport(float(f1_loc), per, hm, LOC_WEIGHT * f1_loc + DAMAGE_WEIGHT * hm, n_pixels)


def report_from_confusion(cm: ConfusionMatrix) -> EvalReport:
    per = [class_f1(cm, k) for k in range(1, NUM_CLASSES)]
    return xview2_score(loc_f1(cm), per, cm.total)


def evaluate_dataset(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> EvalReport:
    """Score a stream of (gt, pred) masks with one global confusion matrix."""
    cm = ConfusionMatrix()
    for item in pairs:
        if len(item) != 2:
            raise ValueError("each item must be a (gt, pred) pair")
        cm = accumulate(cm, item[0], item[1])
    return report_from_confusion(cm)


def evaluate_streams(gts: Iterable[np.ndarray], preds: Iterable[np.ndarray]) -> EvalReport:
    gts, preds = list(gts), list(preds)
    if len(gts) != len(preds):
        raise ValueError(f"stream lengths differ: {len(gts)} ground truth vs {len(preds)} predictions")
    return evaluate_dataset(zip(gts, preds))
