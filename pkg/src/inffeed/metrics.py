"""Classification metrics and paired significance testing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus
from .errors import ValidationError


@dataclass(frozen=True)
class EvalResult:
    macro_f1: float
    accuracy: float
    per_class_precision: tuple[float, ...]
    per_class_recall: tuple[float, ...]
    per_class_f1: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows = gold, cols = predicted
    n: int
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
            "per_class_f1": list(self.per_class_f1),
            "confusion": [list(row) for row in self.confusion],
            "n": self.n,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    statistic: float  # observed absolute macro-F1 difference
    resamples: int
    seed: int

    def to_json(self) -> dict:
        return {
            "p_value": self.p_value,
            "statistic": self.statistic,
            "resamples": self.resamples,
            "seed": self.seed,
        }


def _confusion(gold: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(gold * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def _macro_f1_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(float)
    pred_total = cm.sum(axis=0).astype(float)
    gold_total = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_total > 0, tp / pred_total, 0.0)
        recall = np.where(gold_total > 0, tp / gold_total, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(f1.mean()), precision, recall, f1


def evaluate(predictions: Mapping[str, int], corpus: Corpus, split: str) -> EvalResult:
    """Confusion-matrix metrics of predictions against gold labels on one split.

    Predictions must cover the split exactly. Macro F1 averages over all
    corpus classes; a class absent from both gold and predictions scores 0
    and is recorded as a warning.
    """
    ids = corpus.split_ids(split)
    missing = [i for i in ids if i not in predictions]
    extra = [i for i in predictions if i not in set(ids)]
    if missing or extra:
        raise ValidationError(
            f"predictions do not cover split {split!r} exactly"
            + (f"; missing {missing[:5]}" if missing else "")
            + (f"; extra {extra[:5]}" if extra else "")
        )
    gold = corpus.gold_labels_of(ids)
    pred = np.array([int(predictions[i]) for i in ids], dtype=np.int64)
    if pred.min() < 0 or pred.max() >= corpus.num_classes:
        raise ValidationError("prediction label outside the corpus class range")
    cm = _confusion(gold, pred, corpus.num_classes)
    macro, precision, recall, f1 = _macro_f1_from_confusion(cm)
    notes = []
    for c in range(corpus.num_classes):
        if cm[c].sum() == 0 and cm[:, c].sum() == 0:
            notes.append(f"class {c} absent from both gold and predictions; F1 counted as 0")
    return EvalResult(
        macro_f1=macro,
        accuracy=float(np.trace(cm) / len(ids)),
        per_class_precision=tuple(float(x) for x in precision),
        per_class_recall=tuple(float(x) for x in recall),
        per_class_f1=tuple(float(x) for x in f1),
        confusion=tuple(tuple(int(x) for x in row) for row in cm),
        n=len(ids),
        warnings=tuple(notes),
    )


def paired_significance(
    pred_a: Mapping[str, int],
    pred_b: Mapping[str, int],
    corpus: Corpus,
    split: str,
    resamples: int = 10000,
    seed: int = 0,
) -> SignificanceResult:
    """Approximate-randomization test on the macro-F1 difference.

    Per resample, each instance's two predictions are swapped with
    probability 1/2; p is the fraction of resamples whose absolute macro-F1
    difference is at least the observed one.
    """
    ids = corpus.split_ids(split)
    for name, preds in (("a", pred_a), ("b", pred_b)):
        if set(preds) != set(ids):
            raise ValidationError(f"predictions {name} do not cover split {split!r} exactly")
    gold = corpus.gold_labels_of(ids)
    a = np.array([int(pred_a[i]) for i in ids], dtype=np.int64)
    b = np.array([int(pred_b[i]) for i in ids], dtype=np.int64)
    C = corpus.num_classes

    def diff(x: np.ndarray, y: np.ndarray) -> float:
        fx, _, _, _ = _macro_f1_from_confusion(_confusion(gold, x, C))
        fy, _, _, _ = _macro_f1_from_confusion(_confusion(gold, y, C))
        return abs(fx - fy)

    observed = diff(a, b)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(resamples):
        swap = rng.random(len(ids)) < 0.5
        x = np.where(swap, b, a)
        y = np.where(swap, a, b)
        if diff(x, y) >= observed - 1e-15:
            hits += 1
    return SignificanceResult(
        p_value=hits / resamples, statistic=observed, resamples=resamples, seed=seed
    )
