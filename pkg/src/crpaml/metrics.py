"""Minority-class evaluation metrics shared by training and risk filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class EvalMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int | None = None
    dataset_tag: str = ""

    @property
    def confusion(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion,
            "seed": self.seed,
            "dataset_tag": self.dataset_tag,
        }


def confusion_counts(predictions: Sequence[bool], labels: Sequence[bool]) -> tuple[int, int, int, int]:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    tp = fp = tn = fn = 0
    for pred, label in zip(predictions, labels):
        if pred and label:
            tp += 1
        elif pred and not label:
            fp += 1
        elif not pred and label:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def minority_f1(predictions: Sequence[bool], labels: Sequence[bool]) -> float:
    tp, fp, _, fn = confusion_counts(predictions, labels)
    return _f1(tp, fp, fn)


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def evaluate(
    predictions: Sequence[bool],
    labels: Sequence[bool],
    seed: int | None = None,
    dataset_tag: str = "",
) -> EvalMetrics:
    """Precision/recall/F1 on the positive (laundering) class only."""
    tp, fp, tn, fn = confusion_counts(predictions, labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalMetrics(
        precision=precision,
        recall=recall,
        f1=_f1(tp, fp, fn),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        seed=seed,
        dataset_tag=dataset_tag,
    )
