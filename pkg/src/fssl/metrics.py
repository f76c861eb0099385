"""Confusion matrix and accuracy / precision / recall / F1.

Per-class figures are one-vs-rest counts read off the shared confusion
matrix; aggregates are unweighted (macro) means. Any 0/0 ratio is 0.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyMatrix, EmptyTestSet, LabelOutOfRange, LengthMismatch
from .flows import SubflowSet
from .models import ModelParams, network_for


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float
    per_class: list
    macro: ClassScores

    @property
    def num_classes(self) -> int:
        return len(self.confusion)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class": [vars(c) for c in self.per_class],
            "macro": {k: v for k, v in vars(self.macro).items() if k != "support"},
        }


def confusion_matrix(true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with rows indexed by the true class and columns by the prediction."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if len(t) != len(p):
        raise LengthMismatch(f"{len(t)} true labels vs {len(p)} predictions")
    for arr in (t, p):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(a, b) -> float:
    return float(a) / float(b) if b else 0.0


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean, 0 when either side is 0."""
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2.0 / (1.0 / precision + 1.0 / recall)


def compute_metrics(confusion) -> Metrics:
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    per_class = []
    for k in range(len(cm)):
        precision = _ratio(tp[k], tp[k] + fp[k])
        recall = _ratio(tp[k], tp[k] + fn[k])
        per_class.append(ClassScores(precision, recall, f1_score(precision, recall), int(tp[k] + fn[k])))
    macro = ClassScores(
        float(np.mean([c.precision for c in per_class])),
        float(np.mean([c.recall for c in per_class])),
        float(np.mean([c.f1 for c in per_class])),
        total,
    )
    return Metrics(cm, _ratio(tp.sum(), total), per_class, macro)


def predict(params: ModelParams, subflows: SubflowSet, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per subflow; ties go to the lowest index."""
    network = network_for(params, subflows.values.shape[1])
    x = subflows.model_inputs
    out = [network.predict(params.entries, x[lo:lo + batch_size]).argmax(axis=1)
           for lo in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate_model(params: ModelParams, test_set: SubflowSet, num_classes: int | None = None) -> Metrics:
    if len(test_set) == 0:
        raise EmptyTestSet("nothing to evaluate")
    num_classes = num_classes or params["linear3.weight"].shape[0]
    return compute_metrics(confusion_matrix(test_set.labels, predict(params, test_set), num_classes))


def flow_majority_vote(flow_ids: Sequence[str], predictions: Sequence[int]) -> dict:
    """Per-flow label by majority over its subflows (ties -> lowest class)."""
    votes: dict = {}
    for fid, p in zip(flow_ids, predictions):
        votes.setdefault(fid, Counter())[int(p)] += 1
    return {fid: min(c, key=lambda k: (-c[k], k)) for fid, c in votes.items()}
