"""Classification metrics: accuracy, macro F1 (unweighted class mean), and
micro F1 (global counts; equals accuracy for single-label problems)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ParameterError


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    f1_macro: float
    f1_micro: float


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def classification_metrics(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: int
) -> EvalMetrics:
    if len(y_true) == 0 or len(y_true) != len(y_pred):
        raise ParameterError(
            f"need equal, non-empty label lists, got {len(y_true)} and {len(y_pred)}"
        )
    cm = confusion_matrix(y_true, y_pred, n_classes)
    total = cm.sum()
    correct = np.trace(cm)
    accuracy = correct / total

    per_class = []
    for c in range(n_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        per_class.append(_f1(precision, recall))
    f1_macro = float(np.mean(per_class))

    tp_all = correct
    fp_all = total - correct
    fn_all = total - correct
    micro_p = tp_all / (tp_all + fp_all) if total else 0.0
    micro_r = tp_all / (tp_all + fn_all) if total else 0.0
    f1_micro = _f1(micro_p, micro_r)
    return EvalMetrics(float(accuracy), f1_macro, float(f1_micro))


def evaluate(model, examples: Sequence[tuple[Sequence[int], int]]) -> EvalMetrics:
    """Metrics of a model over tokenized, labeled examples."""
    if not examples:
        raise ParameterError("cannot evaluate on an empty dataset")
    y_true = [int(label) for _, label in examples]
    y_pred = [model.predict(ids) for ids, _ in examples]
    return classification_metrics(y_true, y_pred, model.config.n_classes)
