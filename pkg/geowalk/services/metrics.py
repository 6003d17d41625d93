"""
Metrics Service - R2 for property estimation, macro F1 for classification
"""

import logging
from typing import Optional, Sequence

import numpy as np
from sklearn import metrics as sk_metrics

from geowalk.core.errors import DimensionError, EmptyInputError, UndefinedVarianceError

logger = logging.getLogger(__name__)


def r2_score(preds, targets) -> float:
    """1 - SS_res / SS_tot; undefined for fewer than two or constant targets"""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != targets.shape:
        raise DimensionError(f"{len(preds)} predictions for {len(targets)} targets")
    if len(targets) < 2:
        raise UndefinedVarianceError(f"R2 needs at least 2 targets, got {len(targets)}")
    if np.all(targets == targets[0]):
        raise UndefinedVarianceError("targets are constant; R2 is undefined")
    return float(sk_metrics.r2_score(targets, preds))


def absent_classes(preds, targets, classes: Sequence[int]) -> list:
    present = set(np.asarray(preds).tolist()) | set(np.asarray(targets).tolist())
    return [c for c in classes if c not in present]


def f1_score(preds, targets, classes: Optional[Sequence[int]] = None) -> float:
    """
    Macro F1 over classes (default: every label seen in preds or targets).
    A class missing from both contributes 0 and is reported in the log.
    """
    preds = np.asarray(preds).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    if preds.shape != targets.shape:
        raise DimensionError(f"{len(preds)} predictions for {len(targets)} targets")
    if len(targets) == 0:
        raise EmptyInputError("F1 needs at least one prediction")
    if classes is None:
        classes = sorted(set(preds.tolist()) | set(targets.tolist()))
    classes = list(classes)

    missing = absent_classes(preds, targets, classes)
    if missing:
        logger.warning(f"classes absent from predictions and targets score 0: {missing}")
    return float(sk_metrics.f1_score(targets, preds, labels=classes, average="macro", zero_division=0))
