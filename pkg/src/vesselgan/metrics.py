from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .exceptions import ShapeError, UndefinedMetricError


def auc_roc(scores, labels, mask=None) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic.

    Tied scores receive their mid-rank, which counts a tied positive/negative
    pair as one half. ``mask`` (e.g. the field of view) restricts the pixels
    that take part.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores, labels = scores[mask], labels[mask]
    scores, labels = scores.ravel(), labels.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    if not np.all(np.isfinite(scores)):
        raise ShapeError("scores must be finite")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
