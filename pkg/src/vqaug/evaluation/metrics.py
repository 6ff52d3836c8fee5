"""Classification scores, relative gain, and the coefficient-of-variation rule."""
from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np

EXCLUSION_THRESHOLD = 20


def _prf(pred: np.ndarray, labels: np.ndarray, c: int) -> tuple[float, float, float]:
    tp = int(np.sum((pred == c) & (labels == c)))
    fp = int(np.sum((pred == c) & (labels != c)))
    fn = int(np.sum((pred != c) & (labels == c)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def excluded_classes(labels, threshold: int = EXCLUSION_THRESHOLD, n_classes: int | None = None) -> set[int]:
    """Classes with at most ``threshold`` test rows."""
    labels = np.asarray(labels, dtype=np.int64)
    n = n_classes if n_classes is not None else (int(labels.max()) + 1 if labels.size else 0)
    counts = np.bincount(labels, minlength=n)
    return {c for c in range(n) if counts[c] <= threshold}


def macro_f(predictions, labels, excluded: Iterable[int] = (), n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F over classes not in ``excluded``."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    if n_classes is None:
        classes = sorted(set(lab.tolist()) | set(pred.tolist()))
    else:
        classes = list(range(n_classes))
    kept = [c for c in classes if c not in set(excluded)]
    if not kept:
        raise ValueError("every class is excluded; macro F is undefined")
    return float(np.mean([_prf(pred, lab, c)[2] for c in kept]))


def single_class_f(predictions, labels, c: int) -> float:
    """F-score of class ``c`` alone (0 when it is never predicted and never present)."""
    return _prf(np.asarray(predictions, np.int64), np.asarray(labels, np.int64), c)[2]


def delta_g(f_real: float, f_aug: float) -> float:
    """Relative gain of the augmented score over the real-only score."""
    if f_real == 0:
        raise ValueError("relative gain is undefined when the real-only score is 0")
    return (f_aug - f_real) / f_real


def cv_reliability(mean: float, std: float) -> tuple[float, bool]:
    """(|std| / |mean|, CV < 1); a zero mean counts as unreliable."""
    if mean == 0 or not math.isfinite(mean):
        return math.inf, False
    cv = abs(std) / abs(mean)
    return cv, cv < 1.0


def mark(mean: float | None, std: float | None) -> str:
    """Table mark: up/down arrow when reliable, dash when not, cross when missing."""
    if mean is None or std is None:
        return "×"
    _, ok = cv_reliability(mean, std)
    if not ok:
        return "−"
    return "↑" if mean > 0 else "↓"
