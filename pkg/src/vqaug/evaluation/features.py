"""Per-feature distribution diagnostics before and after augmentation."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..data import Dataset

N_BINS = 20


def histogram_entropy(values, bins: int = N_BINS) -> float:
    """Shannon entropy (nats) of a ``bins``-bin histogram on [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if v.size == 0:
        return 0.0
    counts, _ = np.histogram(v, bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / v.size
    return float(-np.sum(p * np.log(p)))


def sample_skewness(values) -> float:
    """Adjusted Fisher-Pearson coefficient; 0 for constant or too-short columns."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3 or np.all(v == v[0]):
        return 0.0
    return float(stats.skew(v, bias=False))


@dataclass
class FeatureShift:
    feature: str
    entropy_before: float
    entropy_after: float
    skew_before: float
    skew_after: float

    @property
    def entropy_change_pct(self) -> float:
        if self.entropy_before == 0:
            return float("inf") if self.entropy_after > 0 else 0.0
        return 100.0 * (self.entropy_after - self.entropy_before) / self.entropy_before

    @property
    def skew_reduction_pct(self) -> float:
        """Percent reduction of |skewness| (positive means closer to symmetric)."""
        b = abs(self.skew_before)
        if b == 0:
            return 0.0
        return 100.0 * (b - abs(self.skew_after)) / b


def feature_shift_report(real: Dataset, augmented: Dataset, features: Sequence[str | int]) -> list[FeatureShift]:
    if not features:
        raise ValueError("feature subset must be non-empty")
    names = real.schema.feature_names
    out = []
    for f in features:
        j = names.index(f) if isinstance(f, str) else int(f)
        a, b = real.features[:, j], augmented.features[:, j]
        out.append(FeatureShift(names[j], histogram_entropy(a), histogram_entropy(b), sample_skewness(a), sample_skewness(b)))
    return out
