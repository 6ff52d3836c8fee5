"""Multi-seed comparison of classifiers trained with and without synthetic rows."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ..data import Dataset
from ..synthesis import SyntheticBatch, augment
from .classifier import ClassifierAdapter, predict
from .metrics import cv_reliability, delta_g, excluded_classes, macro_f, single_class_f

DEFAULT_SEEDS = tuple(range(10))


class TrialError(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        super().__init__(f"trial with seed {seed} failed: {cause}")
        self.seed = seed


@dataclass
class Scorer:
    """Macro F (with the small-class exclusion rule) or the F of one class."""

    target_class: int | None = None
    exclusion: bool = True
    threshold: int = 20

    def __call__(self, pred: np.ndarray, test: Dataset) -> float:
        if self.target_class is not None:
            return single_class_f(pred, test.labels, self.target_class)
        n = test.schema.n_classes
        excl = excluded_classes(test.labels, self.threshold, n) if self.exclusion else set()
        return macro_f(pred, test.labels, excl, n_classes=n)


@dataclass
class TrialResult:
    seeds: list[int]
    f_real: list[float]
    f_aug: list[float]
    gains: list[float] = field(init=False)

    def __post_init__(self):
        self.gains = [delta_g(a, b) for a, b in zip(self.f_real, self.f_aug)]

    @property
    def mean(self) -> float:
        return float(np.mean(self.gains))

    @property
    def std(self) -> float:
        return float(np.std(self.gains, ddof=1)) if len(self.gains) > 1 else 0.0

    @property
    def cv(self) -> float:
        return cv_reliability(self.mean, self.std)[0]

    @property
    def reliable(self) -> bool:
        return cv_reliability(self.mean, self.std)[1]

    def percent(self) -> tuple[float, float]:
        return 100.0 * self.mean, 100.0 * self.std


Generator = Callable[[Dataset, int], SyntheticBatch]


def _one_trial(train, test, generator, classifier, scorer, s) -> tuple[float, float]:
    try:
        batch = generator(train, s)
        real_pred = predict(classifier().fit(train, s), test.features)
        aug_pred = predict(classifier().fit(augment(train, batch), s), test.features)
        fr, fa = scorer(real_pred, test), scorer(aug_pred, test)
        delta_g(fr, fa)
    except Exception as exc:
        raise TrialError(s, exc) from exc
    return fr, fa


def run_trials(
    train: Dataset,
    test: Dataset,
    generator: Generator,
    classifier: Callable[[], ClassifierAdapter],
    seeds: Sequence[int] = DEFAULT_SEEDS,
    scorer: Scorer | None = None,
    workers: int = 1,
) -> TrialResult:
    """Per seed: regenerate, fit the same classifier on real and on real+synthetic, score both on ``test``.

    With ``workers > 1`` seeds run in separate processes (the generator and
    classifier factory must pickle); results do not depend on the worker count.
    """
    scorer = scorer or Scorer()
    seeds = list(seeds)
    job = partial(_one_trial, train, test, generator, classifier, scorer)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            pairs = list(pool.map(job, seeds))
    else:
        pairs = [job(s) for s in seeds]
    return TrialResult(seeds, [a for a, _ in pairs], [b for _, b in pairs])
