"""Downstream classifiers: a built-in linear softmax model and an external-process adapter."""
from __future__ import annotations

import csv
import json
import shlex
import subprocess
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import numpy as np

from ..data import Dataset, write_csv
from ..nn import OptimizerState, log_softmax, optimizer_step, softmax
from ..rng import stream


class ClassifierError(RuntimeError):
    pass


class ClassifierAdapter(Protocol):
    def fit(self, data: Dataset, seed: int) -> ClassifierAdapter: ...

    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...


def predict(clf: ClassifierAdapter, x: np.ndarray) -> np.ndarray:
    return np.argmax(clf.predict_proba(x), axis=1)


def softmax_loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int, l2: float):
    """Mean cross-entropy plus (l2/2)|W|^2 for weights ``theta = [W (f x C), b (C)]``."""
    f = x.shape[1]
    w = theta[: f * n_classes].reshape(f, n_classes)
    b = theta[f * n_classes:]
    logits = x @ w + b
    logp = log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * np.sum(w * w)
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    grad = np.concatenate([(x.T @ d + l2 * w).reshape(-1), d.sum(axis=0)])
    return float(loss), grad


class LinearSoftmax:
    """Multinomial logistic regression trained with Adam on shuffled minibatches."""

    def __init__(self, l2: float = 1e-4, epochs: int = 500, lr: float = 5e-2, batch_size: int = 128):
        self.l2, self.epochs, self.lr, self.batch_size = l2, epochs, lr, batch_size
        self.theta: np.ndarray | None = None
        self.n_classes = 0
        self.n_features = 0

    def fit(self, data: Dataset, seed: int) -> LinearSoftmax:
        x, y = data.features, data.labels
        if len(y) == 0:
            raise ClassifierError("cannot fit on an empty dataset")
        self.n_classes, self.n_features = data.schema.n_classes, data.schema.n_features
        theta = np.zeros(self.n_features * self.n_classes + self.n_classes)
        opt = OptimizerState(theta.size, lr=self.lr)
        rng = stream(seed, "classifier", "shuffle")
        for _ in range(self.epochs):
            order = rng.permutation(len(y))
            for lo in range(0, len(y), self.batch_size):
                idx = order[lo:lo + self.batch_size]
                _, g = softmax_loss_and_grad(theta, x[idx], y[idx], self.n_classes, self.l2)
                optimizer_step(opt, theta, g)
        self.theta = theta
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.theta is None:
            raise ClassifierError("classifier is not fitted")
        x = np.asarray(x, dtype=np.float64)
        k = self.n_features * self.n_classes
        w = self.theta[:k].reshape(self.n_features, self.n_classes)
        return softmax(x @ w + self.theta[k:])


def builtin_classifier(**kw) -> LinearSoftmax:
    return LinearSoftmax(**kw)


class ExternalClassifier:
    """Delegate training and scoring to a command.

    ``predict_proba`` writes ``train.csv`` and ``test.csv`` plus ``job.json``
    into ``workdir``, runs ``command job.json`` and reads ``probabilities.csv``
    (a header row of class names, then one row of probabilities per test row).
    """

    def __init__(self, command: str | Sequence[str], workdir: str | Path, timeout: float | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.workdir = Path(workdir)
        self.timeout = timeout
        self._train: Dataset | None = None
        self._seed = 0

    def fit(self, data: Dataset, seed: int) -> ExternalClassifier:
        self._train, self._seed = data, seed
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self._train is None:
            raise ClassifierError("classifier is not fitted")
        schema = self._train.schema
        x = np.asarray(x, dtype=np.float64)
        self.workdir.mkdir(parents=True, exist_ok=True)
        write_csv(self._train, self.workdir / "train.csv")
        write_csv(Dataset(x, np.zeros(len(x), np.int64), schema), self.workdir / "test.csv")
        out = self.workdir / "probabilities.csv"
        out.unlink(missing_ok=True)
        job = {
            "train": "train.csv",
            "test": "test.csv",
            "output": out.name,
            "label": schema.label_name,
            "classes": list(schema.class_names),
            "seed": self._seed,
        }
        (self.workdir / "job.json").write_text(json.dumps(job, indent=1), encoding="utf-8")
        proc = subprocess.run(
            [*self.command, "job.json"], cwd=self.workdir, capture_output=True, text=True, timeout=self.timeout
        )
        if proc.returncode != 0:
            raise ClassifierError(f"external classifier exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
        if not out.exists():
            raise ClassifierError(f"external classifier wrote no {out.name}")
        with out.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if list(header) != list(schema.class_names):
            raise ClassifierError(f"probability header {header} does not list the classes in order")
        probs = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(-1, len(header))
        if probs.shape[0] != len(x):
            raise ClassifierError(f"expected {len(x)} probability rows, got {probs.shape[0]}")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
            raise ClassifierError("probability rows must be non-negative and sum to 1")
        return probs
