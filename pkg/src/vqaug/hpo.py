"""Two-stage successive-halving search: autoencoder first (codebook loss), then the prior (masked CE)."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .mtm import MtmConfig, train_mtm, train_mtm_tokens
from .rng import stream
from .vqvae import TrainingError, VqvaeConfig, VqvaeModel, codebook_usage, train_vqvae


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng: np.random.Generator):
        v = self.values[int(rng.integers(len(self.values)))]
        return v.item() if isinstance(v, np.generic) else v


@dataclass(frozen=True)
class Interval:
    """Open interval (lo, hi); ``log`` samples log-uniformly."""

    lo: float
    hi: float
    log: bool = False

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            v = math.exp(rng.uniform(math.log(self.lo), math.log(self.hi)))
        else:
            v = rng.uniform(self.lo, self.hi)
        # uniform() is half-open; nudge off the closed end
        return float(min(max(v, np.nextafter(self.lo, self.hi)), np.nextafter(self.hi, self.lo)))


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[tuple[str, Choice | Interval], ...]

    def __post_init__(self):
        if not self.dims:
            raise ValueError("empty search space")

    @classmethod
    def of(cls, **dims) -> SearchSpace:
        return cls(tuple(dims.items()))

    def names(self) -> list[str]:
        return [n for n, _ in self.dims]

    def sample(self, seed: int, trial: int) -> dict:
        rng = stream(seed, "hpo", "sample", trial)
        return {name: dim.sample(rng) for name, dim in self.dims}


TRANSFORMER_DIMS = dict(
    n_heads=Choice((2, 4, 8, 16)),
    ff_width=Choice((16, 32, 64, 128, 256, 512)),
    n_layers=Choice((1, 2, 4)),
)


def vqvae_space() -> SearchSpace:
    return SearchSpace.of(
        **TRANSFORMER_DIMS,
        codebook_size=Choice((32, 64, 96, 128, 256, 512, 1024)),
        latent_length=Choice((2, 4, 8, 16, 32)),
        code_dim=Choice((2, 4, 6, 12, 16, 24, 32, 48)),
        alpha=Interval(1.0, 50.0, log=True),
        beta=Interval(1.0, 50.0, log=True),
        ema_decay=Interval(0.0, 1.0),
    )


def mtm_space() -> SearchSpace:
    return SearchSpace.of(**TRANSFORMER_DIMS)


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Outcome:
    value: float
    collapsed: bool = False


@dataclass
class LedgerEntry:
    trial: int
    rung: int
    budget: int
    config: dict
    objective: float
    collapsed: bool = False
    failed: bool = False

    @property
    def usable(self) -> bool:
        return not (self.collapsed or self.failed) and math.isfinite(self.objective)


@dataclass
class SearchResult:
    best: dict
    objective: float
    best_trial: int
    ledger: list[LedgerEntry] = field(default_factory=list)

    def reached(self, rung: int) -> int:
        return len({e.trial for e in self.ledger if e.rung >= rung})

    def write_ledger(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "rung", "budget", "config", "objective", "collapsed", "failed"])
            for e in self.ledger:
                w.writerow([e.trial, e.rung, e.budget, json.dumps(e.config, sort_keys=True), repr(e.objective), int(e.collapsed), int(e.failed)])

    def write_best(self, path: str | Path) -> None:
        doc = {"config": self.best, "objective": self.objective, "trial": self.best_trial}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


Objective = Callable[[dict, int], "float | Outcome"]


def asha_search(
    space: SearchSpace,
    objective: Objective,
    rungs: Sequence[int] = (10, 30, 90),
    eta: int = 3,
    n_trials: int = 9,
    seed: int = 0,
) -> SearchResult:
    """Serial asynchronous successive halving.

    Each time a worker frees up, the highest rung holding a not-yet-promoted
    configuration in its top 1/eta is served first; otherwise a new trial
    starts at the bottom rung. Collapsed or failed results never promote.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if eta < 2 or not rungs or list(rungs) != sorted(rungs):
        raise ValueError("need eta >= 2 and increasing rung budgets")
    configs: list[dict] = []
    results: list[dict[int, LedgerEntry]] = [dict() for _ in rungs]
    promoted: list[set[int]] = [set() for _ in rungs]
    ledger: list[LedgerEntry] = []

    def run(trial: int, rung: int) -> None:
        cfg = configs[trial]
        try:
            out = objective(dict(cfg), int(rungs[rung]))
        except TrainingError:
            e = LedgerEntry(trial, rung, int(rungs[rung]), cfg, math.inf, failed=True)
        else:
            out = out if isinstance(out, Outcome) else Outcome(float(out))
            e = LedgerEntry(trial, rung, int(rungs[rung]), cfg, float(out.value), collapsed=out.collapsed)
        results[rung][trial] = e
        ledger.append(e)

    def promotable(rung: int) -> int | None:
        done = [e for e in results[rung].values() if e.usable]
        done.sort(key=lambda e: (e.objective, config_hash(e.config)))
        quota = len(results[rung]) // eta
        # a rung never sends up more than 1/eta of what it has seen
        if len(promoted[rung]) >= quota:
            return None
        for e in done[:quota]:
            if e.trial not in promoted[rung]:
                return e.trial
        return None

    while True:
        for rung in range(len(rungs) - 2, -1, -1):
            t = promotable(rung)
            if t is not None:
                promoted[rung].add(t)
                run(t, rung + 1)
                break
        else:
            if len(configs) >= n_trials:
                break
            configs.append(space.sample(seed, len(configs)))
            run(len(configs) - 1, 0)

    final: dict[int, LedgerEntry] = {}
    for e in ledger:
        if e.trial not in final or e.rung >= final[e.trial].rung:
            final[e.trial] = e
    usable = [e for e in final.values() if e.usable]
    if not usable:
        raise SearchError(f"all {n_trials} trials collapsed or failed")
    best = min(usable, key=lambda e: (e.objective, config_hash(e.config)))
    return SearchResult(dict(best.config), best.objective, best.trial, ledger)


def scaled_rungs(scale: float, base: Sequence[int] = (10, 30, 90)) -> tuple[int, ...]:
    return tuple(max(1, int(round(b * scale))) for b in base)


def stage1_vqvae_objective(train: Dataset, valid: Dataset, base: Mapping, seed: int = 0) -> Objective:
    """Validation embed + commit loss of a freshly trained autoencoder; collapse is flagged."""

    def objective(config: dict, budget: int) -> Outcome:
        cfg = VqvaeConfig.from_dict({**base, **config})
        model, _ = train_vqvae(train, valid, cfg, seed, max_epochs=budget)
        losses = model.evaluate(valid)
        value = losses.embed + losses.commit
        if not math.isfinite(value):
            raise TrainingError("non-finite validation codebook loss")
        return Outcome(value, codebook_usage(model, train).collapsed)

    return objective


def stage2_mtm_objective(vqvae: VqvaeModel, train: Dataset, valid: Dataset, base: Mapping, seed: int = 0) -> Objective:
    """Best validation masked cross-entropy of a prior fitted on the frozen stage-1 winner."""
    vc = vqvae.config
    fixed = dict(base, latent_length=vc.latent_length, codebook_size=vc.codebook_size, n_classes=vc.n_classes)

    def objective(config: dict, budget: int) -> float:
        _, history = train_mtm(vqvae, train, valid, MtmConfig.from_dict({**fixed, **config}), seed, max_epochs=budget)
        return min(v for _, v in history)

    return objective


def token_mtm_objective(tokens, labels, valid_tokens, valid_labels, base: Mapping, seed: int = 0) -> Objective:
    """Stage-2 objective on raw token sequences (no autoencoder needed)."""

    def objective(config: dict, budget: int) -> float:
        _, history = train_mtm_tokens(tokens, labels, valid_tokens, valid_labels, MtmConfig.from_dict({**base, **config}), seed, max_epochs=budget)
        return min(v for _, v in history)

    return objective


def fit_space(space: SearchSpace, model_dim: int) -> SearchSpace:
    """Drop head counts that do not divide the model width."""
    dims = []
    for name, dim in space.dims:
        if name == "n_heads" and isinstance(dim, Choice):
            dim = Choice(tuple(h for h in dim.values if model_dim % h == 0))
        dims.append((name, dim))
    return SearchSpace(tuple(dims))
