"""Post-deployment recovery: label a few uncertain rows from a drifted batch and generate around them."""
from __future__ import annotations

import csv
import json
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, Schema, concat, ingest_csv, plan_balance
from .evaluation.classifier import ClassifierAdapter, predict
from .evaluation.metrics import macro_f
from .rng import stream
from .synthesis import augment, balance_nimai, hybrid_generate
from .vqvae import VqvaeModel
from .mtm import MtmModel

STRATEGIES = ("no-recovery", "insomnia", "nimai-c", "nimai-hybrid")


@dataclass
class DriftScenario:
    months: list[Dataset]
    train_month: int = 0
    recovery_month: int | None = None

    def __post_init__(self):
        if len(self.months) < 2:
            raise DataError("a drift scenario needs at least two months")
        schema = self.months[0].schema
        if any(m.schema != schema for m in self.months):
            raise DataError("every month must share one schema")
        if not 0 <= self.train_month < len(self.months):
            raise DataError("training month out of range")

    @property
    def schema(self) -> Schema:
        return self.months[0].schema

    def targets(self) -> list[int]:
        if self.recovery_month is not None:
            return [self.recovery_month]
        return list(range(self.train_month + 1, len(self.months)))


@dataclass(frozen=True)
class RecoveryConfig:
    probe_fraction: float = 0.01
    lo: float = 0.3
    hi: float = 0.7
    multiplier: int = 5
    budget: int = 64
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction must lie in (0, 1]")
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError("need 0 <= lo < hi <= 1")
        if self.multiplier < 1 or self.budget < 0:
            raise ValueError("multiplier must be >= 1 and budget >= 0")


@dataclass
class Selection:
    uncertain: Dataset
    index: np.ndarray
    probe: np.ndarray


def confidence(probs: np.ndarray) -> np.ndarray:
    """Positive-class probability for two classes, the top probability otherwise."""
    probs = np.asarray(probs)
    return probs[:, 1] if probs.shape[1] == 2 else probs.max(axis=1)


def uncertainty_select(clf: ClassifierAdapter, batch: Dataset, config: RecoveryConfig, seed: int | None = None) -> Selection:
    """Label (simulated) the probe rows whose confidence lies in [lo, hi], up to the budget."""
    seed = config.seed if seed is None else seed
    n_probe = int(np.floor(config.probe_fraction * batch.n_samples + 0.5))
    if n_probe < 1:
        raise DataError(f"probe of {config.probe_fraction:.2%} of {batch.n_samples} rows is empty")
    drawn = stream(seed, "drift", "probe").choice(batch.n_samples, n_probe, replace=False)
    conf = confidence(clf.predict_proba(batch.features[drawn]))
    # the budget is spent in draw order so truncation is not biased by row position
    keep = np.sort(drawn[(conf >= config.lo) & (conf <= config.hi)][: config.budget])
    return Selection(batch.subset(keep), keep, np.sort(drawn))


def recover(vqvae: VqvaeModel, mtm: MtmModel, real: Dataset, uncertain: Dataset, config: RecoveryConfig, seed: int | None = None) -> Dataset:
    """Real rows plus the labeled uncertain rows plus hybrid synthetic rows; the generator is left untouched."""
    seed = config.seed if seed is None else seed
    base = concat(real, uncertain) if uncertain.n_samples else real
    plan = plan_balance(base.class_counts())
    batch = hybrid_generate(vqvae, mtm, uncertain, config.multiplier, plan, seed, ratio=config.ratio)
    return augment(base, batch)


@dataclass
class ArmScores:
    strategy: str
    target: int
    prior: int
    scores: list[float] = field(default_factory=list)
    n_uncertain: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


@dataclass
class DriftReport:
    arms: list[ArmScores]

    def best(self, strategy: str, target: int) -> ArmScores:
        """Best prior month for one strategy (highest mean macro F)."""
        cands = [a for a in self.arms if a.strategy == strategy and a.target == target]
        return max(cands, key=lambda a: (a.mean, -a.prior))

    def rows(self) -> list[dict]:
        out = []
        for t in sorted({a.target for a in self.arms}):
            for s in STRATEGIES:
                if any(a.strategy == s and a.target == t for a in self.arms):
                    b = self.best(s, t)
                    out.append({"strategy": s, "month": t, "prior_month": b.prior, "mean_f": 100 * b.mean, "std_f": 100 * b.std})
        return out

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "month", "prior_month", "mean_f", "std_f"])
            for r in self.rows():
                w.writerow([r["strategy"], r["month"], r["prior_month"], repr(r["mean_f"]), repr(r["std_f"])])

    def text(self) -> str:
        lines = [f"{'strategy':<14}{'month':>6}{'prior':>6}  mean F (std)"]
        for r in self.rows():
            lines.append(f"{r['strategy']:<14}{r['month']:>6}{r['prior_month']:>6}  {r['mean_f']:.2f} ({r['std_f']:.2f})")
        return "\n".join(lines) + "\n"


def compare_strategies(
    scenario: DriftScenario,
    config: RecoveryConfig,
    seeds: Sequence[int],
    classifier: Callable[[], ClassifierAdapter],
    generators: dict[int, tuple[VqvaeModel, MtmModel]],
    priors: Sequence[int] | None = None,
) -> DriftReport:
    """Score every strategy on each target month, for each prior month with a trained generator.

    Per seed one probe is drawn and shared by the strategies that label
    rows; all arms are scored on the target month with the probe removed.
    """
    arms: list[ArmScores] = []
    for t in scenario.targets():
        month = scenario.months[t]
        for k in priors if priors is not None else [p for p in sorted(generators) if p < t]:
            vqvae, mtm = generators[k]
            real = scenario.months[k]
            bucket = {s: ArmScores(s, t, k) for s in STRATEGIES}
            for s in seeds:
                base = classifier().fit(real, s)
                sel = uncertainty_select(base, month, config, seed=s)
                uncertain = sel.uncertain
                test = month.subset(np.setdiff1d(np.arange(month.n_samples), sel.probe))
                n = scenario.schema.n_classes

                def score(clf):
                    return macro_f(predict(clf, test.features), test.labels, n_classes=n)

                bucket["no-recovery"].scores.append(score(base))
                insomnia = concat(real, uncertain) if uncertain.n_samples else real
                bucket["insomnia"].scores.append(score(classifier().fit(insomnia, s)))
                plan = plan_balance(real.class_counts())
                nc = augment(real, balance_nimai(vqvae, mtm, real, plan, seed=s, mode="class"))
                bucket["nimai-c"].scores.append(score(classifier().fit(nc, s)))
                hy = recover(vqvae, mtm, real, uncertain, config, seed=s)
                bucket["nimai-hybrid"].scores.append(score(classifier().fit(hy, s)))
                for arm in bucket.values():
                    arm.n_uncertain.append(uncertain.n_samples)
            arms.extend(bucket.values())
    return DriftReport(arms)


def drifting_gaussians(
    n_features: int = 8,
    month_sizes: Sequence[tuple[int, int]] = ((1000, 100), (6000, 400)),
    centers: tuple[float, float] = (0.35, 0.65),
    scale: float = 0.08,
    shift: float = 0.25,
    shifted_features: int | None = None,
    drift_month: int = 1,
    seed: int = 0,
) -> DriftScenario:
    """Two Gaussian classes; from ``drift_month`` on, the minority mean moves by ``-shift`` on some features."""
    schema = Schema(tuple(f"f{i}" for i in range(n_features)), "label", ("benign", "malicious"))
    m = n_features // 2 if shifted_features is None else shifted_features
    months = []
    for i, (n0, n1) in enumerate(month_sizes):
        rng = stream(seed, "drift", "month", i)
        y = np.r_[np.zeros(n0, np.int64), np.ones(n1, np.int64)]
        mu = np.where(y[:, None] == 0, centers[0], centers[1]) * np.ones(n_features)
        if i >= drift_month:
            mu[y == 1, :m] -= shift
        x = np.clip(mu + rng.normal(scale=scale, size=mu.shape), 0.0, 1.0)
        months.append(Dataset(x, y, schema))
    return DriftScenario(months, train_month=0)


def write_scenario(scenario: DriftScenario, directory: str | Path) -> Path:
    """Month CSVs plus a manifest listing them."""
    from .data import write_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(scenario.months):
        p = directory / f"month_{i:02d}.csv"
        write_csv(m, p)
        paths.append(p.name)
    manifest = {
        "format": "vqaug-drift-scenario",
        "version": 1,
        "schema": scenario.schema.to_dict(),
        "months": paths,
        "train_month": scenario.train_month,
        "recovery_month": scenario.recovery_month,
    }
    out = directory / "scenario.json"
    out.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out


def load_scenario(path: str | Path) -> DriftScenario:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != "vqaug-drift-scenario":
        raise DataError(f"{path} is not a drift scenario manifest")
    schema = Schema.from_dict(doc["schema"])
    months = [ingest_csv(path.parent / p, schema) for p in doc["months"]]
    return DriftScenario(months, doc.get("train_month", 0), doc.get("recovery_month"))


def config_dict(config: RecoveryConfig) -> dict:
    return asdict(config)
