"""Generation: sample- and class-conditioned draws, hybrid anchoring, SMOTE, and augmentation."""
from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import BalancePlan, DataError, Dataset, Schema, concat, write_csv
from .mtm import MtmModel, fill_batch, n_masked
from .rng import derive_seed, stream
from .vqvae import VqvaeModel

MODES = ("sample", "class", "hybrid", "smote")
CHUNK = 2048


class GenerationError(RuntimeError):
    """Generation could not produce the requested rows."""


@dataclass(frozen=True)
class SynthesisRequest:
    mode: str
    cls: int
    count: int = 1
    ratio: float | None = None
    anchor: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sample", "class"):
            raise ValueError(f"request mode must be 'sample' or 'class', got {self.mode!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.mode == "sample":
            if self.anchor is None:
                raise ValueError("sample mode needs an anchor row")
            if self.ratio is None or not 0.0 < self.ratio <= 1.0:
                raise ValueError("sample mode needs a ratio in (0, 1]")


@dataclass
class SyntheticBatch:
    features: np.ndarray
    labels: np.ndarray
    schema: Schema
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, self.schema.n_features)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.labels) or len(self.labels) != len(self.provenance):
            raise ValueError("features, labels and provenance must have one entry per row")

    @classmethod
    def empty(cls, schema: Schema) -> SyntheticBatch:
        return cls(np.zeros((0, schema.n_features)), np.zeros(0, np.int64), schema, [])

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.schema.n_classes)
        return {c: int(counts[c]) for c in range(self.schema.n_classes)}

    def to_dataset(self) -> Dataset:
        return Dataset(self.features, self.labels, self.schema)

    @staticmethod
    def join(schema: Schema, parts: Sequence[SyntheticBatch]) -> SyntheticBatch:
        parts = [p for p in parts if len(p)]
        if not parts:
            return SyntheticBatch.empty(schema)
        return SyntheticBatch(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            schema,
            [r for p in parts for r in p.provenance],
        )

    def manifest(self) -> dict:
        return {"format": "vqaug-synthetic", "version": 1, "n_rows": len(self), "rows": self.provenance}

    def write(self, csv_path: str | Path, manifest_path: str | Path) -> None:
        write_csv(self.to_dataset(), csv_path)
        Path(manifest_path).write_text(json.dumps(self.manifest(), indent=1) + "\n", encoding="utf-8")


def _record(mode: str, anchor: int | None, ratio: float | None, seed: int, cls: int) -> dict:
    return {"mode": mode, "class": int(cls), "anchor": anchor, "ratio": ratio, "seed": int(seed)}


def check_models(vqvae: VqvaeModel, mtm: MtmModel) -> None:
    if not vqvae.trained or not mtm.trained:
        raise GenerationError("generation needs a trained autoencoder and prior")
    v, m = vqvae.config, mtm.config
    if (v.latent_length, v.codebook_size, v.n_classes) != (m.latent_length, m.codebook_size, m.n_classes):
        raise GenerationError("autoencoder and prior disagree on L, K or the class count")


def _generate(
    vqvae: VqvaeModel,
    mtm: MtmModel,
    anchors: np.ndarray | None,
    classes: np.ndarray,
    ratio: float,
    row_seeds: Sequence[int],
    steps: int,
) -> np.ndarray:
    """Shared path of both conditioning modes.

    Without anchors every position starts masked (class conditioning). With
    anchors, each row masks round(r*L) of its anchor's codes using its own
    mask stream; at r = 1 that is again every position, and since the fill
    stream is separate the two modes then coincide exactly.
    """
    L, mask_id = mtm.config.latent_length, mtm.mask_id
    n = len(classes)
    out = np.empty((n, vqvae.config.n_features))
    for lo in range(0, n, CHUNK):
        hi = min(n, lo + CHUNK)
        c = classes[lo:hi]
        seq = np.full((hi - lo, L), mask_id, dtype=np.int64)
        if anchors is not None:
            k = n_masked(ratio, L)
            if k < L:
                seq = vqvae.tokenize(anchors[lo:hi], c)
                for i, s in enumerate(row_seeds[lo:hi]):
                    seq[i, stream(s, "synthesis", "mask").permutation(L)[:k]] = mask_id
        rngs = [stream(s, "synthesis", "fill") for s in row_seeds[lo:hi]]
        out[lo:hi] = vqvae.decode_batch(fill_batch(mtm, seq, c, steps, rngs), c)
    return out


def _steps(mtm: MtmModel, steps: int | None) -> int:
    return mtm.config.fill_steps if steps is None else steps


def nimai_s(vqvae, mtm, x, c: int, ratio: float, seed: int, steps: int | None = None) -> np.ndarray:
    """One row generated in the vicinity of anchor ``x`` (class ``c``)."""
    check_models(vqvae, mtm)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != vqvae.config.n_features:
        raise ValueError(f"anchor has {x.shape[1]} features, model expects {vqvae.config.n_features}")
    return _generate(vqvae, mtm, x, np.array([c]), ratio, [seed], _steps(mtm, steps))[0]


def nimai_c(vqvae, mtm, c: int, seed: int, steps: int | None = None) -> np.ndarray:
    """One row drawn from the prior conditioned only on class ``c``."""
    check_models(vqvae, mtm)
    return _generate(vqvae, mtm, None, np.array([c]), 1.0, [seed], _steps(mtm, steps))[0]


def row_seeds(seed: int, tag: str, n: int) -> list[int]:
    return [derive_seed(seed, tag, i) for i in range(n)]


def generate_anchored(
    vqvae, mtm, data: Dataset, anchor_index: np.ndarray, ratio: float, seed: int, tag: str = "sample",
    steps: int | None = None,
) -> SyntheticBatch:
    """One sample-conditioned row per entry of ``anchor_index`` (rows of ``data``)."""
    check_models(vqvae, mtm)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    anchor_index = np.asarray(anchor_index, dtype=np.int64)
    if anchor_index.size == 0:
        return SyntheticBatch.empty(data.schema)
    seeds = row_seeds(seed, tag, len(anchor_index))
    c = data.labels[anchor_index]
    x = _generate(vqvae, mtm, data.features[anchor_index], c, ratio, seeds, _steps(mtm, steps))
    prov = [_record("sample", int(a), ratio, s, k) for a, s, k in zip(anchor_index, seeds, c)]
    return SyntheticBatch(x, c, data.schema, prov)


def generate_class(
    vqvae, mtm, schema: Schema, counts: dict[int, int], seed: int, tag: str = "class", steps: int | None = None
) -> SyntheticBatch:
    """Class-conditioned rows: ``counts[c]`` draws for each class ``c``."""
    check_models(vqvae, mtm)
    c = np.concatenate([np.full(n, k, dtype=np.int64) for k, n in sorted(counts.items()) if n > 0] or [np.zeros(0, np.int64)])
    if c.size == 0:
        return SyntheticBatch.empty(schema)
    seeds = row_seeds(seed, tag, len(c))
    x = _generate(vqvae, mtm, None, c, 1.0, seeds, _steps(mtm, steps))
    return SyntheticBatch(x, c, schema, [_record("class", None, None, s, k) for s, k in zip(seeds, c)])


def generate(vqvae, mtm, request: SynthesisRequest, schema: Schema) -> SyntheticBatch:
    if request.mode == "class":
        return generate_class(vqvae, mtm, schema, {request.cls: request.count}, request.seed)
    anchor = np.asarray(request.anchor, dtype=np.float64).reshape(1, -1)
    data = Dataset(anchor, [request.cls], schema)
    batch = generate_anchored(vqvae, mtm, data, np.zeros(request.count, np.int64), request.ratio, request.seed)
    for r in batch.provenance:
        r["anchor"] = None  # the anchor came with the request, not from a dataset
    return batch


def cycled_anchors(data: Dataset, cls: int, n: int, seed: int) -> np.ndarray:
    """``n`` anchor rows of class ``cls``: a shuffled pass over the class, repeated as needed."""
    rows = np.flatnonzero(data.labels == cls)
    if rows.size == 0:
        raise GenerationError(f"class {cls} has no rows to anchor on")
    order = stream(seed, "synthesis", "anchors", cls).permutation(rows)
    return np.resize(order, n)


def balance_nimai(
    vqvae, mtm, data: Dataset, plan: BalancePlan, seed: int, mode: str = "sample", ratio: float = 0.5,
    steps: int | None = None,
) -> SyntheticBatch:
    """Execute ``plan`` with sample-conditioned (anchored) or class-conditioned draws."""
    if mode == "class":
        return generate_class(vqvae, mtm, data.schema, dict(plan.counts), seed, steps=steps)
    if mode != "sample":
        raise ValueError(f"unknown balancing mode {mode!r}")
    parts = []
    for c, n in sorted(plan.counts.items()):
        if n > 0:
            idx = cycled_anchors(data, c, n, seed)
            parts.append(generate_anchored(vqvae, mtm, data, idx, ratio, seed, tag=f"sample/{c}", steps=steps))
    return SyntheticBatch.join(data.schema, parts)


def hybrid_counts(anchor_labels: np.ndarray, multiplier: int, plan: BalancePlan) -> tuple[dict, dict]:
    """Per-class (anchored, class-conditioned) row counts under the capacity rule.

    Every anchor yields ``multiplier`` rows; class-conditioned rows top each
    class up to its plan total and are dropped once the anchored rows reach it.
    """
    anchored: dict[int, int] = {}
    for c in np.asarray(anchor_labels, dtype=np.int64):
        anchored[int(c)] = anchored.get(int(c), 0) + multiplier
    classes = set(plan.counts) | set(anchored)
    fill = {c: max(0, plan[c] - anchored.get(c, 0)) for c in sorted(classes)}
    return anchored, fill


def hybrid_generate(
    vqvae, mtm, uncertain: Dataset, multiplier: int, plan: BalancePlan, seed: int, ratio: float = 0.5,
    steps: int | None = None,
) -> SyntheticBatch:
    """``multiplier`` anchored rows per uncertain sample, then class-conditioned rows up to the plan."""
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    if uncertain.n_samples == 0 and plan.total == 0:
        raise GenerationError("nothing to generate: no uncertain samples and an empty plan")
    check_models(vqvae, mtm)
    _, fill = hybrid_counts(uncertain.labels, multiplier, plan)
    idx = np.repeat(np.arange(uncertain.n_samples), multiplier)
    anchored = generate_anchored(vqvae, mtm, uncertain, idx, ratio, seed, tag="hybrid/anchored", steps=steps)
    for r in anchored.provenance:
        r["mode"] = "hybrid"
    rest = generate_class(vqvae, mtm, uncertain.schema, fill, seed, tag="hybrid/class", steps=steps)
    return SyntheticBatch.join(uncertain.schema, [anchored, rest])


def smote_generate(data: Dataset, c: int, n: int, k: int = 5, seed: int = 0) -> SyntheticBatch:
    """``n`` rows interpolated between class-``c`` rows and their nearest class-``c`` neighbours."""
    rows = np.flatnonzero(data.labels == c)
    if rows.size < 2:
        raise GenerationError(f"class {c} has {rows.size} row(s); interpolation needs at least 2")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return SyntheticBatch.empty(data.schema)
    k = max(1, min(k, rows.size - 1))
    x = data.features[rows]
    nn = kernels.knn_within(x, k)
    rng = stream(seed, "synthesis", "smote", c)
    base = rng.integers(0, rows.size, n)
    pick = nn[base, rng.integers(0, k, n)]
    lam = rng.random(n)[:, None]
    out = x[base] + lam * (x[pick] - x[base])
    prov = [_record("smote", int(rows[b]), None, seed, c) for b in base]
    return SyntheticBatch(out, np.full(n, c), data.schema, prov)


def balance_smote(data: Dataset, plan: BalancePlan, k: int = 5, seed: int = 0) -> SyntheticBatch:
    return SyntheticBatch.join(
        data.schema, [smote_generate(data, c, n, k, seed) for c, n in sorted(plan.counts.items()) if n > 0]
    )


@dataclass
class RejectionResult:
    samples: list
    attempts: int
    exhausted: bool
    diagnostic: str = ""

    @property
    def acceptance_rate(self) -> float:
        return len(self.samples) / self.attempts if self.attempts else 0.0


def rejection_sample(
    generator: Callable[[int], object],
    predicate: Callable[[object], bool],
    cap: int,
    want: int | None = None,
) -> RejectionResult:
    """Draw ``generator(attempt)`` until ``want`` draws pass ``predicate`` or ``cap`` attempts are spent."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    accepted: list = []
    attempts = 0
    while attempts < cap and (want is None or len(accepted) < want):
        s = generator(attempts)
        attempts += 1
        if predicate(s):
            accepted.append(s)
    if not accepted:
        raise GenerationError(f"no draw accepted after {attempts} attempts")
    short = want is not None and len(accepted) < want
    diag = f"cap of {cap} reached with {len(accepted)}/{want} accepted" if short else ""
    return RejectionResult(accepted, attempts, short, diag)


def augment(real: Dataset, batch: SyntheticBatch) -> Dataset:
    """Real rows first, then the synthetic rows."""
    if batch.schema != real.schema:
        raise DataError("synthetic batch schema does not match the real data")
    if len(batch) == 0:
        return real
    return concat(real, batch.to_dataset())


def augment_manifest(real: Dataset, batch: SyntheticBatch) -> dict:
    return {"n_real": real.n_samples, **batch.manifest()}


def select_ratio(
    candidates: Sequence[float],
    score: Callable[[float], float],
) -> tuple[float, dict[float, float]]:
    """Pick the ratio with the best validation score (smallest ratio on ties)."""
    if not candidates:
        raise ValueError("no candidate ratios")
    scores = {float(r): float(score(float(r))) for r in sorted(candidates)}
    best = max(scores, key=lambda r: (scores[r], -r))
    return best, scores
