"""Masked token model: a class-conditioned bidirectional prior over code sequences."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import (
    Dense,
    Embedding,
    NonFiniteGradient,
    OptimizerState,
    Params,
    PositionalEmbedding,
    TransformerStack,
    log_softmax,
    optimizer_step,
    softmax,
)
from .nn import serialize
from .rng import stream
from .vqvae import TrainingError, VqvaeModel, codebook_usage


def n_masked(ratio: float, length: int) -> int:
    """round(r * L) with halves rounded up."""
    return int(math.floor(ratio * length + 0.5))


@dataclass(frozen=True)
class LatentTokens:
    tokens: tuple[int, ...]
    cls: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be non-negative")

    @property
    def L(self) -> int:
        return len(self.tokens)

    def array(self) -> np.ndarray:
        return np.array(self.tokens, dtype=np.int64)


@dataclass(frozen=True)
class MaskSpec:
    positions: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("masked positions must be distinct")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")

    def boolean(self, length: int) -> np.ndarray:
        m = np.zeros(length, dtype=bool)
        m[list(self.positions)] = True
        return m


def mask_tokens(tokens: LatentTokens, ratio: float, seed: int, mask_id: int):
    """Replace round(r*L) uniformly chosen positions with ``mask_id``.

    Returns ``(masked array, MaskSpec)``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {ratio}")
    L = tokens.L
    k = n_masked(ratio, L)
    positions = np.sort(stream(seed, "mtm", "mask").permutation(L)[:k])
    out = tokens.array()
    out[positions] = mask_id
    return out, MaskSpec(tuple(int(p) for p in positions), ratio)


@dataclass(frozen=True)
class MtmConfig:
    latent_length: int
    codebook_size: int
    n_classes: int
    model_dim: int = 32
    n_heads: int = 2
    ff_width: int = 64
    n_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 50
    min_delta: float = 1e-6
    min_ratio: float = 0.15
    fill_steps: int = 8
    loss_positions: str = "masked"

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if not 0.0 < self.min_ratio <= 1.0:
            raise ValueError("min_ratio must lie in (0, 1]")
        if self.fill_steps < 1:
            raise ValueError("fill_steps must be >= 1")
        if self.loss_positions not in ("masked", "all"):
            raise ValueError("loss_positions must be 'masked' or 'all'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MtmConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown mtm config keys: {sorted(unknown)}")
        return cls(**d)


def masked_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean of -log p(target) over positions where ``mask`` is set, with d/dlogits."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty mask: the masked cross-entropy is undefined")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked[mask].sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
    grad *= mask[..., None] / n
    return loss, grad


def mtm_loss(distributions: np.ndarray, targets: LatentTokens, spec: MaskSpec) -> float:
    """Mean negative log-probability of the targets at the masked positions."""
    p = np.asarray(distributions, dtype=np.float64)
    t = targets.array()
    if p.ndim != 2 or p.shape[0] != t.size:
        raise ValueError("distributions must be (L, K) matching the targets")
    if not spec.positions:
        raise ValueError("empty mask: the masked cross-entropy is undefined")
    if t.max() >= p.shape[1]:
        raise ValueError("target id outside the distribution support")
    pos = np.array(spec.positions)
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p[pos, t[pos]])))


class MtmModel:
    KIND = "mtm"

    def __init__(self, config: MtmConfig, seed: int = 0):
        self.config = cfg = config
        self.seed = seed
        D = cfg.model_dim
        p = self.params = Params()
        self.tok_emb = Embedding(p, "tok", cfg.codebook_size + 1, D)
        self.cls_emb = Embedding(p, "cls", cfg.n_classes, D)
        self.pos = PositionalEmbedding(p, "pos", cfg.latent_length + 1, D)
        self.stack = TransformerStack(p, "stack", cfg.n_layers, cfg.n_heads, cfg.ff_width, D)
        self.head = Dense(p, "head", D, cfg.codebook_size)
        p.allocate(stream(seed, "mtm", "init"))
        # a zero head starts from the uniform distribution over codes
        p[self.head.w][...] = 0.0
        self.trained = False
        self.schema_hash = ""

    @property
    def mask_id(self) -> int:
        return self.config.codebook_size

    def logits(self, seq: np.ndarray, c: np.ndarray) -> np.ndarray:
        cfg = self.config
        seq = np.asarray(seq, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        if seq.ndim != 2 or seq.shape[1] != cfg.latent_length:
            raise ValueError(f"expected (batch, {cfg.latent_length}) token ids, got {seq.shape}")
        if c.shape != (seq.shape[0],):
            raise ValueError("one class id per sequence required")
        if seq.size and (seq.min() < 0 or seq.max() > self.mask_id):
            raise ValueError(f"token id out of range [0, {self.mask_id}]")
        if c.size and (c.min() < 0 or c.max() >= cfg.n_classes):
            raise ValueError("class id out of range")
        h = np.concatenate([self.cls_emb.forward(c)[:, None, :], self.tok_emb.forward(seq)], axis=1)
        h = self.stack.forward(self.pos.forward(h))
        return self.head.forward(h[:, 1:, :])

    def _backward(self, dlogits: np.ndarray) -> None:
        cfg = self.config
        dh = np.zeros((dlogits.shape[0], cfg.latent_length + 1, cfg.model_dim))
        dh[:, 1:, :] = self.head.backward(dlogits)
        dh = self.pos.backward(self.stack.backward(dh))
        self.cls_emb.backward(dh[:, 0, :])
        self.tok_emb.backward(dh[:, 1:, :])

    def forward_backward(self, seq, c, targets, mask) -> float:
        """Masked cross-entropy on a batch; gradients accumulate into ``params.grad``."""
        logits = self.logits(seq, c)
        if not np.all(np.isfinite(logits)):
            raise TrainingError("non-finite logits")
        loss, dlogits = masked_cross_entropy(logits, np.asarray(targets), mask)
        self._backward(dlogits)
        return loss

    def clone(self) -> MtmModel:
        return copy.deepcopy(self)

    def to_model_file(self) -> serialize.ModelFile:
        cfg = self.config
        sizes = {
            "K": cfg.codebook_size,
            "L": cfg.latent_length,
            "n_classes": cfg.n_classes,
            "model_dim": cfg.model_dim,
            "n_heads": cfg.n_heads,
            "ff_width": cfg.ff_width,
            "n_layers": cfg.n_layers,
        }
        meta = {"config": cfg.to_dict(), "seed": self.seed, "trained": self.trained}
        return serialize.ModelFile(self.KIND, sizes, self.params.data, self.schema_hash, meta, {})

    def save(self, path: str | Path) -> None:
        serialize.save(path, self.to_model_file())

    @classmethod
    def load(cls, path: str | Path) -> MtmModel:
        mf = serialize.load(path, kind=cls.KIND)
        model = cls(MtmConfig.from_dict(mf.meta["config"]), seed=mf.meta.get("seed", 0))
        if (mf.sizes["K"], mf.sizes["L"]) != (model.config.codebook_size, model.config.latent_length):
            raise serialize.ModelFileError("vocabulary header disagrees with the stored config")
        model.params.set_vector(mf.parameters)
        model.trained = bool(mf.meta.get("trained", False))
        model.schema_hash = mf.schema_hash
        return model


def mtm_forward(model: MtmModel, masked: np.ndarray, c: int) -> np.ndarray:
    """(L, K) categorical distributions for one (possibly masked) sequence."""
    return softmax(model.logits(np.asarray(masked)[None], np.array([c])))[0]


def random_masks(rng: np.random.Generator, n: int, length: int, ratios: np.ndarray) -> np.ndarray:
    """Boolean (n, L) masks with max(1, round(r*L)) uniformly placed positions per row."""
    counts = np.maximum(1, np.floor(ratios * length + 0.5).astype(np.int64))
    ranks = np.argsort(np.argsort(rng.random((n, length)), axis=1), axis=1)
    return ranks < counts[:, None]


def train_mtm_tokens(
    tokens: np.ndarray,
    labels: np.ndarray,
    valid_tokens: np.ndarray,
    valid_labels: np.ndarray,
    config: MtmConfig,
    seed: int,
    max_epochs: int | None = None,
    callback=None,
) -> tuple[MtmModel, list[tuple[float, float]]]:
    """Fit the prior directly on token sequences. Returns the model and per-epoch (train, valid) losses."""
    cfg = config
    tokens, labels = np.asarray(tokens, np.int64), np.asarray(labels, np.int64)
    valid_tokens, valid_labels = np.asarray(valid_tokens, np.int64), np.asarray(valid_labels, np.int64)
    if len(tokens) == 0 or len(valid_tokens) == 0:
        raise TrainingError("empty training or validation tokens")
    L = cfg.latent_length
    model = MtmModel(cfg, seed)
    opt = OptimizerState(model.params.size, lr=cfg.lr)
    rng = stream(seed, "mtm", "train")
    vrng = stream(seed, "mtm", "valid_mask")
    v_mask = random_masks(vrng, len(valid_tokens), L, vrng.uniform(cfg.min_ratio, 1.0, len(valid_tokens)))
    v_seq = np.where(v_mask, model.mask_id, valid_tokens)
    v_loss_mask = np.ones_like(v_mask) if cfg.loss_positions == "all" else v_mask

    def valid_loss() -> float:
        loss, _ = masked_cross_entropy(model.logits(v_seq, valid_labels), valid_tokens, v_loss_mask)
        return loss

    history = []
    best, best_params, since = math.inf, model.params.data.copy(), 0
    for epoch in range(cfg.max_epochs if max_epochs is None else max_epochs):
        order = rng.permutation(len(tokens))
        total = 0.0
        for start in range(0, len(tokens), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ratio = rng.uniform(cfg.min_ratio, 1.0)
            mask = random_masks(rng, len(idx), L, np.full(len(idx), ratio))
            seq = np.where(mask, model.mask_id, tokens[idx])
            loss_mask = np.ones_like(mask) if cfg.loss_positions == "all" else mask
            model.params.zero_grad()
            try:
                loss = model.forward_backward(seq, labels[idx], tokens[idx], loss_mask)
                optimizer_step(opt, model.params.data, model.params.grad)
            except (NonFiniteGradient, TrainingError) as exc:
                raise TrainingError(f"epoch {epoch}: training diverged ({exc})") from exc
            total += loss * len(idx)
        v = valid_loss()
        if not math.isfinite(v):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss")
        history.append((total / len(tokens), v))
        if v < best:
            since = 0 if best - v > cfg.min_delta else since + 1
            best, best_params = v, model.params.data.copy()
        else:
            since += 1
        if callback is not None:
            callback(epoch, history[-1])
        if since >= cfg.patience:
            break
    model.params.set_vector(best_params)
    model.trained = True
    return model, history


def train_mtm(
    vqvae: VqvaeModel,
    train: Dataset,
    valid: Dataset,
    config: MtmConfig,
    seed: int,
    max_epochs: int | None = None,
) -> tuple[MtmModel, list[tuple[float, float]]]:
    """Fit the prior on the quantized codes of ``train`` (early-stopped on ``valid``)."""
    if not vqvae.trained:
        raise TrainingError("the autoencoder must be trained before the prior")
    usage = codebook_usage(vqvae, train)
    if usage.collapsed:
        raise TrainingError(
            f"collapsed codebook ({usage.distinct} codes used, perplexity {usage.perplexity:.3f}); "
            "a prior over it would be degenerate"
        )
    vc = vqvae.config
    if (config.latent_length, config.codebook_size, config.n_classes) != (
        vc.latent_length, vc.codebook_size, vc.n_classes
    ):
        raise ValueError("prior config disagrees with the autoencoder's L, K or class count")
    model, history = train_mtm_tokens(
        vqvae.tokenize(train.features, train.labels),
        train.labels,
        vqvae.tokenize(valid.features, valid.labels),
        valid.labels,
        config,
        seed,
        max_epochs=max_epochs,
    )
    model.schema_hash = train.schema.digest()
    return model, history


def fill_batch(
    model: MtmModel,
    seq: np.ndarray,
    c: np.ndarray,
    steps: int,
    rngs: list[np.random.Generator],
    temperature: float = 1.0,
    trace: list | None = None,
) -> np.ndarray:
    """Resolve every MASK entry over ``steps`` rounds, one generator per row.

    Each round samples all still-masked positions and keeps the
    ceil(remaining / rounds_left) most confident draws of each row. When
    ``trace`` is a list, the per-row commit counts of each round are appended.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    seq = np.array(seq, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    if len(rngs) != len(seq):
        raise ValueError("one generator per row required")
    mask_id = model.mask_id
    K = model.config.codebook_size
    for rnd in range(steps):
        masked = seq == mask_id
        remaining = masked.sum(axis=1)
        if not remaining.any():
            break
        rounds_left = steps - rnd
        commit = -(-remaining // rounds_left)
        probs = softmax(model.logits(seq, c) / temperature)
        u = np.stack([g.random(seq.shape[1]) for g in rngs])
        cdf = np.cumsum(probs, axis=-1)
        draw = np.minimum((cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1), K - 1)
        conf = np.take_along_axis(probs, draw[..., None], axis=-1)[..., 0]
        conf = np.where(masked, conf, -np.inf)
        order = np.argsort(-conf, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(seq.shape[1])[None].repeat(len(seq), 0), axis=1)
        take = masked & (rank < commit[:, None])
        seq[take] = draw[take]
        if trace is not None:
            trace.append(take.sum(axis=1))
    return seq


def iterative_fill(model: MtmModel, masked: np.ndarray, c: int, steps: int, seed: int) -> LatentTokens:
    """Fill one masked sequence in ``steps`` non-autoregressive rounds."""
    out = fill_batch(model, np.asarray(masked)[None], np.array([c]), steps, [stream(seed, "mtm", "fill")])
    return LatentTokens(tuple(out[0]), int(c))
