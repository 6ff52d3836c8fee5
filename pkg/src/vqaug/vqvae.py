"""Vector-quantized autoencoder over normalized feature rows.

A row and its class are projected into ``latent_length`` tokens, encoded by a
transformer stack and snapped to the nearest codebook vectors; a second stack
decodes the code vectors (plus the class token) back to ``[0, 1]`` features.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .data import Dataset
from .nn import (
    Dense,
    Embedding,
    NonFiniteGradient,
    OptimizerState,
    Params,
    PositionalEmbedding,
    TransformerStack,
    optimizer_step,
)
from .nn import serialize
from .rng import stream

EMA_EPS = 1e-5


class TrainingError(RuntimeError):
    """Training diverged or was asked to do something impossible."""


@dataclass(frozen=True)
class VqvaeConfig:
    n_features: int
    n_classes: int
    latent_length: int = 8
    model_dim: int = 32
    n_heads: int = 2
    ff_width: int = 64
    n_layers: int = 1
    codebook_size: int = 64
    code_dim: int = 4
    alpha: float = 1.0
    beta: float = 1.0
    ema_decay: float | None = None
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 2000
    patience: int = 50
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 vectors")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.latent_length < 1 or self.code_dim < 1:
            raise ValueError("latent_length and code_dim must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("loss weights must be positive")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> VqvaeConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown vqvae config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Codebook:
    vectors: np.ndarray
    ema_decay: float | None = None
    cluster_size: np.ndarray | None = None
    ema_sum: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("codebook must be a (K >= 2, d) array")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook vectors must be finite")
        if self.ema_decay is not None:
            if not 0.0 < self.ema_decay < 1.0:
                raise ValueError("ema_decay must lie in (0, 1)")
            self.reset_ema()

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def reset_ema(self) -> None:
        self.cluster_size = np.ones(self.K)
        self.ema_sum = self.vectors.copy()

    def ema_update(self, tokens: np.ndarray, z_e: np.ndarray) -> None:
        """Move each code toward the running mean of the encoder rows assigned to it."""
        counts, sums = kernels.code_statistics(tokens.reshape(-1), z_e.reshape(-1, self.d), self.K)
        g = self.ema_decay
        self.cluster_size = g * self.cluster_size + (1 - g) * counts
        self.ema_sum = g * self.ema_sum + (1 - g) * sums
        n = self.cluster_size.sum()
        smoothed = (self.cluster_size + EMA_EPS) / (n + self.K * EMA_EPS) * n
        self.vectors = self.ema_sum / smoothed[:, None]


@dataclass
class VqLosses:
    recon: float
    embed: float
    commit: float
    total: float


def vq_losses(x, x_hat, z_e, z_q, alpha: float, beta: float) -> VqLosses:
    """Reconstruction MSE plus ``alpha`` times (embedding + ``beta``-weighted commitment)."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    z_e, z_q = np.asarray(z_e, dtype=np.float64), np.asarray(z_q, dtype=np.float64)
    if x.shape != x_hat.shape or z_e.shape != z_q.shape:
        raise ValueError("shape mismatch between inputs and reconstructions or latents")
    for a in (x, x_hat, z_e, z_q):
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to vq_losses")
    recon = float(np.mean((x - x_hat) ** 2))
    sq = float(np.mean(np.sum((z_e - z_q) ** 2, axis=-1)))
    embed, commit = sq, beta * sq
    return VqLosses(recon, embed, commit, recon + alpha * (embed + commit))


def quantize(z_e: np.ndarray, codebook: Codebook | np.ndarray, beta: float = 1.0):
    """Snap each latent row to its nearest code (lowest index on ties).

    Returns ``(tokens, z_q, embed_loss, commit_loss)``.
    """
    vectors = codebook.vectors if isinstance(codebook, Codebook) else np.asarray(codebook)
    if vectors.shape[0] == 0:
        raise ValueError("empty codebook")
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.shape[-1] != vectors.shape[1]:
        raise ValueError(f"latent dim {z_e.shape[-1]} != code dim {vectors.shape[1]}")
    flat = z_e.reshape(-1, vectors.shape[1])
    idx, dist = kernels.nearest_codes(flat, vectors)
    tokens = idx.reshape(z_e.shape[:-1])
    z_q = vectors[tokens]
    sq = float(np.mean(dist)) if dist.size else 0.0
    return tokens, z_q, sq, beta * sq


@dataclass
class EpochRecord:
    epoch: int
    split: str
    recon: float
    embed: float
    commit: float
    total: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def split(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.split == name]

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,recon,embed,commit,total,split"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.recon!r},{r.embed!r},{r.commit!r},{r.total!r},{r.split}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class VqvaeModel:
    KIND = "vqvae"

    def __init__(self, config: VqvaeConfig, seed: int = 0):
        self.config = cfg = config
        self.seed = seed
        L, D = cfg.latent_length, cfg.model_dim
        p = self.params = Params()
        self.enc_in = Dense(p, "enc.in", cfg.n_features, L * D)
        self.enc_cls = Embedding(p, "enc.cls", cfg.n_classes, D)
        self.enc_pos = PositionalEmbedding(p, "enc.pos", L + 1, D)
        self.encoder = TransformerStack(p, "enc.stack", cfg.n_layers, cfg.n_heads, cfg.ff_width, D)
        self.enc_out = Dense(p, "enc.out", D, cfg.code_dim)
        self.dec_in = Dense(p, "dec.in", cfg.code_dim, D)
        self.dec_cls = Embedding(p, "dec.cls", cfg.n_classes, D)
        self.dec_pos = PositionalEmbedding(p, "dec.pos", L + 1, D)
        self.decoder = TransformerStack(p, "dec.stack", cfg.n_layers, cfg.n_heads, cfg.ff_width, D)
        self.dec_out = Dense(p, "dec.out", L * D, cfg.n_features)
        p.allocate(stream(seed, "vqvae", "init"))
        vectors = stream(seed, "vqvae", "codebook").standard_normal((cfg.codebook_size, cfg.code_dim))
        self.codebook = Codebook(vectors * 0.02, cfg.ema_decay)
        self.trained = False
        self.schema_hash = ""

    # ---- forward pieces (batched) ----

    def _check_inputs(self, x: np.ndarray, c: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ValueError(
                f"expected (batch, {self.config.n_features}) features, got {x.shape}"
            )
        if c.shape != (x.shape[0],):
            raise ValueError("one class id per row required")
        if c.size and (c.min() < 0 or c.max() >= self.config.n_classes):
            raise ValueError("class id out of range")

    def encode_batch(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(c, dtype=np.int64)
        self._check_inputs(x, c)
        b = x.shape[0]
        patches = self.enc_in.forward(x).reshape(b, cfg.latent_length, cfg.model_dim)
        cls = self.enc_cls.forward(c)[:, None, :]
        h = self.encoder.forward(self.enc_pos.forward(np.concatenate([cls, patches], axis=1)))
        return self.enc_out.forward(h[:, 1:, :])

    def _encode_backward(self, dz: np.ndarray) -> None:
        cfg = self.config
        b = dz.shape[0]
        dh = np.zeros((b, cfg.latent_length + 1, cfg.model_dim))
        dh[:, 1:, :] = self.enc_out.backward(dz)
        dh = self.enc_pos.backward(self.encoder.backward(dh))
        self.enc_cls.backward(dh[:, 0, :])
        self.enc_in.backward(dh[:, 1:, :].reshape(b, -1))

    def decode_vectors(self, z_q: np.ndarray, c: np.ndarray) -> np.ndarray:
        cfg = self.config
        c = np.asarray(c, dtype=np.int64)
        b = z_q.shape[0]
        tok = self.dec_in.forward(z_q)
        cls = self.dec_cls.forward(c)[:, None, :]
        h = self.decoder.forward(self.dec_pos.forward(np.concatenate([cls, tok], axis=1)))
        logits = self.dec_out.forward(h[:, 1:, :].reshape(b, -1))
        return 1.0 / (1.0 + np.exp(-logits))

    def _decode_backward(self, dx_hat: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
        cfg = self.config
        b = dx_hat.shape[0]
        dlogits = dx_hat * x_hat * (1.0 - x_hat)
        dh = np.zeros((b, cfg.latent_length + 1, cfg.model_dim))
        dh[:, 1:, :] = self.dec_out.backward(dlogits).reshape(b, cfg.latent_length, cfg.model_dim)
        dh = self.dec_pos.backward(self.decoder.backward(dh))
        self.dec_cls.backward(dh[:, 0, :])
        return self.dec_in.backward(dh[:, 1:, :])

    def decode_batch(self, tokens: np.ndarray, c: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.config.latent_length:
            raise ValueError(f"expected (batch, {self.config.latent_length}) tokens")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook.K):
            raise ValueError(f"token out of range [0, {self.codebook.K})")
        c = np.asarray(c, dtype=np.int64)
        if c.shape != (tokens.shape[0],) or (c.size and (c.min() < 0 or c.max() >= self.config.n_classes)):
            raise ValueError("invalid class ids")
        return self.decode_vectors(self.codebook.vectors[tokens], c)

    def tokenize(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        tokens, _, _, _ = quantize(self.encode_batch(x, c), self.codebook, self.config.beta)
        return tokens

    def reconstruct(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        return self.decode_batch(self.tokenize(x, c), c)

    # ---- losses and gradients ----

    def forward_backward(self, x: np.ndarray, c: np.ndarray, quantizer: str = "nearest"):
        """Losses on a batch with gradients accumulated into ``params.grad``.

        With ``quantizer="identity"`` the decoder reads the encoder output
        directly, giving a fully differentiable path for gradient checks.
        Returns ``(VqLosses, tokens, z_e, codebook_grad)``.
        """
        cfg = self.config
        z_e = self.encode_batch(x, c)
        if quantizer == "identity":
            tokens, z_q = None, z_e
        elif quantizer == "nearest":
            tokens, z_q, _, _ = quantize(z_e, self.codebook, cfg.beta)
        else:
            raise ValueError(f"unknown quantizer mode {quantizer!r}")
        x_hat = self.decode_vectors(z_q, c)
        if not (np.all(np.isfinite(z_e)) and np.all(np.isfinite(x_hat))):
            raise TrainingError("non-finite activations in forward pass")
        losses = vq_losses(x, x_hat, z_e, z_q, cfg.alpha, cfg.beta)
        n_rows = x.shape[0] * cfg.latent_length
        dz_q = self._decode_backward(2.0 * (x_hat - x) / x.size, x_hat)
        # straight-through: the decoder-side gradient is copied onto the encoder output
        diff = z_e - z_q
        dz_e = dz_q + cfg.alpha * cfg.beta * 2.0 * diff / n_rows
        self._encode_backward(dz_e)
        code_grad = None
        if tokens is not None:
            code_grad = np.zeros_like(self.codebook.vectors)
            np.add.at(
                code_grad,
                tokens.reshape(-1),
                (-cfg.alpha * 2.0 / n_rows) * diff.reshape(-1, cfg.code_dim),
            )
        return losses, tokens, z_e, code_grad

    def evaluate(self, data: Dataset, batch_size: int = 512) -> VqLosses:
        """Losses averaged over a dataset (no gradient)."""
        cfg = self.config
        n = data.n_samples
        acc = np.zeros(4)
        for start in range(0, n, batch_size):
            x = data.features[start:start + batch_size]
            c = data.labels[start:start + batch_size]
            z_e = self.encode_batch(x, c)
            tokens, z_q, _, _ = quantize(z_e, self.codebook, cfg.beta)
            x_hat = self.decode_vectors(z_q, c)
            if not (np.all(np.isfinite(z_e)) and np.all(np.isfinite(x_hat))):
                return VqLosses(math.nan, math.nan, math.nan, math.nan)
            l = vq_losses(x, x_hat, z_e, z_q, cfg.alpha, cfg.beta)
            acc += len(x) * np.array([l.recon, l.embed, l.commit, l.total])
        acc /= max(n, 1)
        return VqLosses(*map(float, acc))

    # ---- snapshots ----

    def state(self) -> dict:
        cb = self.codebook
        return {
            "params": self.params.data.copy(),
            "codebook": cb.vectors.copy(),
            "cluster_size": None if cb.cluster_size is None else cb.cluster_size.copy(),
            "ema_sum": None if cb.ema_sum is None else cb.ema_sum.copy(),
        }

    def load_state(self, st: dict) -> None:
        self.params.set_vector(st["params"])
        self.codebook.vectors = st["codebook"].copy()
        if st["cluster_size"] is not None:
            self.codebook.cluster_size = st["cluster_size"].copy()
            self.codebook.ema_sum = st["ema_sum"].copy()

    def clone(self) -> VqvaeModel:
        return copy.deepcopy(self)

    # ---- persistence ----

    def to_model_file(self) -> serialize.ModelFile:
        cfg = self.config
        sizes = {
            "n_features": cfg.n_features,
            "n_classes": cfg.n_classes,
            "latent_length": cfg.latent_length,
            "model_dim": cfg.model_dim,
            "n_heads": cfg.n_heads,
            "ff_width": cfg.ff_width,
            "n_layers": cfg.n_layers,
            "codebook_size": cfg.codebook_size,
            "code_dim": cfg.code_dim,
        }
        blocks = {"codebook": self.codebook.vectors}
        if self.codebook.ema_decay is not None:
            blocks["ema_cluster_size"] = self.codebook.cluster_size
            blocks["ema_sum"] = self.codebook.ema_sum
        meta = {"config": cfg.to_dict(), "seed": self.seed, "trained": self.trained}
        return serialize.ModelFile(self.KIND, sizes, self.params.data, self.schema_hash, meta, blocks)

    def save(self, path: str | Path) -> None:
        serialize.save(path, self.to_model_file())

    @classmethod
    def load(cls, path: str | Path) -> VqvaeModel:
        mf = serialize.load(path, kind=cls.KIND)
        model = cls(VqvaeConfig.from_dict(mf.meta["config"]), seed=mf.meta.get("seed", 0))
        model.params.set_vector(mf.parameters)
        cfg = model.config
        model.codebook.vectors = mf.blocks["codebook"].reshape(cfg.codebook_size, cfg.code_dim)
        if "ema_cluster_size" in mf.blocks:
            model.codebook.cluster_size = mf.blocks["ema_cluster_size"].copy()
            model.codebook.ema_sum = mf.blocks["ema_sum"].reshape(cfg.codebook_size, cfg.code_dim)
        model.trained = bool(mf.meta.get("trained", False))
        model.schema_hash = mf.schema_hash
        return model


# ---- single-sample API ----

def encode(model: VqvaeModel, x: np.ndarray, c: int) -> np.ndarray:
    """Continuous latents (L, d) for one normalized row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.config.n_features,):
        raise ValueError(f"expected {model.config.n_features} features, got shape {x.shape}")
    return model.encode_batch(x[None], np.array([c]))[0]


def decode(model: VqvaeModel, tokens: np.ndarray, c: int) -> np.ndarray:
    """Feature row in [0, 1] for one token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return model.decode_batch(tokens[None], np.array([c]))[0]


def _init_codebook_from_data(model: VqvaeModel, train: Dataset, rng: np.random.Generator) -> None:
    """Seed the codebook with encoder outputs of random training rows."""
    cfg = model.config
    n = min(train.n_samples, 1024)
    pick = rng.choice(train.n_samples, size=n, replace=False)
    z = model.encode_batch(train.features[pick], train.labels[pick]).reshape(-1, cfg.code_dim)
    rows = rng.choice(z.shape[0], size=cfg.codebook_size, replace=z.shape[0] < cfg.codebook_size)
    jitter = rng.standard_normal((cfg.codebook_size, cfg.code_dim)) * 1e-3 * (z.std() + 1e-12)
    model.codebook.vectors = z[rows] + jitter
    if model.codebook.ema_decay is not None:
        model.codebook.reset_ema()


def train_vqvae(
    train: Dataset,
    valid: Dataset,
    config: VqvaeConfig,
    seed: int,
    max_epochs: int | None = None,
    callback=None,
) -> tuple[VqvaeModel, TrainHistory]:
    """Fit on ``train``; early-stop on the validation total loss and return the best checkpoint."""
    if not train.is_normalized() or not valid.is_normalized():
        raise TrainingError("datasets must be normalized to [0, 1]")
    if train.n_samples < 1 or valid.n_samples < 1:
        raise TrainingError("empty training or validation set")
    cfg = config
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    model = VqvaeModel(cfg, seed)
    shuffle = stream(seed, "vqvae", "shuffle")
    _init_codebook_from_data(model, train, stream(seed, "vqvae", "codebook_init"))
    opt = OptimizerState(model.params.size, lr=cfg.lr)
    code_opt = OptimizerState(model.codebook.vectors.size, lr=cfg.lr)
    history = TrainHistory()
    best_val = math.inf
    best_state = model.state()
    since_improvement = 0
    x_all, c_all = train.features, train.labels
    for epoch in range(epochs):
        order = shuffle.permutation(train.n_samples)
        sums = np.zeros(4)
        for start in range(0, train.n_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.params.zero_grad()
            try:
                losses, tokens, z_e, code_grad = model.forward_backward(x_all[idx], c_all[idx])
                optimizer_step(opt, model.params.data, model.params.grad)
                if model.codebook.ema_decay is None:
                    flat = model.codebook.vectors.reshape(-1)
                    optimizer_step(code_opt, flat, code_grad.reshape(-1))
                    model.codebook.vectors = flat.reshape(model.codebook.vectors.shape)
                else:
                    model.codebook.ema_update(tokens, z_e)
            except (NonFiniteGradient, TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {epoch}: training diverged ({exc})") from exc
            sums += len(idx) * np.array([losses.recon, losses.embed, losses.commit, losses.total])
        tr = sums / train.n_samples
        history.records.append(EpochRecord(epoch, "train", *map(float, tr)))
        val = model.evaluate(valid)
        if not math.isfinite(val.total):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss {val}")
        history.records.append(EpochRecord(epoch, "valid", val.recon, val.embed, val.commit, val.total))
        if val.total < best_val:
            if best_val - val.total > cfg.min_delta:
                since_improvement = 0
            else:
                since_improvement += 1
            best_val = val.total
            best_state = model.state()
            history.best_epoch = epoch
        else:
            since_improvement += 1
        if callback is not None:
            callback(epoch, tr, val)
        if since_improvement >= cfg.patience:
            history.stopped_early = True
            break
    model.load_state(best_state)
    model.trained = True
    model.schema_hash = train.schema.digest()
    return model, history


@dataclass
class CodebookUsage:
    histogram: np.ndarray
    perplexity: float
    collapsed: bool

    @property
    def distinct(self) -> int:
        return int(np.count_nonzero(self.histogram))


def usage_from_tokens(tokens: np.ndarray, K: int) -> CodebookUsage:
    counts = np.bincount(np.asarray(tokens).reshape(-1), minlength=K).astype(np.float64)
    total = counts.sum()
    freq = counts / total if total else counts
    nz = freq[freq > 0]
    perplexity = float(np.exp(-np.sum(nz * np.log(nz)))) if nz.size else 1.0
    collapsed = np.count_nonzero(counts) < 2 or perplexity < 1.05
    return CodebookUsage(freq, perplexity, bool(collapsed))


def codebook_usage(model: VqvaeModel, data: Dataset) -> CodebookUsage:
    """Code frequencies over ``data``, their perplexity, and a collapse flag."""
    tokens = model.tokenize(data.features, data.labels)
    return usage_from_tokens(tokens, model.codebook.K)
