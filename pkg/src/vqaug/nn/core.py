"""Layers with explicit backward passes over a single flat float64 parameter vector.

Every layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises ``RuntimeError``. Gradients
accumulate into ``Params.grad`` until ``Params.zero_grad`` is called.
"""
from __future__ import annotations

import math

import numpy as np


class Params:
    """Named views into one contiguous parameter vector and its gradient."""

    def __init__(self):
        self._order: list[str] = []
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._inits: dict[str, tuple] = {}
        self._offsets: dict[str, int] = {}
        self.size = 0
        self.data: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self._views: dict[str, np.ndarray] = {}
        self._gviews: dict[str, np.ndarray] = {}

    def declare(self, name: str, shape: tuple[int, ...], init: tuple) -> None:
        if self.data is not None:
            raise RuntimeError("parameters already allocated")
        if name in self._shapes:
            raise KeyError(f"duplicate parameter {name!r}")
        self._order.append(name)
        self._shapes[name] = tuple(int(s) for s in shape)
        self._inits[name] = init
        self._offsets[name] = self.size
        self.size += int(np.prod(shape, dtype=np.int64))

    def allocate(self, rng: np.random.Generator) -> None:
        """Create the vectors and initialise every parameter in declaration order."""
        self.data = np.zeros(self.size, dtype=np.float64)
        self.grad = np.zeros(self.size, dtype=np.float64)
        for name in self._order:
            shape = self._shapes[name]
            off = self._offsets[name]
            n = int(np.prod(shape, dtype=np.int64))
            view = self.data[off:off + n].reshape(shape)
            self._views[name] = view
            self._gviews[name] = self.grad[off:off + n].reshape(shape)
            kind, *args = self._inits[name]
            if kind == "zeros":
                pass
            elif kind == "ones":
                view[...] = 1.0
            elif kind == "uniform":
                (bound,) = args
                view[...] = rng.uniform(-bound, bound, size=shape)
            elif kind == "normal":
                (std,) = args
                view[...] = rng.standard_normal(size=shape) * std
            else:
                raise ValueError(f"unknown initialiser {kind!r}")

    @property
    def names(self) -> list[str]:
        return list(self._order)

    def offset(self, name: str) -> int:
        return self._offsets[name]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def g(self, name: str) -> np.ndarray:
        return self._gviews[name]

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def set_vector(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vector.shape}")
        self.data[...] = vector


class Module:
    """Base class: declares parameters under a name prefix and owns a contiguous slice."""

    def __init__(self, params: Params, prefix: str):
        self.params = params
        self.prefix = prefix
        self._start = params.size
        self._stop = params.size

    def _decl(self, name: str, shape, init) -> str:
        full = f"{self.prefix}.{name}" if self.prefix else name
        self.params.declare(full, shape, init)
        self._stop = self.params.size
        return full

    def _close(self) -> None:
        self._stop = self.params.size

    @property
    def param_range(self) -> tuple[int, int]:
        return self._start, self._stop

    @property
    def parameters(self) -> np.ndarray:
        return self.params.data[self._start:self._stop]

    @property
    def gradient(self) -> np.ndarray:
        return self.params.grad[self._start:self._stop]

    @property
    def n_parameters(self) -> int:
        return self._stop - self._start


def _need(cache, who: str):
    if cache is None:
        raise RuntimeError(f"{who}: backward called without a preceding forward")
    return cache


class Dense(Module):
    def __init__(self, params: Params, prefix: str, n_in: int, n_out: int, bias: bool = True):
        super().__init__(params, prefix)
        self.n_in, self.n_out = n_in, n_out
        self.w = self._decl("W", (n_in, n_out), ("uniform", 1.0 / math.sqrt(n_in)))
        self.b = self._decl("b", (n_out,), ("zeros",)) if bias else None
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.prefix}: expected last dim {self.n_in}, got {x.shape[-1]}")
        self._cache = x
        y = x @ self.params[self.w]
        if self.b is not None:
            y = y + self.params[self.b]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = _need(self._cache, self.prefix)
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.params.g(self.w)[...] += x2.T @ dy2
        if self.b is not None:
            self.params.g(self.b)[...] += dy2.sum(axis=0)
        return dy @ self.params[self.w].T


class LayerNorm(Module):
    def __init__(self, params: Params, prefix: str, dim: int, eps: float = 1e-5):
        super().__init__(params, prefix)
        self.dim, self.eps = dim, eps
        self.gamma = self._decl("gamma", (dim,), ("ones",))
        self.beta = self._decl("beta", (dim,), ("zeros",))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params[self.gamma] + self.params[self.beta]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = _need(self._cache, self.prefix)
        self.params.g(self.gamma)[...] += (dy * xhat).reshape(-1, self.dim).sum(axis=0)
        self.params.g(self.beta)[...] += dy.reshape(-1, self.dim).sum(axis=0)
        dxhat = dy * self.params[self.gamma]
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-approximated GELU; returns the activation and its derivative."""
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


class FeedForward(Module):
    def __init__(self, params: Params, prefix: str, dim: int, width: int):
        super().__init__(params, prefix)
        self.inner = Dense(params, f"{prefix}.inner", dim, width)
        self.outer = Dense(params, f"{prefix}.outer", width, dim)
        self._close()
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        h, dh = gelu(self.inner.forward(x))
        self._cache = dh
        return self.outer.forward(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = _need(self._cache, self.prefix)
        return self.inner.backward(self.outer.backward(dy) * dh)


class MultiHeadAttention(Module):
    """Bidirectional scaled dot-product self-attention.

    Keys carry no bias: a key bias shifts every score of a query equally and so
    never changes the output.
    """

    def __init__(self, params: Params, prefix: str, dim: int, n_heads: int):
        super().__init__(params, prefix)
        if dim % n_heads:
            raise ValueError(f"model_dim {dim} not divisible by n_heads {n_heads}")
        self.dim, self.n_heads, self.head_dim = dim, n_heads, dim // n_heads
        self.q = Dense(params, f"{prefix}.q", dim, dim)
        self.k = Dense(params, f"{prefix}.k", dim, dim, bias=False)
        self.v = Dense(params, f"{prefix}.v", dim, dim)
        self.o = Dense(params, f"{prefix}.o", dim, dim)
        self._close()
        self._cache = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, t, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, self.dim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        scale = 1.0 / math.sqrt(self.head_dim)
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        a = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        self._cache = (q, k, v, a, scale)
        return self.o.forward(self._merge(a @ v))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, a, scale = _need(self._cache, self.prefix)
        do = self._split(self.o.backward(dy))
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        return (
            self.q.backward(self._merge(dq))
            + self.k.backward(self._merge(dk))
            + self.v.backward(self._merge(dv))
        )


class TransformerBlock(Module):
    """Pre-norm block: ``h = x + attn(ln(x)); y = h + ff(ln(h))``."""

    def __init__(self, params: Params, prefix: str, dim: int, n_heads: int, ff_width: int):
        super().__init__(params, prefix)
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", dim)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", dim, n_heads)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", dim)
        self.ff = FeedForward(params, f"{prefix}.ff", dim, ff_width)
        self._close()

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x + self.attn.forward(self.ln1.forward(x))
        return h + self.ff.forward(self.ln2.forward(h))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = dy + self.ln2.backward(self.ff.backward(dy))
        return dh + self.ln1.backward(self.attn.backward(dh))

    def zero_output_projections(self) -> None:
        for name in (self.attn.o.w, self.attn.o.b, self.ff.outer.w, self.ff.outer.b):
            self.params[name][...] = 0.0


class TransformerStack(Module):
    """A sequence of pre-norm transformer blocks without a final normalisation.

    Construct with ``params=None`` for a standalone stack owning its own
    parameter vector (allocated immediately from ``seed``).
    """

    def __init__(
        self,
        params: Params | None,
        prefix: str,
        n_layers: int,
        n_heads: int,
        ff_width: int,
        model_dim: int,
        seed: int | None = None,
    ):
        standalone = params is None
        if standalone:
            params = Params()
        super().__init__(params, prefix)
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if model_dim % n_heads:
            raise ValueError(f"model_dim {model_dim} not divisible by n_heads {n_heads}")
        self.n_layers, self.n_heads = n_layers, n_heads
        self.ff_width, self.model_dim = ff_width, model_dim
        self.blocks = [
            TransformerBlock(params, f"{prefix}.{i}", model_dim, n_heads, ff_width)
            for i in range(n_layers)
        ]
        self._close()
        if standalone:
            params.allocate(np.random.default_rng(0 if seed is None else seed))

    @staticmethod
    def count_parameters(n_layers: int, n_heads: int, ff_width: int, model_dim: int) -> int:
        d, f = model_dim, ff_width
        attn = 4 * d * d + 3 * d
        ff = d * f + f + f * d + d
        return n_layers * (attn + ff + 4 * d)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.model_dim:
            raise ValueError(
                f"expected (batch, length, {self.model_dim}) input, got {x.shape}"
            )
        if x.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        for block in self.blocks:
            x = block.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            dy = block.backward(dy)
        return dy


class Embedding(Module):
    def __init__(self, params: Params, prefix: str, n: int, dim: int, std: float = 0.02):
        super().__init__(params, prefix)
        self.n, self.dim = n, dim
        self.table = self._decl("table", (n, dim), ("normal", std))
        self._cache = None

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            raise IndexError(f"{self.prefix}: id out of range [0, {self.n})")
        self._cache = ids
        return self.params[self.table][ids]

    def backward(self, dy: np.ndarray) -> None:
        ids = _need(self._cache, self.prefix)
        np.add.at(self.params.g(self.table), ids.reshape(-1), dy.reshape(-1, self.dim))


class PositionalEmbedding(Module):
    """Learned per-position vectors added to a (batch, length, dim) input."""

    def __init__(self, params: Params, prefix: str, length: int, dim: int, std: float = 0.02):
        super().__init__(params, prefix)
        self.length, self.dim = length, dim
        self.table = self._decl("table", (length, dim), ("normal", std))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.length:
            raise ValueError(f"{self.prefix}: expected length {self.length}, got {x.shape[1]}")
        return x + self.params[self.table]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.params.g(self.table)[...] += dy.sum(axis=0)
        return dy
