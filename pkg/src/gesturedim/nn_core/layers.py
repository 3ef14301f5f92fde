"""Layers with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises ``NoForwardState``.
Arrays flow as (..., features) for dense/norm/activation and as
(batch, frames, channels) for the temporal layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from ..errors import InvalidConfig, NoForwardState, ShapeMismatch

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _sum_leading(a: np.ndarray) -> np.ndarray:
    """Sum over all but the last axis, accumulating in float64."""
    return a.reshape(-1, a.shape[-1]).sum(axis=0, dtype=np.float64).astype(a.dtype)


class Layer:
    """Base class: owns named parameters, their gradients and child layers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}
        self._cache: Any = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NoForwardState(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def add(self, name: str, layer: "Layer") -> "Layer":
        if name in self.children or name in self.params:
            raise InvalidConfig(f"duplicate layer name {name!r}")
        self.children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            g = self.grads.get(k)
            yield prefix + k, np.zeros_like(self.params[k]) if g is None else g
        for name, child in self.children.items():
            yield from child.named_gradients(f"{prefix}{name}.")

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_gradients())

    def zero_grad(self) -> None:
        self.grads = {}
        for child in self.children.values():
            child.zero_grad()

    def load_parameters(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(tensors)
        if missing:
            raise ShapeMismatch(f"missing parameters: {sorted(missing)}")
        for name, target in own.items():
            src = np.asarray(tensors[name])
            if src.shape != target.shape:
                raise ShapeMismatch(f"{name}: expected {target.shape}, got {src.shape}")
            target[...] = src


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise InvalidConfig("dense widths must be >= 1")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["weight"] = _uniform(rng, in_dim, (in_dim, out_dim), dtype)
        self.params["bias"] = np.zeros(out_dim, dtype=dtype)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"dense expects last dim {self.in_dim}, got {x.shape[-1]}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        x2 = x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        self.grads["weight"] = x2.T @ dy2
        self.grads["bias"] = _sum_leading(dy2)
        return dy @ self.params["weight"].T


class Conv1d(Layer):
    """Temporal convolution over (batch, frames, channels), output length preserved.

    ``padding="edge"`` repeats the boundary frames, ``"zero"`` pads with zeros.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        dilation: int = 1,
        padding: str = "edge",
        dtype=np.float32,
    ):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, dilation) < 1:
            raise InvalidConfig("conv1d sizes must be >= 1")
        if padding not in ("edge", "zero"):
            raise InvalidConfig(f"unknown padding {padding!r}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.dilation, self.padding = kernel_size, dilation, padding
        fan_in = in_channels * kernel_size
        self.params["weight"] = _uniform(rng, fan_in, (kernel_size, in_channels, out_channels), dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        left = ((kernel_size - 1) * dilation) // 2
        self.offsets = [i * dilation - left for i in range(kernel_size)]

    def _gather(self, x):
        n = x.shape[1]
        cols = np.empty(x.shape[:2] + (self.kernel_size, self.in_channels), dtype=x.dtype)
        for i, o in enumerate(self.offsets):
            idx = np.arange(n) + o
            if self.padding == "edge":
                cols[:, :, i] = x[:, np.clip(idx, 0, n - 1)]
            else:
                valid = (idx >= 0) & (idx < n)
                cols[:, :, i] = 0
                cols[:, valid, i] = x[:, idx[valid]]
        return cols

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeMismatch(
                f"conv1d expects (batch, frames, {self.in_channels}), got {x.shape}"
            )
        cols = self._gather(x)
        b, n = x.shape[:2]
        self._cache = (cols, n)
        w = self.params["weight"].reshape(-1, self.out_channels)
        return (cols.reshape(b * n, -1) @ w).reshape(b, n, -1) + self.params["bias"]

    def backward(self, dy):
        cols, n = self._take_cache()
        b = dy.shape[0]
        dy2 = dy.reshape(b * n, self.out_channels)
        w = self.params["weight"].reshape(-1, self.out_channels)
        self.grads["weight"] = (cols.reshape(b * n, -1).T @ dy2).reshape(self.params["weight"].shape)
        self.grads["bias"] = _sum_leading(dy2)
        dcols = (dy2 @ w.T).reshape(b, n, self.kernel_size, self.in_channels)
        dx = np.zeros((b, n, self.in_channels), dtype=dy.dtype)
        for i, o in enumerate(self.offsets):
            src = dcols[:, :, i]
            # frames whose source index is in range; offsets may exceed the window
            lo, hi = min(n, max(0, -o)), max(0, min(n, n - o))
            if lo < hi:
                dx[:, lo + o : hi + o] += src[:, lo:hi]
            if self.padding == "edge":
                if lo > 0:
                    dx[:, 0] += src[:, :lo].sum(axis=1)
                if hi < n:
                    dx[:, n - 1] += src[:, hi:].sum(axis=1)
        return dx


class LayerNorm(Layer):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        if dim < 1:
            raise InvalidConfig("layer_norm width must be >= 1")
        self.dim, self.eps = dim, eps
        self.params["gain"] = np.ones(dim, dtype=dtype)
        self.params["bias"] = np.zeros(dim, dtype=dtype)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"layer_norm expects last dim {self.dim}, got {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gain"] + self.params["bias"]

    def backward(self, dy):
        xhat, inv = self._take_cache()
        self.grads["gain"] = _sum_leading(dy * xhat)
        self.grads["bias"] = _sum_leading(dy)
        g = dy * self.params["gain"]
        return inv * (
            g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )


class Activation(Layer):
    KINDS = ("relu", "gelu", "tanh")

    def __init__(self, kind: str = "gelu"):
        super().__init__()
        if kind not in self.KINDS:
            raise InvalidConfig(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        if self.kind == "relu":
            self._cache = x > 0
            return np.maximum(x, 0)
        if self.kind == "tanh":
            y = np.tanh(x)
            self._cache = y
            return y
        # tanh approximation of gelu
        u = _SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy):
        cache = self._take_cache()
        if self.kind == "relu":
            return dy * cache
        if self.kind == "tanh":
            return dy * (1.0 - cache * cache)
        x, t = cache
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sinusoidal_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos features, shape positions.shape + (dim,)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions[..., None] * freqs
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        enc = np.concatenate([enc, np.zeros(enc.shape[:-1] + (1,))], axis=-1)
    return enc


class SelfAttention(Layer):
    """Multi-head scaled dot-product self-attention over the frame axis."""

    def __init__(self, model_dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if heads < 1 or model_dim % heads:
            raise InvalidConfig("model_dim must be a positive multiple of heads")
        self.model_dim, self.heads = model_dim, heads
        self.head_dim = model_dim // heads
        self.qkv = self.add("qkv", Dense(model_dim, 3 * model_dim, rng, dtype))
        self.out = self.add("out", Dense(model_dim, model_dim, rng, dtype))

    def _split(self, a, b, n):
        return a.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeMismatch("attention expects (batch, frames, model_dim)")
        b, n, d = x.shape
        qkv = self.qkv.forward(x)
        q, k, v = (self._split(qkv[..., i * d : (i + 1) * d], b, n) for i in range(3))
        scale = 1.0 / math.sqrt(self.head_dim)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        self._cache = (q, k, v, a, scale)
        return self.out.forward(o)

    def backward(self, dy):
        q, k, v, a, scale = self._take_cache()
        b, _, n, _ = q.shape
        d = self.model_dim
        do = self._split(self.out.backward(dy), b, n)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(b, n, d)  # noqa: E731
        dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
        return self.qkv.backward(dqkv)


class AttentionBlock(Layer):
    """Pre-norm transformer block: x + attn(norm(x)), then h + mlp(norm(h)).

    With ``add_position`` the block first adds sinusoidal frame encodings.
    """

    def __init__(
        self,
        model_dim: int,
        heads: int,
        rng: np.random.Generator,
        mlp_ratio: int = 2,
        add_position: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        self.model_dim, self.add_position = model_dim, add_position
        self.norm1 = self.add("norm1", LayerNorm(model_dim, dtype))
        self.attn = self.add("attn", SelfAttention(model_dim, heads, rng, dtype))
        self.norm2 = self.add("norm2", LayerNorm(model_dim, dtype))
        self.fc1 = self.add("fc1", Dense(model_dim, mlp_ratio * model_dim, rng, dtype))
        self.act = self.add("act", Activation("gelu"))
        self.fc2 = self.add("fc2", Dense(mlp_ratio * model_dim, model_dim, rng, dtype))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.model_dim:
            raise ShapeMismatch(f"attention block expects (batch, frames, {self.model_dim})")
        if self.add_position:
            x = x + sinusoidal_encoding(np.arange(x.shape[1]), self.model_dim).astype(x.dtype)
        h = x + self.attn.forward(self.norm1.forward(x))
        return h + self.fc2.forward(self.act.forward(self.fc1.forward(self.norm2.forward(h))))

    def backward(self, dy):
        dh = dy + self.norm2.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dy))))
        return dh + self.norm1.backward(self.attn.backward(dh))


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]] | None = None):
        super().__init__()
        for name, layer in layers or []:
            self.add(name, layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.children.values())):
            dy = layer.backward(dy)
        return dy


class Residual(Layer):
    """x + inner(x)."""

    def __init__(self, inner: Layer):
        super().__init__()
        self.inner = self.add("inner", inner)

    def forward(self, x):
        return x + self.inner.forward(x)

    def backward(self, dy):
        return dy + self.inner.backward(dy)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description.

    kinds and their params:
      dense: in_dim, out_dim
      conv1d: in_channels, out_channels, kernel_size, dilation=1, padding="edge"
      layer_norm: dim
      activation: fn in {relu, gelu, tanh}
      attention_block: model_dim, heads, mlp_ratio=2, add_position=True
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidConfig(f"unknown layer kind {self.kind!r}")
        for key, value in self.params.items():
            if isinstance(value, int) and not isinstance(value, bool) and value < 1:
                raise InvalidConfig(f"{self.kind}.{key} must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


LAYER_KINDS = ("dense", "conv1d", "layer_norm", "activation", "attention_block")


def build_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Layer:
    p = spec.params
    if spec.kind == "dense":
        return Dense(p["in_dim"], p["out_dim"], rng, dtype)
    if spec.kind == "conv1d":
        return Conv1d(
            p["in_channels"],
            p["out_channels"],
            p["kernel_size"],
            rng,
            dilation=p.get("dilation", 1),
            padding=p.get("padding", "edge"),
            dtype=dtype,
        )
    if spec.kind == "layer_norm":
        return LayerNorm(p["dim"], dtype)
    if spec.kind == "activation":
        return Activation(p.get("fn", "gelu"))
    return AttentionBlock(
        p["model_dim"],
        p["heads"],
        rng,
        mlp_ratio=p.get("mlp_ratio", 2),
        add_position=p.get("add_position", True),
        dtype=dtype,
    )


def build_sequential(specs: list[LayerSpec], seed: int, dtype=np.float32) -> Sequential:
    rng = np.random.default_rng(seed)
    return Sequential([(f"{i}_{s.kind}", build_layer(s, rng, dtype)) for i, s in enumerate(specs)])
