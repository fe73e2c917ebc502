"""Multi-head self-attention with rotary position encoding on queries and keys.

Each consecutive pair ``(x[2i], x[2i+1])`` of a head vector is rotated by
``pos * theta[i]``, so the query/key dot product depends on positions only
through their difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError, ParameterError
from .numerics import Tensor, _as_tensor, matmul, softmax, stack, trunc_normal

__all__ = [
    "RotaryFrequencies",
    "AttentionParams",
    "init_attention_params",
    "apply_rotation",
    "rotary_score",
    "attention_weights",
    "scai_attention",
]


@dataclass(frozen=True)
class RotaryFrequencies:
    head_dim: int
    base: float = 10000.0
    scale: float = 1.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even and positive, got {self.head_dim}")
        if not self.base > 0:
            raise ConfigurationError(f"base must be positive, got {self.base}")

    @property
    def theta(self) -> np.ndarray:
        """``scale * base**(-2i/head_dim)``; ``scale=0`` disables position."""
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.scale * self.base ** (-2.0 * i / self.head_dim)

    def angles(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        return pos[..., None] * self.theta


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ConfigurationError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.num_heads < 1 or d % self.num_heads:
            raise ConfigurationError(f"d_model {d} not divisible by num_heads {self.num_heads}")
        if (d // self.num_heads) % 2:
            raise ConfigurationError(f"per-head dim {d // self.num_heads} must be even")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def tensors(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def init_attention_params(
    d_model: int, num_heads: int, rng: np.random.Generator, std: float = 0.02
) -> AttentionParams:
    return AttentionParams(
        *(Tensor(trunc_normal(rng, (d_model, d_model), std)) for _ in range(4)),
        num_heads=num_heads,
    )


def apply_rotation(x, pos, freqs: RotaryFrequencies) -> Tensor:
    """Rotate head vectors ``x[..., head_dim]`` by their positions.

    ``pos`` broadcasts against ``x.shape[:-1]``.
    """
    x = _as_tensor(x)
    if x.shape[-1] != freqs.head_dim:
        raise DimensionError(f"vector length {x.shape[-1]} != head_dim {freqs.head_dim}")
    ang = freqs.angles(pos)
    cos, sin = np.cos(ang), np.sin(ang)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    y1 = x1 * cos - x2 * sin
    y2 = x2 * cos + x1 * sin
    return stack([y1, y2], axis=-1).reshape(x.shape)


def rotary_score(q, k, s: int, t: int, freqs: RotaryFrequencies) -> float:
    """``<R(s) q, R(t) k>``."""
    rq = apply_rotation(q, s, freqs)
    rk = apply_rotation(k, t, freqs)
    return float(np.dot(rq.data.reshape(-1), rk.data.reshape(-1)))


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, n, d = x.shape
    return x.reshape(B, n, h, d // h).transpose(0, 2, 1, 3)


def _project(X: Tensor, positions, p: AttentionParams, freqs: RotaryFrequencies, key_mask):
    if X.ndim == 2:
        X = X.reshape((1,) + X.shape)
        positions = np.asarray(positions)[None]
        key_mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None]
        squeeze = True
    else:
        squeeze = False
    B, n, d = X.shape
    if n == 0:
        raise DimensionError("attention over an empty sequence")
    if d != p.d_model:
        raise DimensionError(f"token width {d} != d_model {p.d_model}")
    if freqs.head_dim != p.head_dim:
        raise ConfigurationError(f"rotary head_dim {freqs.head_dim} != {p.head_dim}")
    positions = np.broadcast_to(np.asarray(positions), (B, n))
    if np.any(positions < 0):
        raise ParameterError("positions must be nonnegative")
    h = p.num_heads
    q = apply_rotation(_split_heads(X @ p.w_q, h), positions[:, None, :], freqs)
    k = apply_rotation(_split_heads(X @ p.w_k, h), positions[:, None, :], freqs)
    v = _split_heads(X @ p.w_v, h)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(p.head_dim))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return softmax(scores, axis=-1, mask=mask), v, squeeze


def attention_weights(X, positions, p: AttentionParams, freqs: RotaryFrequencies, key_mask=None):
    """Row-stochastic attention matrices ``[B,h,n,n]`` (or ``[h,n,n]``)."""
    attn, _, squeeze = _project(_as_tensor(X), positions, p, freqs, key_mask)
    return attn.reshape(attn.shape[1:]) if squeeze else attn


def scai_attention(
    X, positions, p: AttentionParams, freqs: RotaryFrequencies, key_mask=None
) -> Tensor:
    """Rotary multi-head self-attention; ``X`` is ``[n,d]`` or ``[B,n,d]``.

    Values are not rotated.  ``key_mask`` (``[n]`` or ``[B,n]``, True = keep)
    excludes tokens from being attended to.
    """
    X = _as_tensor(X)
    attn, v, squeeze = _project(X, positions, p, freqs, key_mask)
    out = matmul(attn, v)  # [B,h,n,hd]
    B, h, n, hd = out.shape
    out = out.transpose(0, 2, 1, 3).reshape(B, n, h * hd) @ p.w_o
    return out.reshape(out.shape[1:]) if squeeze else out
