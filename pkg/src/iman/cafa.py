"""Adaptive-kernel convolution: an arbitrary number of sample points per output
pixel, placed at base grid + kernel coordinates + learned offsets, read by
bilinear interpolation and combined with per-channel (depthwise) weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, EvaluationError, ParameterError
from .numerics import Tensor, _as_tensor, _result, conv2d

__all__ = [
    "KernelGeometry",
    "CafaParams",
    "initial_coordinates",
    "init_cafa_params",
    "output_size",
    "base_positions",
    "predict_offsets",
    "resample_bilinear",
    "cafa_forward",
]


@dataclass(frozen=True)
class KernelGeometry:
    num_param: int
    coords: tuple  # ((row, col), ...)

    def __post_init__(self):
        if len(self.coords) != self.num_param:
            raise ParameterError(
                f"geometry has {len(self.coords)} coordinates for num_param={self.num_param}"
            )
        if len(set(self.coords)) != self.num_param:
            raise ParameterError("kernel coordinates must be distinct")

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.coords], dtype=np.float64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.coords], dtype=np.float64)


def initial_coordinates(num_param: int) -> KernelGeometry:
    """Regular ``row_number x base_int`` grid plus a partial extra row.

    ``round`` is Python's round-half-to-even applied to ``sqrt(num_param)``.
    """
    if not isinstance(num_param, (int, np.integer)) or num_param < 1:
        raise ParameterError(f"num_param must be a positive integer, got {num_param!r}")
    num_param = int(num_param)
    base_int = round(math.sqrt(num_param))
    row_number = num_param // base_int
    mod_number = num_param % base_int
    coords = [(r, c) for r in range(row_number) for c in range(base_int)]
    coords += [(row_number, c) for c in range(mod_number)]
    return KernelGeometry(num_param, tuple(coords))


@dataclass
class CafaParams:
    geometry: KernelGeometry
    offset_weight: Tensor  # [2N, C, 3, 3]
    offset_bias: Tensor  # [2N]
    depthwise_weights: Tensor  # [C, N]
    stride: int = 1

    def __post_init__(self):
        n = self.geometry.num_param
        if self.offset_weight.shape[0] != 2 * n or self.offset_bias.shape != (2 * n,):
            raise ParameterError(
                f"offset conv must produce {2 * n} channels, got {self.offset_weight.shape[0]}"
            )
        if self.depthwise_weights.shape[1] != n:
            raise ParameterError(
                f"depthwise weights {self.depthwise_weights.shape} do not cover {n} points"
            )
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.depthwise_weights.shape[0]

    def tensors(self) -> dict:
        return {
            "offset_weight": self.offset_weight,
            "offset_bias": self.offset_bias,
            "depthwise_weights": self.depthwise_weights,
        }


def init_cafa_params(channels: int, num_param: int, stride: int = 1) -> CafaParams:
    """Zero offset predictor and uniform ``1/num_param`` depthwise weights."""
    geom = initial_coordinates(num_param)
    return CafaParams(
        geometry=geom,
        offset_weight=Tensor(np.zeros((2 * num_param, channels, 3, 3))),
        offset_bias=Tensor(np.zeros(2 * num_param)),
        depthwise_weights=Tensor(np.full((channels, num_param), 1.0 / num_param)),
        stride=stride,
    )


def output_size(h: int, w: int, stride: int) -> tuple:
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def base_positions(geometry: KernelGeometry, h_out: int, w_out: int, stride: int) -> np.ndarray:
    """Offset-free absolute positions ``P0 + Pn``, shape ``[2N, H', W']`` (rows, then cols)."""
    r0 = (np.arange(h_out) * stride).astype(np.float64)
    c0 = (np.arange(w_out) * stride).astype(np.float64)
    rows = geometry.rows[:, None, None] + r0[None, :, None] + np.zeros((1, 1, w_out))
    cols = geometry.cols[:, None, None] + c0[None, None, :] + np.zeros((1, h_out, 1))
    return np.concatenate([rows, cols], axis=0)


def _batched(x: Tensor):
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def predict_offsets(I, p: CafaParams) -> Tensor:
    """3x3 convolution (padding 1, sampling stride) giving ``2N`` offset channels."""
    I, squeeze = _batched(_as_tensor(I))
    if I.shape[1] != p.offset_weight.shape[1]:
        raise DimensionError(
            f"input has {I.shape[1]} channels, offset conv expects {p.offset_weight.shape[1]}"
        )
    out = conv2d(I, p.offset_weight, p.offset_bias, stride=p.stride, padding=1)
    return out.reshape(out.shape[1:]) if squeeze else out


_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))  # lt, rt, lb, rb


def resample_bilinear(I, P) -> Tensor:
    """Bilinear reads of ``I`` at absolute positions ``P``.

    ``I`` is ``[C,H,W]`` or ``[B,C,H,W]``; ``P`` is ``[2N,H',W']`` (or batched)
    with row coordinates in the first ``N`` channels and column coordinates in
    the last ``N``.  Returns ``[C,N,H',W']`` (or batched).  Corners outside the
    image contribute zero.
    """
    I, squeeze = _batched(_as_tensor(I))
    P, _ = _batched(_as_tensor(P))
    B, C, H, W = I.shape
    if P.shape[0] != B or P.shape[1] % 2:
        raise DimensionError(f"positions {P.shape} incompatible with input {I.shape}")
    pos = P.data
    if not np.all(np.isfinite(pos)):
        raise EvaluationError("non-finite sampling position")
    N = P.shape[1] // 2
    Ho, Wo = P.shape[2:]
    K = N * Ho * Wo
    pr = pos[:, :N].reshape(B, K)
    pc = pos[:, N:].reshape(B, K)
    r0 = np.floor(pr)
    c0 = np.floor(pc)
    fr = pr - r0
    fc = pc - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    flat = I.data.reshape(-1)
    # offset of each (b, c) plane inside the flattened input
    plane = (np.arange(B * C, dtype=np.int64) * (H * W)).reshape(B, C, 1)

    corners = []
    out = np.zeros((B, C, K))
    for dr, dc in _CORNERS:
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        idx = np.where(valid, rr * W + cc, 0)
        gidx = plane + idx[:, None, :]
        vals = flat.take(gidx)
        vals *= valid[:, None, :]
        wr = fr if dr else 1.0 - fr
        wc = fc if dc else 1.0 - fc
        out += (wr * wc)[:, None, :] * vals
        corners.append((gidx, valid, wr, wc, vals))

    def back(g):
        g = g.reshape(B, C, K)
        gI = None
        if I.requires_grad:
            gI = np.zeros(B * C * H * W)
            for gidx, valid, wr, wc, _ in corners:
                contrib = g * ((wr * wc) * valid)[:, None, :]
                gI += np.bincount(gidx.reshape(-1), weights=contrib.reshape(-1), minlength=gI.size)
            gI = gI.reshape(B, C, H, W)
        gP = None
        if P.requires_grad:
            d_fr = np.zeros((B, K))
            d_fc = np.zeros((B, K))
            for (_, _, wr, wc, vals), (dr, dc) in zip(corners, _CORNERS):
                gv = (g * vals).sum(axis=1)
                d_fr += gv * (wc if dr else -wc)
                d_fc += gv * (wr if dc else -wr)
            gP = np.concatenate(
                [d_fr.reshape(B, N, Ho, Wo), d_fc.reshape(B, N, Ho, Wo)], axis=1
            )
        return gI, gP

    res = _result(out.reshape(B, C, N, Ho, Wo), (I, P), back)
    return res.reshape(res.shape[1:]) if squeeze else res


def cafa_forward(I, p: CafaParams) -> Tensor:
    """Offsets -> absolute positions -> bilinear samples -> depthwise sum.

    ``[C,H,W] -> [C,H',W']`` (batched inputs keep their leading axis).
    """
    I, squeeze = _batched(_as_tensor(I))
    B, C, H, W = I.shape
    if C != p.channels:
        raise DimensionError(f"input has {C} channels, CAFA params expect {p.channels}")
    offsets = predict_offsets(I, p)
    Ho, Wo = offsets.shape[2:]
    positions = offsets + base_positions(p.geometry, Ho, Wo, p.stride)[None]
    samples = resample_bilinear(I, positions)  # [B,C,N,H',W']
    N = p.geometry.num_param
    out = (samples * p.depthwise_weights.reshape(1, C, N, 1, 1)).sum(axis=2)
    return out.reshape(out.shape[1:]) if squeeze else out
