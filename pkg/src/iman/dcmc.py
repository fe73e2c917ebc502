"""Cross-modal calibration: standardize image features per channel, then
re-scale and re-shift them with values predicted from field features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ParameterError
from .numerics import Tensor, _as_tensor, relu, sqrt

__all__ = [
    "Perceptron",
    "DcmcParams",
    "init_dcmc_params",
    "instance_stats",
    "modulation_params",
    "dcmc_forward",
]

DEFAULT_EPS = 1e-5


@dataclass
class Perceptron:
    """``W2 @ relu(W1 @ x + b1) + b2`` (row-vector convention: ``x @ W1``)."""

    w1: Tensor  # [d_in, hidden]
    b1: Tensor  # [hidden]
    w2: Tensor  # [hidden, d_out]
    b2: Tensor  # [d_out]

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class DcmcParams:
    mlp_sigma: Perceptron
    mlp_gamma: Perceptron
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        if self.mlp_sigma.d_out != self.mlp_gamma.d_out:
            raise ParameterError("sigma and gamma perceptrons must produce the same channel count")

    @property
    def channels(self) -> int:
        return self.mlp_sigma.d_out

    @property
    def field_dim(self) -> int:
        return self.mlp_sigma.d_in

    def tensors(self) -> dict:
        out = {f"sigma.{k}": v for k, v in self.mlp_sigma.tensors().items()}
        out.update({f"gamma.{k}": v for k, v in self.mlp_gamma.tensors().items()})
        return out


def init_dcmc_params(
    field_dim: int, channels: int, rng: np.random.Generator, eps: float = DEFAULT_EPS
) -> DcmcParams:
    """Hidden width ``max(C, 2*d_F)``; zero output layers so the module starts
    as plain standardization (scale 1, shift 0)."""
    hidden = max(channels, 2 * field_dim)

    def make(bias_value):
        return Perceptron(
            w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(field_dim), (field_dim, hidden))),
            b1=Tensor(np.zeros(hidden)),
            w2=Tensor(np.zeros((hidden, channels))),
            b2=Tensor(np.full(channels, bias_value)),
        )

    return DcmcParams(mlp_sigma=make(1.0), mlp_gamma=make(0.0), eps=eps)


def instance_stats(I, eps: float = DEFAULT_EPS):
    """Per-channel spatial mean and ``sqrt(population variance + eps)``.

    Works on ``[C,H,W]`` or ``[B,C,H,W]``; returns tensors without the two
    spatial axes.
    """
    I = _as_tensor(I)
    if I.ndim < 3:
        raise DimensionError(f"expected [...,C,H,W], got shape {I.shape}")
    if I.shape[-1] * I.shape[-2] < 1:
        raise DimensionError(f"empty spatial extent in shape {I.shape}")
    mu = I.mean(axis=(-2, -1), keepdims=True)
    centered = I - mu
    var = (centered * centered).mean(axis=(-2, -1), keepdims=True)
    sd = sqrt(var + eps)
    lead = I.shape[:-2]
    return mu.reshape(lead), sd.reshape(lead)


def modulation_params(F, p: DcmcParams):
    """Scale and shift predicted from field features ``F`` (``[d_F]`` or ``[B,d_F]``)."""
    F = _as_tensor(F)
    if F.shape[-1] != p.field_dim:
        raise ParameterError(
            f"field feature length {F.shape[-1]} does not match perceptron input {p.field_dim}"
        )
    if F.ndim == 1:
        row = F.reshape(1, -1)
        return p.mlp_sigma(row).reshape(-1), p.mlp_gamma(row).reshape(-1)
    return p.mlp_sigma(F), p.mlp_gamma(F)


def dcmc_forward(I, F, p: DcmcParams) -> Tensor:
    """``sigma(F) * (I - mu(I)) / sd(I) + gamma(F)`` broadcast over space."""
    I = _as_tensor(I)
    if I.ndim not in (3, 4) or I.shape[-3] != p.channels:
        raise DimensionError(f"image features {I.shape} do not have {p.channels} channels")
    mu, sd = instance_stats(I, p.eps)
    sigma_f, gamma_f = modulation_params(F, p)
    if sigma_f.shape != mu.shape:
        raise DimensionError(
            f"field batch {sigma_f.shape} does not match image batch {mu.shape}"
        )
    spatial = mu.shape + (1, 1)
    normed = (I - mu.reshape(spatial)) / sd.reshape(spatial)
    return sigma_f.reshape(spatial) * normed + gamma_f.reshape(spatial)
