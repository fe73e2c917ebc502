"""The full network: field and image tokenizers, calibration, prompts, a
stack of rotary-attention transformer layers, pooling and a logit head."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cafa import CafaParams, cafa_forward, init_cafa_params, output_size
from .config import dump_flat, parse_flat
from .data import FIELD_MODALITIES, IMAGE_MODALITIES, MODALITIES, Cohort, PatientSample
from .dcmc import DcmcParams, dcmc_forward, init_dcmc_params
from .exceptions import ConfigurationError, DimensionError, ParameterError
from .missingness import PresencePattern, PromptBank, init_prompt_bank, select_prompts_batch
from .numerics import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    make_rng,
    no_grad,
    softplus,
    stack,
    trunc_normal,
    where,
)
from .scai import AttentionParams, RotaryFrequencies, init_attention_params, scai_attention

__all__ = [
    "ModelConfig",
    "TransformerLayer",
    "ImanModel",
    "bce_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"IMAN"
CHECKPOINT_VERSION = 1
MISSING_MODES = ("prompt", "zero_fill")
POOLINGS = ("mean", "cls")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    prompt_len: int = 2
    prompt_layers: int = 1
    cafa_num_param: int = 5
    cafa_stride: int = 1
    patch_size: int = 8
    image_shape: tuple = (1, 32, 32)
    field_dims: tuple = (4, 19)
    mlp_ratio: int = 2
    rotary_base: float = 10000.0
    dcmc_eps: float = 1e-5
    ln_eps: float = 1e-5
    pooling: str = "mean"
    missing_mode: str = "prompt"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "field_dims", tuple(int(v) for v in self.field_dims))
        self.validate()

    def validate(self) -> None:
        if self.d_model < 2 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigurationError(
                f"d_model {self.d_model} must be divisible by num_heads {self.num_heads}"
            )
        if (self.d_model // self.num_heads) % 2:
            raise ConfigurationError(f"per-head dim {self.d_model // self.num_heads} must be even")
        if len(self.field_dims) != len(FIELD_MODALITIES) or min(self.field_dims) < 1:
            raise ConfigurationError(f"field_dims must be two positive sizes, got {self.field_dims}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigurationError(f"image_shape must be C,H,W, got {self.image_shape}")
        for name in ("num_layers", "prompt_len", "cafa_num_param", "cafa_stride", "patch_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 1 <= self.prompt_layers <= self.num_layers:
            raise ConfigurationError(f"prompt_layers must be in 1..num_layers, got {self.prompt_layers}")
        _, H, W = self.image_shape
        Ho, Wo = output_size(H, W, self.cafa_stride)
        if Ho % self.patch_size or Wo % self.patch_size:
            raise ConfigurationError(
                f"feature map {Ho}x{Wo} not divisible by patch_size {self.patch_size}"
            )
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"pooling must be one of {POOLINGS}")
        if self.missing_mode not in MISSING_MODES:
            raise ConfigurationError(f"missing_mode must be one of {MISSING_MODES}")

    @property
    def grid(self) -> tuple:
        _, H, W = self.image_shape
        Ho, Wo = output_size(H, W, self.cafa_stride)
        return Ho // self.patch_size, Wo // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def uses_prompts(self) -> bool:
        return self.missing_mode == "prompt"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        return dump_flat({f"model.{k}": v for k, v in self.to_dict().items()})

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        flat = parse_flat(text)
        return cls.from_dict({k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("model.")})


@dataclass
class TransformerLayer:
    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def tensors(self) -> dict:
        out = {f"attn.{k}": v for k, v in self.attn.tensors().items()}
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            out[name] = getattr(self, name)
        return out

    def __call__(self, x, positions, freqs, key_mask, eps):
        h = layer_norm(x, self.ln1_gain, self.ln1_bias, eps)
        x = x + scai_attention(h, positions, self.attn, freqs, key_mask)
        h = layer_norm(x, self.ln2_gain, self.ln2_bias, eps)
        return x + gelu(h @ self.ff_w1 + self.ff_b1) @ self.ff_w2 + self.ff_b2


def _init_layer(cfg: ModelConfig, rng) -> TransformerLayer:
    d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    return TransformerLayer(
        attn=init_attention_params(d, cfg.num_heads, rng),
        ln1_gain=Tensor(np.ones(d)),
        ln1_bias=Tensor(np.zeros(d)),
        ln2_gain=Tensor(np.ones(d)),
        ln2_bias=Tensor(np.zeros(d)),
        ff_w1=Tensor(trunc_normal(rng, (d, hidden))),
        ff_b1=Tensor(np.zeros(hidden)),
        ff_w2=Tensor(trunc_normal(rng, (hidden, d))),
        ff_b2=Tensor(np.zeros(d)),
    )


class ImanModel:
    """Parameter container plus forward pass.

    Construct with a :class:`ModelConfig`; weights are drawn from the
    ``init`` stream of ``config.seed``.
    """

    def __init__(self, config: ModelConfig | None = None):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = make_rng(cfg.seed, "init")
        d = cfg.d_model
        C = cfg.image_shape[0]
        p = cfg.patch_size
        self.field_weights = [Tensor(trunc_normal(rng, (k, d))) for k in cfg.field_dims]
        self.field_biases = [Tensor(np.zeros(d)) for _ in cfg.field_dims]
        self.placeholder = Tensor(trunc_normal(rng, (d,)))
        self.cafa: CafaParams = init_cafa_params(C, cfg.cafa_num_param, cfg.cafa_stride)
        # no patch bias: DCMC standardizes each channel over the patch grid, which cancels it
        self.patch_weight = Tensor(trunc_normal(rng, (C * p * p, d)))
        self.modality_embed = Tensor(trunc_normal(rng, (len(IMAGE_MODALITIES), d)))
        self.dcmc: DcmcParams = init_dcmc_params(d, d, rng, eps=cfg.dcmc_eps)
        self.prompts: list[PromptBank] = (
            [init_prompt_bank(len(MODALITIES), cfg.prompt_len, d, rng) for _ in range(cfg.prompt_layers)]
            if cfg.uses_prompts
            else []
        )
        self.layers = [_init_layer(cfg, rng) for _ in range(cfg.num_layers)]
        self.final_gain = Tensor(np.ones(d))
        self.final_bias = Tensor(np.zeros(d))
        self.cls_token = Tensor(trunc_normal(rng, (d,))) if cfg.pooling == "cls" else None
        self.head_weight = Tensor(trunc_normal(rng, (d, 1)))
        self.head_bias = Tensor(np.zeros(1))
        self.freqs = RotaryFrequencies(d // cfg.num_heads, cfg.rotary_base)

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {}
        for name, w, b in zip(FIELD_MODALITIES, self.field_weights, self.field_biases):
            out[f"field.{name}.weight"] = w
            out[f"field.{name}.bias"] = b
        out["field.placeholder"] = self.placeholder
        for k, v in self.cafa.tensors().items():
            out[f"cafa.{k}"] = v
        out["patch.weight"] = self.patch_weight
        out["modality_embed"] = self.modality_embed
        for k, v in self.dcmc.tensors().items():
            out[f"dcmc.{k}"] = v
        for i, bank in enumerate(self.prompts):
            for k, v in bank.tensors().items():
                out[f"prompts.{i}.{k}"] = v
        for i, layer in enumerate(self.layers):
            for k, v in layer.tensors().items():
                out[f"layers.{i}.{k}"] = v
        out["final_ln.gain"] = self.final_gain
        out["final_ln.bias"] = self.final_bias
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def set_requires_grad(self, flag: bool = True) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag

    # -- sequence layout ------------------------------------------------------
    def n_prompt_tokens(self) -> int:
        return len(MODALITIES) * self.config.prompt_len if self.config.uses_prompts else 0

    def sequence_length(self, pattern) -> int:
        """Number of attended tokens for a presence pattern (CLS excluded)."""
        bits = pattern.bits if isinstance(pattern, PresencePattern) else tuple(pattern)
        n_img = sum(bits[2:]) if self.config.uses_prompts else len(IMAGE_MODALITIES)
        return self.n_prompt_tokens() + len(FIELD_MODALITIES) + n_img * self.config.n_patches

    def token_mask(self, present: np.ndarray) -> np.ndarray:
        present = np.asarray(present, dtype=bool)
        B = present.shape[0]
        n_pre = self.n_prompt_tokens() + len(FIELD_MODALITIES)
        if self.config.uses_prompts:
            img = np.repeat(present[:, 2:], self.config.n_patches, axis=1)
        else:
            img = np.ones((B, len(IMAGE_MODALITIES) * self.config.n_patches), dtype=bool)
        parts = [np.ones((B, n_pre), dtype=bool), img]
        if self.cls_token is not None:
            parts.insert(0, np.ones((B, 1), dtype=bool))
        return np.concatenate(parts, axis=1)

    # -- tokenizers -----------------------------------------------------------
    def tokenize_fields(self, ebv, normal, present) -> Tensor:
        """``[B, 2, d]`` field tokens; absent fields become the placeholder."""
        present = np.asarray(present, dtype=bool)
        tokens = []
        for j, (vals, w, b) in enumerate(zip((ebv, normal), self.field_weights, self.field_biases)):
            vals = np.asarray(vals, dtype=np.float64)
            if vals.ndim != 2 or vals.shape[1] != w.shape[0]:
                raise ParameterError(
                    f"{FIELD_MODALITIES[j]} field has shape {vals.shape}, expected [B, {w.shape[0]}]"
                )
            keep = present[:, j : j + 1]
            tok = Tensor(np.where(keep, vals, 0.0)) @ w + b
            if self.config.uses_prompts:
                tok = where(keep, tok, self.placeholder)
            tokens.append(tok)
        return stack(tokens, axis=1)

    def image_features(self, volumes) -> Tensor:
        """CAFA stem on ``[B, C, H, W]`` volumes."""
        vol = np.asarray(volumes, dtype=np.float64)
        if vol.shape[1:] != self.config.image_shape:
            raise DimensionError(f"image shape {vol.shape[1:]} != configured {self.config.image_shape}")
        return cafa_forward(Tensor(vol), self.cafa)

    def patchify(self, features: Tensor) -> Tensor:
        """``[B, C, H', W']`` -> ``[B, n_p, d]`` via non-overlapping patches."""
        B, C, Ho, Wo = features.shape
        p = self.config.patch_size
        gh, gw = Ho // p, Wo // p
        patches = features.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return patches.reshape(B, gh * gw, C * p * p) @ self.patch_weight

    def tokenize_images(self, volumes) -> Tensor:
        return self.patchify(self.image_features(volumes))

    def calibrate(self, tokens: Tensor, field_summary: Tensor) -> Tensor:
        """DCMC over the patch grid: channels = model width, space = patch grid."""
        B, n, d = tokens.shape
        gh, gw = self.config.grid
        grid = tokens.transpose(0, 2, 1).reshape(B, d, gh, gw)
        out = dcmc_forward(grid, field_summary, self.dcmc)
        return out.reshape(B, d, n).transpose(0, 2, 1)

    # -- forward ------------------------------------------------------------------
    def forward_arrays(self, ebv, normal, images, present) -> Tensor:
        """Logits ``[B]`` for column arrays (``images`` is ``[B, 3, C, H, W]``)."""
        cfg = self.config
        present = np.asarray(present, dtype=bool)
        images = np.asarray(images, dtype=np.float64)
        B = present.shape[0]
        if present.shape != (B, len(MODALITIES)):
            raise DimensionError(f"presence bits must be [B, 5], got {present.shape}")
        if not present.any(axis=1).all():
            raise ParameterError("every sample needs at least one present modality")
        d, M = cfg.d_model, len(IMAGE_MODALITIES)
        n_p = cfg.n_patches

        fields = self.tokenize_fields(ebv, normal, present)
        vol = np.where(present[:, 2:, None, None, None], images, 0.0)
        img_tok = self.tokenize_images(vol.reshape((B * M,) + vol.shape[2:]))
        summary = fields.mean(axis=1)  # [B, d]
        summary = summary[np.repeat(np.arange(B), M)]
        img_tok = self.calibrate(img_tok, summary).reshape(B, M, n_p, d)
        img_tok = (img_tok + self.modality_embed.reshape(1, M, 1, d)).reshape(B, M * n_p, d)

        parts = []
        if self.cls_token is not None:
            parts.append(self.cls_token.reshape(1, 1, d) * np.ones((B, 1, 1)))
        n_cls = len(parts)
        if cfg.uses_prompts:
            parts.append(select_prompts_batch(present, self.prompts[0]))
        parts += [fields, img_tok]
        x = concat(parts, axis=1)

        mask = self.token_mask(present)
        positions = np.maximum(np.cumsum(mask, axis=1) - 1, 0)
        n_prompt = self.n_prompt_tokens()
        for i, layer in enumerate(self.layers):
            if 0 < i < len(self.prompts):
                fresh = select_prompts_batch(present, self.prompts[i])
                x = concat([x[:, :n_cls], fresh, x[:, n_cls + n_prompt :]], axis=1)
            x = layer(x, positions, self.freqs, mask, cfg.ln_eps)
        x = layer_norm(x, self.final_gain, self.final_bias, cfg.ln_eps)

        if cfg.pooling == "cls":
            pooled = x[:, 0]
        else:
            w = mask / mask.sum(axis=1, keepdims=True)
            pooled = (x * w[:, :, None]).sum(axis=1)
        return (pooled @ self.head_weight + self.head_bias).reshape(B)

    def forward_cohort(self, cohort: Cohort) -> Tensor:
        return self.forward_arrays(cohort.ebv, cohort.normal, cohort.images, cohort.present)

    def forward(self, sample: PatientSample, pattern: PresencePattern | None = None) -> float:
        """Logit for one sample under ``pattern`` (defaults to its own presence bits)."""
        bits = np.array([(pattern or PresencePattern(sample.present)).bits], dtype=bool)
        with no_grad():
            out = self.forward_arrays(
                sample.ebv[None], sample.normal[None], np.stack(sample.images)[None], bits
            )
        return out.item()

    def predict_logits(self, cohort: Cohort, batch_size: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(cohort), batch_size):
                out.append(self.forward_cohort(cohort.subset(np.arange(start, min(start + batch_size, len(cohort))))).data)
        return np.concatenate(out) if out else np.zeros(0)


def bce_loss(logit, label) -> Tensor:
    """``log(1 + exp(-(2y - 1) * logit))``, elementwise; accepts scalars or arrays."""
    y = np.asarray(label, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise ParameterError("labels must be 0 or 1")
    logit = logit if isinstance(logit, Tensor) else Tensor(logit)
    return softplus(logit * (1.0 - 2.0 * y))


# -- checkpoints -----------------------------------------------------------------
def _encode_checkpoint(model: ImanModel) -> bytes:
    buf = io.BytesIO()
    cfg_text = model.config.to_text().encode("utf-8")
    params = model.named_parameters()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(f"version {CHECKPOINT_VERSION}\n".encode())
    buf.write(f"config {len(cfg_text)}\n".encode())
    buf.write(cfg_text)
    buf.write(f"params {len(params)}\n".encode())
    for name, t in params.items():
        buf.write(name.encode("utf-8") + b"\n")
        buf.write(" ".join(str(s) for s in t.shape).encode() + b"\n")
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: ImanModel, path) -> None:
    Path(path).write_bytes(_encode_checkpoint(model))


def _readline(raw: bytes, pos: int):
    end = raw.index(b"\n", pos)
    return raw[pos:end].decode("utf-8"), end + 1


def load_checkpoint(path) -> ImanModel:
    raw = Path(path).read_bytes()
    try:
        magic, pos = _readline(raw, 0)
        if magic.encode() != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not an IMAN checkpoint")
        line, pos = _readline(raw, pos)
        version = int(line.split()[1])
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        line, pos = _readline(raw, pos)
        n = int(line.split()[1])
        config = ModelConfig.from_text(raw[pos : pos + n].decode("utf-8"))
        pos += n
        line, pos = _readline(raw, pos)
        count = int(line.split()[1])
        model = ImanModel(config)
        params = model.named_parameters()
        for _ in range(count):
            name, pos = _readline(raw, pos)
            shape_line, pos = _readline(raw, pos)
            shape = tuple(int(s) for s in shape_line.split())
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            if name not in params or params[name].shape != shape:
                raise ConfigurationError(f"{path}: unexpected parameter {name} {shape}")
            params[name].data = data.reshape(shape)
    except (ValueError, IndexError, struct.error) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise ConfigurationError(f"{path}: trailing bytes in checkpoint")
    return model
