"""Gradient certification and oracle self-test suites.

Both suites back CLI subcommands (``gradcheck`` and ``selftest``) and the
acceptance tests.  Gradient checks run at random parameter points of a given
:class:`~iman.model.ModelConfig`; bilinear sampling and the rectifier have
kinks, so each point is redrawn until every sample position and every hidden
pre-activation sits at least a few perturbation widths from one (central
differences straddling a kink measure the average of two one-sided slopes,
not the derivative).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .cafa import (
    CafaParams,
    base_positions,
    cafa_forward,
    init_cafa_params,
    initial_coordinates,
    output_size,
    predict_offsets,
)
from .data import IMAGE_MODALITIES, MODALITIES, PatientSample
from .dcmc import Perceptron, dcmc_forward, init_dcmc_params, instance_stats, modulation_params
from .metrics import binary_report
from .missingness import apply_missing
from .model import ImanModel, ModelConfig, bce_loss
from .numerics import (
    Tensor,
    grad_check_params,
    layer_norm,
    make_rng,
    matmul,
    no_grad,
    softmax,
)
from .scai import (
    RotaryFrequencies,
    apply_rotation,
    init_attention_params,
    scai_attention,
)

__all__ = [
    "SuiteResult",
    "CheckResult",
    "gradient_suite",
    "selftest",
    "randomize_model",
    "format_suite",
    "format_selftest",
    "GRADIENT_TARGETS",
]

GRADIENT_TARGETS = ("dcmc_forward", "scai_attention", "cafa_forward", "model_loss")
_MAX_REDRAWS = 50


@dataclass
class SuiteResult:
    """Reports for one target over all random points."""

    name: str
    points: list = field(default_factory=list)  # one {param: GradCheckReport} per point
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for pt in self.points for r in pt.values())

    @property
    def max_relative_error(self) -> float:
        return max((r.max_relative_error for pt in self.points for r in pt.values()), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for pt in self.points for r in pt.values())


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# -- kink distances ---------------------------------------------------------
def _frac_distance(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.min(np.abs(x - np.round(x)))) if x.size else math.inf


def _zero_distance(x) -> float:
    return float(np.min(np.abs(x)))


def _sample_positions(images: np.ndarray, p: CafaParams) -> np.ndarray:
    with no_grad():
        off = predict_offsets(Tensor(images), p).data
    Ho, Wo = off.shape[-2:]
    return base_positions(p.geometry, Ho, Wo, p.stride) + off


def _preactivations(F: np.ndarray, mlp: Perceptron) -> np.ndarray:
    return F @ mlp.w1.data + mlp.b1.data


def _cafa_random(rng, channels, num_param, stride) -> CafaParams:
    """Random CAFA parameters whose offsets sit near half-integers.

    Offset biases are drawn from [0.3, 0.7] and offset weights are small, so
    sampled positions stay clear of the integer grid where bilinear
    interpolation has kinks.
    """
    p = init_cafa_params(channels, num_param, stride)
    p.offset_weight.data = rng.normal(scale=0.01, size=p.offset_weight.shape)
    p.offset_bias.data = rng.uniform(0.3, 0.7, size=p.offset_bias.shape) * rng.choice([-1.0, 1.0], size=p.offset_bias.shape)
    p.depthwise_weights.data = rng.normal(1.0 / num_param, 0.2, size=p.depthwise_weights.shape)
    return p


def _randomize_perceptron(mlp: Perceptron, rng) -> None:
    d_in, hidden = mlp.w1.shape
    mlp.w1.data = rng.normal(scale=1.0 / math.sqrt(d_in), size=mlp.w1.shape)
    mlp.b1.data = rng.normal(scale=0.5, size=mlp.b1.shape)
    mlp.w2.data = rng.normal(scale=1.0 / math.sqrt(hidden), size=mlp.w2.shape)
    mlp.b2.data = mlp.b2.data + rng.normal(scale=0.1, size=mlp.b2.shape)


def randomize_model(model: ImanModel, rng) -> None:
    """Move every parameter (including zero-initialized ones) to a random point."""
    cfg = model.config
    for name, t in model.named_parameters().items():
        if name.startswith(("cafa.", "dcmc.")):
            continue
        if name.endswith(("gain",)):
            t.data = 1.0 + rng.normal(scale=0.1, size=t.shape)
        elif t.ndim == 2 and not name.startswith(("modality_embed",)):
            t.data = rng.normal(scale=1.0 / math.sqrt(t.shape[0]), size=t.shape)
        else:
            t.data = rng.normal(scale=0.3, size=t.shape)
    fresh = _cafa_random(rng, cfg.image_shape[0], cfg.cafa_num_param, cfg.cafa_stride)
    for k, v in fresh.tensors().items():
        getattr(model.cafa, k).data = v.data
    _randomize_perceptron(model.dcmc.mlp_sigma, rng)
    _randomize_perceptron(model.dcmc.mlp_gamma, rng)


# -- per-target point generators ------------------------------------------------
def _dcmc_point(cfg: ModelConfig, rng, step):
    d = cfg.d_model
    gh, gw = cfg.grid
    for _ in range(_MAX_REDRAWS):
        p = init_dcmc_params(d, d, rng, eps=cfg.dcmc_eps)
        _randomize_perceptron(p.mlp_sigma, rng)
        _randomize_perceptron(p.mlp_gamma, rng)
        I = rng.normal(size=(2, d, gh, gw))
        F = rng.normal(size=(2, d))
        scale = max(1.0, np.abs(F).max(), np.abs(p.mlp_sigma.w1.data).max(), np.abs(p.mlp_gamma.w1.data).max())
        margin = 4 * step * scale
        pre = np.concatenate([_preactivations(F, p.mlp_sigma).ravel(), _preactivations(F, p.mlp_gamma).ravel()])
        if _zero_distance(pre) > margin:
            return p, I, F
    raise RuntimeError("could not draw a kink-free dcmc point")


def _check_dcmc(cfg, rng, step, tol, coords):
    p, I, F = _dcmc_point(cfg, rng, step)
    R = rng.normal(size=I.shape)
    It, Ft = Tensor(I), Tensor(F)
    params = {"I": It, "F": Ft, **{k: v for k, v in p.tensors().items()}}
    return grad_check_params(lambda: (dcmc_forward(It, Ft, p) * R).sum(), params, step, tol, coords, rng)


def _check_scai(cfg, rng, step, tol, coords):
    d = cfg.d_model
    n = len(MODALITIES) * cfg.prompt_len + 2 + len(IMAGE_MODALITIES) * cfg.n_patches  # full sequence
    p = init_attention_params(d, cfg.num_heads, rng, std=1.0 / math.sqrt(d))
    freqs = RotaryFrequencies(d // cfg.num_heads, cfg.rotary_base)
    X = Tensor(rng.normal(size=(n, d)))
    positions = np.arange(n)
    mask = rng.random(n) > 0.2
    mask[0] = True
    R = rng.normal(size=(n, d))
    params = {"X": X, **p.tensors()}
    return grad_check_params(
        lambda: (scai_attention(X, positions, p, freqs, mask) * R).sum(), params, step, tol, coords, rng
    )


def _check_cafa(cfg, rng, step, tol, coords):
    C, H, W = cfg.image_shape
    for _ in range(_MAX_REDRAWS):
        p = _cafa_random(rng, C, cfg.cafa_num_param, cfg.cafa_stride)
        I = rng.normal(size=(C, H, W))
        margin = 4 * step * max(1.0, np.abs(I).max())
        if _frac_distance(_sample_positions(I, p)) > margin:
            break
    else:
        raise RuntimeError("could not draw a kink-free cafa point")
    It = Tensor(I)
    Ho, Wo = output_size(H, W, cfg.cafa_stride)
    R = rng.normal(size=(C, Ho, Wo))
    params = {"I": It, **p.tensors()}
    return grad_check_params(lambda: (cafa_forward(It, p) * R).sum(), params, step, tol, coords, rng)


def _random_batch(cfg: ModelConfig, rng, batch):
    C, H, W = cfg.image_shape
    ebv = rng.normal(size=(batch, cfg.field_dims[0]))
    normal = rng.normal(size=(batch, cfg.field_dims[1]))
    images = rng.normal(size=(batch, len(IMAGE_MODALITIES), C, H, W))
    present = np.ones((batch, len(MODALITIES)), dtype=bool)
    # one complete row, then rows that drop a field and an image, so every
    # prompt block and the placeholder carry gradient
    for b in range(1, batch):
        present[b, rng.integers(0, 2)] = False
        present[b, 2 + rng.integers(0, 3)] = False
    labels = np.arange(batch) % 2
    return ebv, normal, images, present, labels


def _model_point(cfg: ModelConfig, rng, step, batch):
    for _ in range(_MAX_REDRAWS):
        model = ImanModel(cfg)
        randomize_model(model, rng)
        ebv, normal, images, present, labels = _random_batch(cfg, rng, batch)
        flat = images.reshape((-1,) + cfg.image_shape)
        pos_margin = 4 * step * max(1.0, np.abs(flat).max())
        if _frac_distance(_sample_positions(flat, model.cafa)) <= pos_margin:
            continue
        with no_grad():
            F = model.tokenize_fields(ebv, normal, present).data.mean(axis=1)
        dcmc = model.dcmc
        scale = max(1.0, np.abs(F).max(), np.abs(dcmc.mlp_sigma.w1.data).max(), np.abs(dcmc.mlp_gamma.w1.data).max())
        pre = np.concatenate([_preactivations(F, dcmc.mlp_sigma).ravel(), _preactivations(F, dcmc.mlp_gamma).ravel()])
        if _zero_distance(pre) > 4 * step * scale:
            return model, (ebv, normal, images, present, labels)
    raise RuntimeError("could not draw a kink-free model point")


def _check_model(cfg, rng, step, tol, coords, batch=2):
    model, (ebv, normal, images, present, labels) = _model_point(cfg, rng, step, batch)

    def loss():
        return bce_loss(model.forward_arrays(ebv, normal, images, present), labels).mean()

    reports = grad_check_params(loss, model.named_parameters(), step, tol, coords, rng)
    model.set_requires_grad(False)
    return reports


_CHECKS = {
    "dcmc_forward": _check_dcmc,
    "scai_attention": _check_scai,
    "cafa_forward": _check_cafa,
    "model_loss": _check_model,
}


def gradient_suite(
    config: ModelConfig | None = None,
    points: int = 10,
    step: float = 1e-4,
    tol: float = 1e-4,
    seed: int = 0,
    coords_per_param: int | None = 16,
    model_coords_per_param: int | None = 5,
    targets=GRADIENT_TARGETS,
) -> list:
    """Run the gradient checks; returns one :class:`SuiteResult` per target.

    ``coords_per_param`` caps the number of flat coordinates perturbed per
    tensor and point (``None`` checks all of them); the full model, with its
    ~50 tensors, uses ``model_coords_per_param`` instead.
    """
    cfg = config or ModelConfig()
    out = []
    for name in targets:
        rng = make_rng(seed, "gradcheck", name)
        res = SuiteResult(name)
        t0 = time.perf_counter()
        for _ in range(points):
            coords = model_coords_per_param if name == "model_loss" else coords_per_param
            res.points.append(_CHECKS[name](cfg, rng, step, tol, coords))
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def format_suite(results) -> str:
    lines = [f"{'target':<16}{'points':>7}{'coords':>8}{'max_rel_err':>14}{'seconds':>9}  status"]
    for r in results:
        lines.append(
            f"{r.name:<16}{len(r.points):>7}{r.checked:>8}{r.max_relative_error:>14.3e}{r.seconds:>9.1f}  "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)


# -- oracle self-test -------------------------------------------------------------
def _close(name, a, b, tol) -> CheckResult:
    err = float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float)))) if np.size(a) else 0.0
    return CheckResult(name, err <= tol, f"max abs diff {err:.3e} (tol {tol:g})")


def selftest(seed: int = 0) -> list:
    """Run every oracle-equivalence property once; returns :class:`CheckResult` rows."""
    rng = make_rng(seed, "selftest")
    res = []

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    res.append(_close("matmul vs triple loop", matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loops(a, b), 1e-12))

    x = rng.normal(size=6)
    res.append(_close("softmax vs direct formula", softmax(Tensor(x)).data, oracles.softmax_direct(x), 1e-12))

    x = rng.normal(size=8)
    mu, var = oracles.two_pass_stats(x)
    ln = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-5).data
    res.append(_close("layer_norm vs two-pass statistics", ln, (x - mu) / math.sqrt(var + 1e-5), 1e-10))

    I = rng.normal(size=(3, 4, 4))
    m, sd = instance_stats(Tensor(I), 1e-5)
    stats = [oracles.two_pass_stats(I[c]) for c in range(3)]
    res.append(
        _close("instance_stats vs two-pass", np.r_[m.data, sd.data],
               [s[0] for s in stats] + [math.sqrt(s[1] + 1e-5) for s in stats], 1e-12)
    )

    p = init_dcmc_params(5, 3, rng)
    _randomize_perceptron(p.mlp_sigma, rng)
    _randomize_perceptron(p.mlp_gamma, rng)
    F = rng.normal(size=5)
    sig, gam = modulation_params(Tensor(F), p)
    want = [oracles.perceptron(F, *(t.data for t in (mlp.w1, mlp.b1, mlp.w2, mlp.b2))) for mlp in (p.mlp_sigma, p.mlp_gamma)]
    res.append(_close("modulation_params vs perceptron loops", np.r_[sig.data, gam.data], np.r_[want[0], want[1]], 1e-12))

    freqs = RotaryFrequencies(8)
    x = rng.normal(size=8)
    res.append(_close("apply_rotation vs block matrix", apply_rotation(Tensor(x), 7, freqs).data,
                      oracles.rotation_matrix(7, 8) @ x, 1e-12))

    d, h, n = 8, 2, 4
    ap = init_attention_params(d, h, rng, std=0.5)
    X = rng.normal(size=(n, d))
    pos = np.array([0, 3, 4, 9])
    mask = np.array([True, False, True, True])
    got = scai_attention(Tensor(X), pos, ap, RotaryFrequencies(d // h), mask).data
    want = oracles.rotary_attention_dense(X, pos, *(t.data for t in (ap.w_q, ap.w_k, ap.w_v, ap.w_o)), h, key_mask=mask)
    res.append(_close("scai_attention vs dense rotation oracle", got, want, 1e-10))
    got = scai_attention(Tensor(X), pos, ap, RotaryFrequencies(d // h, scale=0.0)).data
    want = oracles.rotary_attention_dense(X, np.zeros(n), *(t.data for t in (ap.w_q, ap.w_k, ap.w_v, ap.w_o)), h)
    res.append(_close("zero-angle scai vs position-free attention", got, want, 1e-10))

    cp = _cafa_random(rng, 2, 5, 1)
    I = rng.normal(size=(2, 5, 5))
    w, bias = cp.offset_weight.data, cp.offset_bias.data
    res.append(_close("predict_offsets vs sliding window", predict_offsets(Tensor(I), cp).data,
                      oracles.conv2d_loops(I, w, bias, 1, 1), 1e-10))
    got = cafa_forward(Tensor(I), cp).data
    want = oracles.cafa_enumerate(I, cp.geometry.coords, w, bias, cp.depthwise_weights.data, 1)
    res.append(_close("cafa_forward vs exhaustive enumeration", got, want, 1e-10))
    cp2 = _cafa_random(rng, 2, 5, 2)
    got = cafa_forward(Tensor(I), cp2).data
    want = oracles.cafa_enumerate(I, cp2.geometry.coords, cp2.offset_weight.data, cp2.offset_bias.data,
                                  cp2.depthwise_weights.data, 2)
    res.append(_close("strided cafa_forward vs enumeration", got, want, 1e-10))

    box = init_cafa_params(2, 9, 1)
    I = rng.normal(size=(2, 7, 7))
    got = cafa_forward(Tensor(I), box).data[:, :5, :5]
    res.append(_close("zero-offset cafa (9 points) vs 3x3 box filter", got, oracles.box_filter(I, 3)[:, :5, :5], 1e-10))

    mismatched = [k for k in range(1, 26) if list(initial_coordinates(k).coords) != oracles.algorithm1_coords(k)]
    res.append(CheckResult("kernel coordinates vs meshgrid re-implementation", not mismatched,
                           f"mismatched num_param: {mismatched}" if mismatched else "num_param 1..25 agree"))

    worst = 0
    for _ in range(100):
        n = int(rng.integers(1, 31))
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, size=n)
        rep = binary_report(scores, labels)
        want = oracles.metrics_by_count(scores, labels)
        for k, v in want.items():
            if getattr(rep, k) != v:
                worst += 1
    res.append(CheckResult("metrics vs brute-force counts (100 sets)", worst == 0, f"{worst} mismatches"))

    cfg = ModelConfig(d_model=8, num_heads=2, num_layers=1, image_shape=(1, 8, 8), patch_size=4, seed=seed)
    model = ImanModel(cfg)
    randomize_model(model, rng)
    bits = (True, False, True, False, True)
    sample = PatientSample(0, rng.normal(size=4), rng.normal(size=19),
                           tuple(rng.normal(size=(1, 8, 8)) for _ in IMAGE_MODALITIES), (True,) * 5, 1)
    sample = apply_missing(sample, tuple(int(not b) for b in bits))
    res.append(_close("model forward vs straight-line composition", [model.forward(sample)],
                      [oracles.model_logit(model, sample, bits)], 1e-9))
    return res


def format_selftest(results) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results)
