"""Brute-force reference implementations.

These are written with explicit loops and dense matrices and share no code
with the differentiable paths they check.  They back ``iman selftest`` and
the test suite.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_direct(x):
    e = [math.exp(v) for v in x]
    total = sum(e)
    return np.array([v / total for v in e])


def two_pass_stats(values):
    """Mean and population variance by two explicit passes."""
    vals = [float(v) for v in np.asarray(values).reshape(-1)]
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, var


def perceptron(x, w1, b1, w2, b2):
    x = np.asarray(x, float)
    hidden = [max(0.0, sum(x[i] * w1[i, j] for i in range(len(x))) + b1[j]) for j in range(w1.shape[1])]
    return np.array([sum(hidden[j] * w2[j, c] for j in range(len(hidden))) + b2[c] for c in range(w2.shape[1])])


def rotation_matrix(pos, head_dim, base=10000.0, scale=1.0):
    """Dense block-diagonal rotation matrix for one position."""
    R = np.zeros((head_dim, head_dim))
    for i in range(head_dim // 2):
        ang = pos * scale * base ** (-2.0 * i / head_dim)
        c, s = math.cos(ang), math.sin(ang)
        R[2 * i, 2 * i] = c
        R[2 * i, 2 * i + 1] = -s
        R[2 * i + 1, 2 * i] = s
        R[2 * i + 1, 2 * i + 1] = c
    return R


def rotary_attention_dense(X, positions, wq, wk, wv, wo, num_heads, base=10000.0, scale=1.0, key_mask=None):
    """Attention with explicit rotation matrices and an explicit n x n score matrix."""
    X = np.asarray(X, float)
    n, d = X.shape
    hd = d // num_heads
    keep = np.ones(n, bool) if key_mask is None else np.asarray(key_mask, bool)
    heads = []
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        Q = X @ wq[:, sl]
        K = X @ wk[:, sl]
        V = X @ wv[:, sl]
        S = np.full((n, n), -np.inf)
        for s in range(n):
            qs = rotation_matrix(positions[s], hd, base, scale) @ Q[s]
            for t in range(n):
                if keep[t]:
                    kt = rotation_matrix(positions[t], hd, base, scale) @ K[t]
                    S[s, t] = qs @ kt / math.sqrt(hd)
        A = np.zeros((n, n))
        for s in range(n):
            row = [math.exp(v - max(S[s][keep])) if keep[t] else 0.0 for t, v in enumerate(S[s])]
            A[s] = np.array(row) / sum(row)
        heads.append(A @ V)
    return np.concatenate(heads, axis=1) @ wo


def conv2d_loops(x, w, b, stride=1, padding=0):
    """Sliding-window cross-correlation of one ``[C,H,W]`` input."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding : padding + H, padding : padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o] if b is not None else 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def bilinear_point(img, r, c):
    """Bilinear read of one 2-D plane with zero outside; enumerates the four corners."""
    H, W = img.shape
    r0, c0 = math.floor(r), math.floor(c)
    total = 0.0
    for rr, wr in ((r0, 1 - (r - r0)), (r0 + 1, r - r0)):
        for cc, wc in ((c0, 1 - (c - c0)), (c0 + 1, c - c0)):
            if 0 <= rr < H and 0 <= cc < W:
                total += wr * wc * img[rr, cc]
    return total


def bilinear_corner_weights(r, c):
    r0, c0 = math.floor(r), math.floor(c)
    fr, fc = r - r0, c - c0
    return [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]


def algorithm1_coords(num_param):
    """Kernel coordinates via an explicit meshgrid, the way the procedure is stated."""
    base_int = int(np.round(np.sqrt(num_param)))  # numpy rounds half to even as well
    row_number = num_param // base_int
    mod_number = num_param % base_int
    px, py = np.meshgrid(np.arange(row_number), np.arange(base_int), indexing="ij")
    px, py = px.reshape(-1), py.reshape(-1)
    if mod_number > 0:
        ex, ey = np.meshgrid(np.array([row_number]), np.arange(mod_number), indexing="ij")
        px = np.concatenate([px, ex.reshape(-1)])
        py = np.concatenate([py, ey.reshape(-1)])
    return [(int(a), int(b)) for a, b in zip(px, py)]


def cafa_enumerate(x, coords, offset_w, offset_b, dw, stride=1):
    """Deformable sampling for one ``[C,H,W]`` input, one output pixel at a time."""
    C, H, W = x.shape
    N = len(coords)
    offsets = conv2d_loops(x, offset_w, offset_b, stride=stride, padding=1)
    _, Ho, Wo = offsets.shape
    out = np.zeros((C, Ho, Wo))
    for c in range(C):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for n, (pr, pc) in enumerate(coords):
                    r = i * stride + pr + offsets[n, i, j]
                    col = j * stride + pc + offsets[N + n, i, j]
                    acc += dw[c, n] * bilinear_point(x[c], r, col)
                out[c, i, j] = acc
    return out


def box_filter(x, size):
    """Mean over the ``size x size`` window anchored at each pixel's top-left."""
    C, H, W = x.shape
    out = np.full((C, H, W), np.nan)
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                out[c, i, j] = x[c, i : i + size, j : j + size].sum() / (size * size)
    return out


def auc_pairs(scores, labels):
    """Enumerate every (positive, negative) pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def metrics_by_count(scores, labels, threshold=0.5):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        if s >= threshold:
            if y == 1:
                tp += 1
            else:
                fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / len(labels),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auc": auc_pairs(scores, labels),
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
    }


def _ln(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def model_logit(model, sample, pattern_bits):
    """Straight-line single-sample forward over the compact token sequence.

    Only present image modalities contribute tokens; no attention masks are
    used.  Reads raw parameter arrays from ``model``.
    """
    cfg = model.config
    P = {k: v.data for k, v in model.named_parameters().items()}
    bits = list(pattern_bits)
    prompt_mode = cfg.missing_mode == "prompt"
    d = cfg.d_model

    toks = []
    for j, (name, vals) in enumerate((("ebv", sample.ebv), ("normal", sample.normal))):
        if bits[j] or not prompt_mode:
            v = vals if bits[j] else np.zeros_like(vals)
            toks.append(v @ P[f"field.{name}.weight"] + P[f"field.{name}.bias"])
        else:
            toks.append(P["field.placeholder"])
    fields = np.stack(toks)
    summary = fields.mean(axis=0)

    geom = algorithm1_coords(cfg.cafa_num_param)
    p = cfg.patch_size
    image_tokens = []
    for m in range(3):
        if prompt_mode and not bits[2 + m]:
            continue
        vol = sample.images[m] if bits[2 + m] else np.zeros_like(sample.images[m])
        feat = cafa_enumerate(vol, geom, P["cafa.offset_weight"], P["cafa.offset_bias"],
                              P["cafa.depthwise_weights"], cfg.cafa_stride)
        C, Ho, Wo = feat.shape
        rows = []
        for gi in range(Ho // p):
            for gj in range(Wo // p):
                patch = feat[:, gi * p : (gi + 1) * p, gj * p : (gj + 1) * p].reshape(-1)
                rows.append(patch @ P["patch.weight"])
        tok = np.stack(rows)  # [n_p, d]
        sig = perceptron(summary, P["dcmc.sigma.w1"], P["dcmc.sigma.b1"], P["dcmc.sigma.w2"], P["dcmc.sigma.b2"])
        gam = perceptron(summary, P["dcmc.gamma.w1"], P["dcmc.gamma.b1"], P["dcmc.gamma.w2"], P["dcmc.gamma.b2"])
        cal = np.empty_like(tok)
        for ch in range(d):
            mu, var = two_pass_stats(tok[:, ch])
            cal[:, ch] = sig[ch] * (tok[:, ch] - mu) / math.sqrt(var + cfg.dcmc_eps) + gam[ch]
        image_tokens.append(cal + P["modality_embed"][m])

    seq = []
    if cfg.pooling == "cls":
        seq.append(P["cls_token"][None])
    if prompt_mode:
        for k in range(5):
            seq.append(P["prompts.0.present"][k] if bits[k] else P["prompts.0.absent"][k])
    seq.append(fields)
    seq.extend(image_tokens)
    x = np.concatenate(seq, axis=0)
    positions = list(range(x.shape[0]))
    n_cls = 1 if cfg.pooling == "cls" else 0
    n_prompt = 5 * cfg.prompt_len if prompt_mode else 0

    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        if prompt_mode and 0 < i < cfg.prompt_layers:
            fresh = [P[f"prompts.{i}.present"][k] if bits[k] else P[f"prompts.{i}.absent"][k] for k in range(5)]
            x = np.concatenate([x[:n_cls], np.concatenate(fresh), x[n_cls + n_prompt :]])
        h = _ln(x, P[pre + "ln1_gain"], P[pre + "ln1_bias"], cfg.ln_eps)
        x = x + rotary_attention_dense(
            h, positions, P[pre + "attn.w_q"], P[pre + "attn.w_k"], P[pre + "attn.w_v"],
            P[pre + "attn.w_o"], cfg.num_heads, cfg.rotary_base,
        )
        h = _ln(x, P[pre + "ln2_gain"], P[pre + "ln2_bias"], cfg.ln_eps)
        x = x + _gelu(h @ P[pre + "ff_w1"] + P[pre + "ff_b1"]) @ P[pre + "ff_w2"] + P[pre + "ff_b2"]
    x = _ln(x, P["final_ln.gain"], P["final_ln.bias"], cfg.ln_eps)
    pooled = x[0] if cfg.pooling == "cls" else x.mean(axis=0)
    return float(pooled @ P["head.weight"][:, 0] + P["head.bias"][0])
