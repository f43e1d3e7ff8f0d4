"""Post-norm transformer encoder/decoder, multi-head attention and the score head.

Parameters are a flat ``{name: Tensor}`` dict; layer ``i`` of the encoder uses
the ``enc.{i}.*`` entries, decoder layers ``dec.{i}.*`` and the head ``head.*``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .embedding import xavier_uniform
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, concat, layer_norm, matmul, relu, reshape, softmax

LN_EPS = 1e-6


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 256
    ff_dim: int = 1024
    head_dim: int = 512

    def __post_init__(self):
        if min(self.layers, self.heads, self.dim, self.ff_dim, self.head_dim) < 1:
            raise ConfigError(f"transformer extents must be >= 1: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"width {self.dim} is not divisible by {self.heads} heads")

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionRecord:
    stage: str  # encoder | decoder-self | decoder-cross
    layer: int
    head: int
    weights: np.ndarray  # (..., queries, keys)


# --- initialisation --------------------------------------------------------


def _linear_params(rng, prefix, fan_in, fan_out):
    return {f"{prefix}.w": xavier_uniform(rng, fan_in, fan_out), f"{prefix}.b": np.zeros(fan_out)}


def _attention_params(rng, prefix, dim):
    out = {}
    for name in ("q", "k", "v", "o"):
        out.update(_linear_params(rng, f"{prefix}.{name}", dim, dim))
    return out


def _ln_params(prefix, dim):
    return {f"{prefix}.g": np.ones(dim), f"{prefix}.b": np.zeros(dim)}


def _mlp_params(rng, prefix, dim, ff_dim):
    return {**_linear_params(rng, f"{prefix}.fc1", dim, ff_dim), **_linear_params(rng, f"{prefix}.fc2", ff_dim, dim)}


def init_transformer_params(cfg, rng, dtype=np.float32):
    raw = {}
    d = cfg.dim
    for i in range(cfg.layers):
        p = f"enc.{i}"
        raw.update(_attention_params(rng, f"{p}.attn", d))
        raw.update(_ln_params(f"{p}.ln1", d))
        raw.update(_mlp_params(rng, f"{p}.mlp", d, cfg.ff_dim))
        raw.update(_ln_params(f"{p}.ln2", d))
    for i in range(cfg.layers):
        p = f"dec.{i}"
        raw.update(_attention_params(rng, f"{p}.self", d))
        raw.update(_ln_params(f"{p}.ln1", d))
        raw.update(_attention_params(rng, f"{p}.cross", d))
        raw.update(_ln_params(f"{p}.ln2", d))
        raw.update(_mlp_params(rng, f"{p}.mlp", d, cfg.ff_dim))
        raw.update(_ln_params(f"{p}.ln3", d))
    raw.update(_linear_params(rng, "head.fc1", d, cfg.head_dim))
    raw.update(_linear_params(rng, "head.fc2", cfg.head_dim, 1))
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in raw.items()}


# --- building blocks -------------------------------------------------------


def linear(x, params, prefix):
    return matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def _ln(x, params, prefix):
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], LN_EPS)


def mlp(x, params, prefix):
    return linear(relu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def multi_head_attention(q, k, v, params, prefix, n_heads, trace=False, stage="encoder", layer=0):
    """Scaled dot-product attention over ``n_heads`` heads.

    Returns ``(output, records)``; ``records`` holds one AttentionRecord per
    head when ``trace`` is set and is empty otherwise.
    """
    width = q.shape[-1]
    if width % n_heads:
        raise ConfigError(f"width {width} is not divisible by {n_heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys ({k.shape}) and values ({v.shape}) disagree in length")
    qp = linear(q, params, f"{prefix}.q")
    kp = linear(k, params, f"{prefix}.k")
    vp = linear(v, params, f"{prefix}.v")
    d = width // n_heads
    scale = 1.0 / math.sqrt(d)
    heads, records = [], []
    for h in range(n_heads):
        cols = (Ellipsis, slice(h * d, (h + 1) * d))
        scores = matmul(qp[cols], kp[cols].T) * scale
        attn = softmax(scores, axis=-1)
        if trace:
            records.append(AttentionRecord(stage, layer, h, attn.data.copy()))
        heads.append(matmul(attn, vp[cols]))
    out = linear(concat(heads, axis=-1) if n_heads > 1 else heads[0], params, f"{prefix}.o")
    return out, records


def _check_width(x, cfg, what):
    if x.shape[-1] != cfg.dim:
        raise ShapeError(f"{what} width {x.shape[-1]} does not match transformer width {cfg.dim}")


def encoder_forward(seq, params, cfg, records=None):
    """``cfg.layers`` post-norm self-attention layers. Appends attention records to ``records`` if given."""
    _check_width(seq, cfg, "encoder input")
    trace = records is not None
    y = seq
    for i in range(cfg.layers):
        p = f"enc.{i}"
        a, rec = multi_head_attention(y, y, y, params, f"{p}.attn", cfg.heads, trace, "encoder", i)
        y = _ln(a + y, params, f"{p}.ln1")
        y = _ln(mlp(y, params, f"{p}.mlp") + y, params, f"{p}.ln2")
        if trace:
            records.extend(rec)
    return y


def decoder_forward(seq, enc_out, params, cfg, records=None):
    """Self-attention, then cross-attention with ``enc_out`` as keys/values, then the MLP."""
    _check_width(seq, cfg, "decoder input")
    _check_width(enc_out, cfg, "encoder output")
    if enc_out.shape[-2] != seq.shape[-2]:
        raise ShapeError(f"encoder output has {enc_out.shape[-2]} rows, decoder input {seq.shape[-2]}")
    trace = records is not None
    z = seq
    for i in range(cfg.layers):
        p = f"dec.{i}"
        a, rec_self = multi_head_attention(z, z, z, params, f"{p}.self", cfg.heads, trace, "decoder-self", i)
        z = _ln(a + z, params, f"{p}.ln1")
        c, rec_cross = multi_head_attention(z, enc_out, enc_out, params, f"{p}.cross", cfg.heads, trace,
                                            "decoder-cross", i)
        z = _ln(c + z, params, f"{p}.ln2")
        z = _ln(mlp(z, params, f"{p}.mlp") + z, params, f"{p}.ln3")
        if trace:
            records.extend(rec_self + rec_cross)
    return z


def head_forward(f0, params):
    """FC -> ReLU -> FC(1) on the (..., 1, D) quality row; returns shape ``f0.shape[:-2]``."""
    if f0.shape[-2] != 1:
        raise ShapeError(f"head expects a single quality row, got {f0.shape}")
    hidden = relu(linear(f0, params, "head.fc1"))
    out = linear(hidden, params, "head.fc2")
    return reshape(out, out.shape[:-2])


# --- attention heat maps ---------------------------------------------------


def bilinear_resize(a, out_h, out_w):
    """Resize a 2-D array with half-pixel-centred bilinear interpolation."""
    in_h, in_w = a.shape

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(out_h, in_h)
    x0, x1, fx = coords(out_w, in_w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def attention_grid(records, grid=None):
    """Mean attention received by each spatial token, as a (H, W) grid.

    The quality row and column are dropped from every record before averaging.
    """
    if not records:
        raise ContractError("no attention records to export")
    received = []
    for rec in records:
        w = np.asarray(rec.weights, dtype=np.float64)[..., 1:, 1:]
        w = w.reshape(-1, *w.shape[-2:])
        received.append(w.mean(axis=(0, 1)))
    vec = np.mean(received, axis=0)
    n = vec.size
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ShapeError(f"{n} tokens do not form a square grid; pass grid=(h, w)")
        grid = (side, side)
    if grid[0] * grid[1] != n:
        raise ShapeError(f"grid {grid} does not hold {n} tokens")
    return vec.reshape(grid)


def export_attention(records, image_h, image_w, grid=None):
    """Averaged attention resized to the image and min-max scaled to [0, 1].

    A constant map (e.g. uniform attention) has no range and comes back all zeros.
    """
    heat = bilinear_resize(attention_grid(records, grid), image_h, image_w)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def heatmap_to_uint8(heat):
    return np.clip(np.rint(np.asarray(heat) * 255.0), 0, 255).astype(np.uint8)
