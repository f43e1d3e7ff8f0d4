"""Feature map -> token sequence: 1x1 projection, flattening, quality token, positions."""

from __future__ import annotations

import math

import numpy as np

from .backbone import FeatureMap
from .errors import ShapeError
from .tensor import Tensor, as_tensor, broadcast_to, concat, matmul, reshape


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def xavier_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_embedding_params(in_channels, dim, n_tokens, rng, dtype=np.float32):
    """Projection plus separate quality tokens / position tables for the two streams.

    ``n_tokens`` is N, the number of spatial cells; position tables hold 1 + N rows.
    """
    raw = {
        "embed.proj.w": xavier_uniform(rng, in_channels, dim),
        "embed.proj.b": np.zeros(dim),
        "embed.token_enc": trunc_normal(rng, (1, dim)),
        "embed.token_dec": trunc_normal(rng, (1, dim)),
        "embed.pos_enc": trunc_normal(rng, (1 + n_tokens, dim)),
        "embed.pos_dec": trunc_normal(rng, (1 + n_tokens, dim)),
    }
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in raw.items()}


def project_and_flatten(f, weight, bias):
    """Map each spatial cell C -> D and flatten row-major.

    ``f`` is a FeatureMap or an array of shape (..., H, W, C); the result has
    shape (..., H*W, D) with row k taken from cell (k // W, k % W).
    """
    values = f.values if isinstance(f, FeatureMap) else f
    values = values.data if isinstance(values, Tensor) else np.asarray(values)
    weight = as_tensor(weight)
    *lead, h, w, c = values.shape
    if c != weight.shape[0]:
        raise ShapeError(f"feature map has {c} channels but the projection expects {weight.shape[0]}")
    x = reshape(Tensor(values, dtype=weight.dtype), (*lead, h * w, c))
    return matmul(x, weight) + bias


def assemble_sequence(x, token, pos):
    """Prepend the quality token to ``x`` (..., N, D) and add positions (1 + N, D)."""
    x, token, pos = as_tensor(x), as_tensor(token), as_tensor(pos)
    n, d = x.shape[-2], x.shape[-1]
    if token.shape != (1, d):
        raise ShapeError(f"quality token must be 1 x {d}, got {token.shape}")
    if pos.shape != (1 + n, d):
        raise ShapeError(f"position table must be {1 + n} x {d}, got {pos.shape}")
    lead = x.shape[:-2]
    tok = broadcast_to(token, (*lead, 1, d)) if lead else token
    return concat([tok, x], axis=-2) + pos
