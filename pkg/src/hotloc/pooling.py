"""Aggregation of refined pyramid features into a unit-norm global descriptor."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FUSER_BLOCKS = 4


def pyramid_attn_pool(features: Tensor, queries: Tensor, record: list | None = None) -> Tensor:
    """``softmax(Q F^T / sqrt(C)) F``: ``q_l`` pooled tokens from ``N`` features."""
    c = features.shape[-1]
    scores = T.matmul(queries, T.transpose(features)) * (1.0 / np.sqrt(c))
    attn = T.softmax_masked(scores)
    if record is not None:
        record.append(attn.data.copy())
    return T.matmul(attn, features)


def token_fuser(tokens: Tensor, params: Mapping[str, Tensor], prefix: str = "fuser") -> Tensor:
    """Residual token-axis MLPs: ``X + (GeLU(LN(X)^T W1 + b1) W2 + b2)^T``."""
    x = tokens
    for i in range(FUSER_BLOCKS):
        p = f"{prefix}{i}."
        h = T.transpose(T.layernorm(x, params[p + "ln.g"], params[p + "ln.b"]))
        h = T.gelu(T.linear(h, params[p + "w1"], params[p + "b1"]))
        h = T.linear(h, params[p + "w2"], params[p + "b2"])
        x = x + T.transpose(h)
    return x


def mixer_head(fused: Tensor, params: Mapping[str, Tensor], prefix: str = "mixer") -> Tensor:
    """Token mixing ``q_total -> k_bar``, channel mixing ``C -> C_bar``, flatten, L2."""
    if fused.shape[0] < params[prefix + ".token.w"].shape[0]:
        raise ValueError("mixer head needs at least as many input tokens as output tokens")
    x = T.matmul(params[prefix + ".token.w"], fused) + params[prefix + ".token.b"]
    x = T.linear(x, params[prefix + ".channel.w"], params[prefix + ".channel.b"])
    return T.l2_normalize(T.reshape(x, (-1,)))


def gem(features: Tensor, p: Tensor, eps: float = 1e-6) -> Tensor:
    """Generalized mean over rows, ``mean(clamp(x)^p)^(1/p)`` per channel."""
    x = T.maximum(features, eps)
    return T.exp(T.log(T.mean(T.exp(p * T.log(x)), axis=0)) / p)


def pyramid_descriptor(
    levels: Sequence[Tensor],
    params: Mapping[str, Tensor],
    record: list | None = None,
) -> Tensor:
    pooled = [pyramid_attn_pool(f, params[f"pool.q{l + 1}"], record) for l, f in enumerate(levels)]
    fused = token_fuser(T.concat(pooled, axis=0), params)
    return mixer_head(fused, params)


def gem_descriptor(levels: Sequence[Tensor], params: Mapping[str, Tensor], per_level: bool) -> Tensor:
    if per_level:
        pooled = T.concat([gem(f, params[f"gem.p{l + 1}"]) for l, f in enumerate(levels)], axis=0)
    else:
        pooled = gem(T.concat(list(levels), axis=0), params["gem.p"])
    y = T.linear(T.reshape(pooled, (1, -1)), params["gem.w"], params["gem.b"])
    return T.l2_normalize(T.reshape(y, (-1,)))
