"""Differentiable building blocks: linear, multi-head self-attention, feed-forward, layer norm.

All blocks run on the autodiff tape and are verified against central finite
differences in the test suite.  Attention is bidirectional (no masking) and
uses 1/sqrt(head_dim) scaling with no internal dropout; the only stochastic
regularizer in this codebase is layer-level skipping, which lives in
`encoder`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Node,
    ParamTensor,
    Tape,
    _accum,
    add_bias,
    matmul,
    param,
    relu,
    reshape,
    softmax_last,
    transpose,
)
from .autodiff import backward  # re-exported: reverse pass entry point
from .errors import ConfigError
from .linalg import rng_fork

__all__ = [
    "LayerParams",
    "backward",
    "feed_forward_forward",
    "init_layer_params",
    "layer_norm_forward",
    "linear_forward",
    "self_attention_forward",
    "xavier_uniform",
]

LAYER_NORM_EPS = 1e-5


@dataclass
class LayerParams:
    """Parameters of one pre-norm encoder layer.

    Attention projections are bias-free D x D maps; the feed-forward block is
    D -> d_ff -> D with ReLU; each residual branch has its own norm gain/bias.
    """

    w_q: ParamTensor
    w_k: ParamTensor
    w_v: ParamTensor
    w_o: ParamTensor
    w_1: ParamTensor
    b_1: ParamTensor
    w_2: ParamTensor
    b_2: ParamTensor
    g_att: ParamTensor
    b_att: ParamTensor
    g_ff: ParamTensor
    b_ff: ParamTensor

    def all_params(self):
        yield from (
            self.g_att, self.b_att, self.w_q, self.w_k, self.w_v, self.w_o,
            self.g_ff, self.b_ff, self.w_1, self.b_1, self.w_2, self.b_2,
        )


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_layer_params(d_model: int, d_ff: int, seed: int, name: str) -> LayerParams:
    """Xavier-uniform weights, zero biases, unit norm gains; one RNG stream per tensor."""

    def w(suffix, shape):
        return ParamTensor(f"{name}.{suffix}", xavier_uniform(rng_fork(seed, f"init/{name}.{suffix}"), shape))

    def zeros(suffix, dim):
        return ParamTensor(f"{name}.{suffix}", np.zeros((1, dim)))

    def ones(suffix, dim):
        return ParamTensor(f"{name}.{suffix}", np.ones((1, dim)))

    return LayerParams(
        w_q=w("w_q", (d_model, d_model)),
        w_k=w("w_k", (d_model, d_model)),
        w_v=w("w_v", (d_model, d_model)),
        w_o=w("w_o", (d_model, d_model)),
        w_1=w("w_1", (d_model, d_ff)),
        b_1=zeros("b_1", d_ff),
        w_2=w("w_2", (d_ff, d_model)),
        b_2=zeros("b_2", d_model),
        g_att=ones("g_att", d_model),
        b_att=zeros("b_att", d_model),
        g_ff=ones("g_ff", d_model),
        b_ff=zeros("b_ff", d_model),
    )


def linear_forward(tape: Tape, x: Node, w: ParamTensor, b: ParamTensor | None = None) -> Node:
    out = matmul(tape, x, param(tape, w))
    if b is not None:
        out = add_bias(tape, out, param(tape, b))
    return out


def layer_norm_forward(tape: Tape, x: Node, gain: ParamTensor, bias: ParamTensor) -> Node:
    """Per-frame normalization to zero mean / unit variance, then affine gain/bias."""
    xv = x.value
    if xv.shape[-1] < 2:
        raise ValueError("layer norm needs at least 2 features per frame")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat * gain.value + bias.value
    d = xv.shape[-1]

    def bwd(g):
        gain.grad += (g * xhat).sum(axis=0, keepdims=True)
        bias.grad += g.sum(axis=0, keepdims=True)
        dxhat = g * gain.value
        _accum(
            x,
            inv * (dxhat
                   - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / d),
        )

    return tape.emit(out, bwd)


def self_attention_forward(
    tape: Tape,
    x: Node,
    params: LayerParams,
    heads: int,
    probs_out: list | None = None,
) -> Node:
    """Scaled dot-product multi-head self-attention over the full sequence.

    Returns the attention term only; the caller owns the residual add.  Pass
    `probs_out` to capture the (heads, T, T) attention probabilities.
    """
    t, d = x.value.shape
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    q = linear_forward(tape, x, params.w_q)
    k = linear_forward(tape, x, params.w_k)
    v = linear_forward(tape, x, params.w_v)

    def split(n):  # (T, D) -> (heads, T, dh)
        return transpose(tape, reshape(tape, n, (t, heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(tape, qh, transpose(tape, kh, (0, 2, 1)))
    scores = tape.emit(scores.value / math.sqrt(dh),
                       (lambda g, s=scores: _accum(s, g / math.sqrt(dh))))
    probs = softmax_last(tape, scores)
    if probs_out is not None:
        probs_out.append(probs.value)
    ctx = matmul(tape, probs, vh)
    merged = reshape(tape, transpose(tape, ctx, (1, 0, 2)), (t, d))
    return linear_forward(tape, merged, params.w_o)


def feed_forward_forward(tape: Tape, x: Node, params: LayerParams) -> Node:
    """Position-wise w_2 . relu(w_1 . x + b_1) + b_2; returns the branch term only."""
    if x.value.shape[-1] != params.w_1.value.shape[0]:
        raise ValueError(
            f"feed-forward shape mismatch: input {x.value.shape} vs w_1 {params.w_1.value.shape}"
        )
    h = relu(tape, linear_forward(tape, x, params.w_1, params.b_1))
    return linear_forward(tape, h, params.w_2, params.b_2)
