"""Composite building blocks shared by the backbone and the PAL patch."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    activation,
    add,
    layer_norm,
    linear,
    matmul,
    narrow,
    reshape,
    scale,
    softmax,
    swapaxes,
)


def multi_head_attention(
    h: Tensor,
    w_query: Tensor,
    w_key: Tensor,
    w_value: Tensor,
    w_output: Tensor,
    mask: np.ndarray | None = None,
    query: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head projections, heads
    concatenated and mixed by ``w_output``.

    ``h`` is ``[..., seq, d]``; the head projections are stacked as
    ``[n_heads, d/n_heads, d]``; ``mask`` is a ``[..., seq]`` boolean marking
    real (non-padding) key positions.  ``query`` (default ``h``) supplies the
    attending rows, so a subset of positions can attend over all of ``h``.
    """
    n, dh, d = w_query.shape
    lead = h.shape[:-2]

    def heads(x: Tensor, w: Tensor) -> Tensor:
        seq = x.shape[-2]
        x = linear(x, reshape(w, (n * dh, d)))
        x = reshape(x, lead + (seq, n, dh))
        return swapaxes(x, -3, -2)  # [..., n, seq, dh]

    src = h if query is None else query
    q, k, v = heads(src, w_query), heads(h, w_key), heads(h, w_value)
    logits = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    key_mask = None if mask is None else mask[..., None, None, :]
    weights = softmax(logits, key_mask)
    ctx = swapaxes(matmul(weights, v), -3, -2)  # [..., seq_q, n, dh]
    ctx = reshape(ctx, lead + (src.shape[-2], n * dh))
    return linear(ctx, w_output)


def attention_weights(
    h: np.ndarray, w_query: np.ndarray, w_key: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """Per-head attention weights ``[..., n, seq, seq]`` (inspection only)."""
    n, dh, d = w_query.shape
    q = np.einsum("hkd,...sd->...hsk", w_query, h)
    k = np.einsum("hkd,...sd->...hsk", w_key, h)
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(dh)
    if mask is not None:
        logits = np.where(mask[..., None, None, :], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def feed_forward(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(activation(linear(h, w1, b1)), w2, b2)


class LayerParams:
    """Named view of one encoder layer's tensors inside a parameter mapping."""

    __slots__ = (
        "query", "key", "value", "output", "attn_gain", "attn_bias",
        "w1", "b1", "w2", "b2", "ffn_gain", "ffn_bias",
    )

    def __init__(self, params: dict[str, Tensor], index: int):
        p = f"layers.{index}."
        self.query = params[p + "attention.query"]
        self.key = params[p + "attention.key"]
        self.value = params[p + "attention.value"]
        self.output = params[p + "attention.output"]
        self.attn_gain = params[p + "attention.norm.gain"]
        self.attn_bias = params[p + "attention.norm.bias"]
        self.w1 = params[p + "ffn.w1"]
        self.b1 = params[p + "ffn.b1"]
        self.w2 = params[p + "ffn.w2"]
        self.b2 = params[p + "ffn.b2"]
        self.ffn_gain = params[p + "ffn.norm.gain"]
        self.ffn_bias = params[p + "ffn.norm.bias"]


def mh(h: Tensor, lp: LayerParams, mask: np.ndarray | None = None, query: Tensor | None = None) -> Tensor:
    return multi_head_attention(h, lp.query, lp.key, lp.value, lp.output, mask, query)


def ffn(h: Tensor, lp: LayerParams) -> Tensor:
    return feed_forward(h, lp.w1, lp.b1, lp.w2, lp.b2)


def cls_rows(h: Tensor) -> Tensor:
    return narrow(h, 0, 1, axis=-2)


def self_attention(
    h: Tensor, lp: LayerParams, mask: np.ndarray | None = None, cls_only: bool = False
) -> Tensor:
    """``LN(MH(h) + h)``; with ``cls_only`` just the first position attends."""
    hq = cls_rows(h) if cls_only else h
    return layer_norm(add(mh(h, lp, mask, hq if cls_only else None), hq), lp.attn_gain, lp.attn_bias)


def ffn_block(h: Tensor, lp: LayerParams) -> Tensor:
    """``LN(FFN(h) + h)`` where ``h`` is the self-attention output."""
    return layer_norm(add(ffn(h, lp), h), lp.ffn_gain, lp.ffn_bias)


def bert_layer(
    h: Tensor, lp: LayerParams, mask: np.ndarray | None = None, cls_only: bool = False
) -> Tensor:
    return ffn_block(self_attention(h, lp, mask, cls_only), lp)
