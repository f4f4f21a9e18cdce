"""Private per-client patches: ``Patch(h) = V^D g(V^E h)``.

Two forms of ``g``: ``low_rank`` (elementwise GELU) and ``pal`` (multi-head
attention inside the ``d_patch`` space, with its own output projection).
Four insertion modes wire patches into the encoder:

    inner       SA = LN(Patch(MH(h)) + h);  BL = LN(Patch(FFN(SA)) + SA)
    outer       SA = LN(MH(h) + h + Patch(h));  BL = LN(FFN(SA) + Patch(SA) + SA)
    vertical    top-layer output replaced by Patch(top-layer output)
    horizontal  BL'(h) = Patch(h) + BL(h)

Outer and horizontal with ``V^D = 0`` are exactly the unpatched layer.  Inner
and vertical are not: those equations replace the sub-layer output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, activation, add, layer_norm, linear
from .config import ModelConfig
from .layers import LayerParams, bert_layer, cls_rows, ffn, mh, multi_head_attention


@dataclass
class PatchParams:
    down: Tensor  # V^E, [d_patch, d_model]
    up: Tensor  # V^D, [d_model, d_patch]
    pal: tuple[Tensor, Tensor, Tensor, Tensor] | None = None  # query, key, value, output


def patch_sites(cfg: ModelConfig) -> list[str]:
    """Name prefixes of every patch instance implied by the insertion mode."""
    mode = cfg.insertion_mode
    if mode == "none":
        return []
    if mode == "vertical":
        return ["patches.top"]
    if mode == "horizontal":
        return [f"patches.layers.{i}" for i in range(cfg.n_layers)]
    sites = []
    for i in range(cfg.n_layers):
        sites += [f"patches.layers.{i}.attention", f"patches.layers.{i}.ffn"]
    return sites


def patch_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, ds = cfg.d_model, cfg.d_patch
    out = []
    for site in patch_sites(cfg):
        out.append((f"{site}.down", (ds, d)))
        out.append((f"{site}.up", (d, ds)))
        if cfg.patch_kind == "pal":
            ph = cfg.pal_heads
            for proj in ("query", "key", "value"):
                out.append((f"{site}.pal.{proj}", (ph, ds // ph, ds)))
            out.append((f"{site}.pal.output", (ds, ds)))
    return out


def patch_param_count(cfg: ModelConfig) -> int:
    per = 2 * cfg.d_model * cfg.d_patch
    if cfg.patch_kind == "pal":
        per += 4 * cfg.d_patch * cfg.d_patch
    return per * len(patch_sites(cfg))


def patch_stack(params: dict[str, Tensor], cfg: ModelConfig) -> dict[str, PatchParams]:
    stack = {}
    for site in patch_sites(cfg):
        pal = None
        if cfg.patch_kind == "pal":
            pal = tuple(params[f"{site}.pal.{k}"] for k in ("query", "key", "value", "output"))
        stack[site] = PatchParams(params[f"{site}.down"], params[f"{site}.up"], pal)
    return stack


def patch_apply(h: Tensor, p: PatchParams, mask: np.ndarray | None = None) -> Tensor:
    z = linear(h, p.down)
    if p.pal is None:
        z = activation(z)
    else:
        z = multi_head_attention(z, *p.pal, mask=mask)
    return linear(z, p.up)


def patched_self_attention(
    h: Tensor, lp: LayerParams, p: PatchParams, mask: np.ndarray | None = None, cls_only: bool = False
) -> Tensor:
    """Inner form of the attention sub-layer: ``LN(Patch(MH(h)) + h)``."""
    hq = cls_rows(h) if cls_only else h
    att = mh(h, lp, mask, hq if cls_only else None)
    return layer_norm(add(patch_apply(att, p, mask), hq), lp.attn_gain, lp.attn_bias)


def patched_ffn_block(
    sa: Tensor, lp: LayerParams, p: PatchParams, mask: np.ndarray | None = None
) -> Tensor:
    """Inner form of the FFN sub-layer: ``LN(Patch(FFN(SA)) + SA)``."""
    return layer_norm(add(patch_apply(ffn(sa, lp), p, mask), sa), lp.ffn_gain, lp.ffn_bias)


def patched_inner(
    h: Tensor, lp: LayerParams, p_sa: PatchParams, p_ffn: PatchParams, mask=None, cls_only=False
) -> Tensor:
    return patched_ffn_block(patched_self_attention(h, lp, p_sa, mask, cls_only), lp, p_ffn, mask)


def patched_outer(
    h: Tensor, lp: LayerParams, p_sa: PatchParams, p_ffn: PatchParams, mask=None, cls_only=False
) -> Tensor:
    hq = cls_rows(h) if cls_only else h
    sa = layer_norm(
        add(add(mh(h, lp, mask, hq if cls_only else None), hq), patch_apply(hq, p_sa, mask)),
        lp.attn_gain,
        lp.attn_bias,
    )
    out = add(add(ffn(sa, lp), patch_apply(sa, p_ffn, mask)), sa)
    return layer_norm(out, lp.ffn_gain, lp.ffn_bias)


def patched_vertical(h_top: Tensor, p: PatchParams, mask: np.ndarray | None = None) -> Tensor:
    return patch_apply(h_top, p, mask)


def patched_horizontal(h: Tensor, lp: LayerParams, p: PatchParams, mask=None, cls_only=False) -> Tensor:
    hq = cls_rows(h) if cls_only else h
    return add(patch_apply(hq, p, mask), bert_layer(h, lp, mask, cls_only))


def cls_shortcut_ok(cfg: ModelConfig) -> bool:
    """True when everything after the top layer's attention is position-wise,
    so only the [CLS] row of the top layer needs computing."""
    return cfg.insertion_mode == "none" or cfg.patch_kind == "low_rank"
