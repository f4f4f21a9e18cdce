"""Transformer encoder backbone and the scalar matching head.

Input is ``[CLS] question [SEP] answer [SEP]`` with segment id 0 up to and
including the first ``[SEP]`` and 1 afterwards.  The score is
``head.weight . h_CLS + head.bias``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import patch as _patch
from .autodiff import Tensor, add, embedding, linear, select
from .config import ModelConfig
from .layers import LayerParams, attention_weights, bert_layer, ffn_block, self_attention

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")

__all__ = [
    "Vocabulary",
    "tokenize",
    "backbone_shapes",
    "parameter_shapes",
    "init_parameter",
    "init_parameters",
    "to_tensors",
    "embed",
    "self_attention",
    "ffn_block",
    "bert_layer",
    "encode",
    "score",
    "score_batch",
    "build_input",
    "pad_batch",
    "attention_weights",
]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token string <-> id map with reserved ids PAD=0, CLS=1, SEP=2, UNK=3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[Iterable[str]]) -> "Vocabulary":
        seen = set()
        for toks in texts:
            seen.update(toks)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])


# --------------------------------------------------------------------------- #
# parameters
# --------------------------------------------------------------------------- #
def backbone_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, n, dff = cfg.d_model, cfg.n_heads, cfg.d_ff
    shapes = [
        ("embeddings.token", (cfg.vocab_size, d)),
        ("embeddings.position", (cfg.max_seq_len, d)),
        ("embeddings.segment", (2, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attention.query", (n, d // n, d)),
            (p + "attention.key", (n, d // n, d)),
            (p + "attention.value", (n, d // n, d)),
            (p + "attention.output", (d, d)),
            (p + "attention.norm.gain", (d,)),
            (p + "attention.norm.bias", (d,)),
            (p + "ffn.w1", (dff, d)),
            (p + "ffn.b1", (dff,)),
            (p + "ffn.w2", (d, dff)),
            (p + "ffn.b2", (d,)),
            (p + "ffn.norm.gain", (d,)),
            (p + "ffn.norm.bias", (d,)),
        ]
    shapes += [("head.weight", (d,)), ("head.bias", ())]
    return shapes


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter of the full client model, in canonical order."""
    return backbone_shapes(cfg) + _patch.patch_shapes(cfg)


def _init_kind(name: str) -> str:
    if name.endswith(".gain"):
        return "one"
    if name.endswith((".bias", ".b1", ".b2")) or name.endswith(".up"):
        return "zero"
    return "normal"


def init_parameter(name: str, shape: tuple[int, ...], std: float, seed_words: Iterable[int]) -> np.ndarray:
    """Initialize one tensor from a stream keyed by ``(seed_words, name)``.

    Keying by name keeps a parameter's starting value independent of which
    other parameters exist in the model.
    """
    kind = _init_kind(name)
    if kind == "one":
        return np.ones(shape)
    if kind == "zero":
        return np.zeros(shape)
    ss = np.random.SeedSequence([*seed_words, zlib.crc32(name.encode("utf-8"))])
    return np.random.default_rng(ss).normal(0.0, std, size=shape)


def init_parameters(
    cfg: ModelConfig, seed_words: Iterable[int], names: Iterable[str] | None = None
) -> dict[str, np.ndarray]:
    seed_words = tuple(seed_words)
    wanted = None if names is None else set(names)
    return {
        name: init_parameter(name, shape, cfg.init_std, seed_words)
        for name, shape in parameter_shapes(cfg)
        if wanted is None or name in wanted
    }


def to_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------- #
# forward
# --------------------------------------------------------------------------- #
def embed(token_ids, segment_ids, params: Mapping[str, Tensor]) -> Tensor:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    seq = token_ids.shape[-1]
    pos_table = params["embeddings.position"]
    if seq > pos_table.shape[0]:
        raise ValueError(f"sequence length {seq} exceeds max_seq_len {pos_table.shape[0]}")
    tok = embedding(params["embeddings.token"], token_ids)
    pos = embedding(pos_table, np.arange(seq))
    seg = embedding(params["embeddings.segment"], segment_ids)
    return add(add(tok, pos), seg)


def encode(
    token_ids,
    segment_ids,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    mask: np.ndarray | None = None,
    cls_only: bool = False,
) -> Tensor:
    """Hidden states ``[..., seq, d]`` after every (possibly patched) layer.

    ``cls_only`` computes the top layer for the first position only and
    returns ``[..., 1, d]``; it requires :func:`patch.cls_shortcut_ok`.
    """
    if cls_only and not _patch.cls_shortcut_ok(cfg):
        raise ValueError("cls_only needs position-wise computation after the top attention")
    h = embed(token_ids, segment_ids, params)
    mode = cfg.insertion_mode
    stack = _patch.patch_stack(params, cfg)
    for i in range(cfg.n_layers):
        lp = LayerParams(params, i)
        top = cls_only and i == cfg.n_layers - 1
        if mode in ("none", "vertical"):
            h = bert_layer(h, lp, mask, top)
        elif mode == "inner":
            site = f"patches.layers.{i}"
            h = _patch.patched_inner(h, lp, stack[site + ".attention"], stack[site + ".ffn"], mask, top)
        elif mode == "outer":
            site = f"patches.layers.{i}"
            h = _patch.patched_outer(h, lp, stack[site + ".attention"], stack[site + ".ffn"], mask, top)
        elif mode == "horizontal":
            h = _patch.patched_horizontal(h, lp, stack[f"patches.layers.{i}"], mask, top)
        else:
            raise ValueError(f"unknown insertion mode {mode!r}")
    if mode == "vertical":
        h = _patch.patched_vertical(h, stack["patches.top"], mask)
    return h


def score_batch(
    token_ids: np.ndarray,
    segment_ids: np.ndarray,
    mask: np.ndarray | None,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """Matching scores for a padded batch ``[batch, seq]`` -> ``[batch]``."""
    fast = _patch.cls_shortcut_ok(cfg) and cfg.n_layers > 0
    h = encode(token_ids, segment_ids, params, cfg, mask, cls_only=fast)
    h_cls = select(h, 0, axis=-2)
    return linear(h_cls, params["head.weight"], params["head.bias"])


@dataclass
class TruncationStats:
    sequences: int = 0
    truncated: int = 0
    dropped_tokens: int = 0

    def merge(self, other: "TruncationStats") -> None:
        self.sequences += other.sequences
        self.truncated += other.truncated
        self.dropped_tokens += other.dropped_tokens


def build_input(
    question_ids: list[int],
    answer_ids: list[int],
    max_seq_len: int,
    stats: TruncationStats | None = None,
) -> tuple[list[int], list[int]]:
    """``[CLS] q [SEP] a [SEP]`` plus segment ids; the answer is cut from the
    right when the whole does not fit."""
    room = max_seq_len - len(question_ids) - 3
    if room < 0:
        raise ValueError(
            f"question of {len(question_ids)} tokens does not fit max_seq_len {max_seq_len}"
        )
    kept = answer_ids[:room]
    if stats is not None:
        stats.sequences += 1
        if len(kept) < len(answer_ids):
            stats.truncated += 1
            stats.dropped_tokens += len(answer_ids) - len(kept)
    ids = [CLS, *question_ids, SEP, *kept, SEP]
    segs = [0] * (len(question_ids) + 2) + [1] * (len(kept) + 1)
    return ids, segs


def pad_batch(seqs: list[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    width = max(len(ids) for ids, _ in seqs)
    n = len(seqs)
    ids = np.full((n, width), PAD, dtype=np.int64)
    segs = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for r, (t, s) in enumerate(seqs):
        ids[r, : len(t)] = t
        segs[r, : len(s)] = s
        mask[r, : len(t)] = True
    return ids, segs, mask


def score(
    question_ids: list[int],
    answer_ids: list[int],
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    stats: TruncationStats | None = None,
) -> Tensor:
    """Scalar score ``f(q, a)`` for one unpadded pair."""
    ids, segs = build_input(question_ids, answer_ids, cfg.max_seq_len, stats)
    fast = _patch.cls_shortcut_ok(cfg) and cfg.n_layers > 0
    h = encode(np.asarray(ids), np.asarray(segs), params, cfg, cls_only=fast)
    return linear(select(h, 0, axis=-2), params["head.weight"], params["head.bias"])
