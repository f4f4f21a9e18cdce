"""Local optimization on one client: hinge pairs, Adam with warmup/linear
decay, and epochs over mini-batches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import GradTape, Tensor, custom_op, gather
from .backbone import TruncationStats, Vocabulary, build_input, pad_batch, score_batch, to_tensors
from .bm25 import Bm25Index, top_negatives
from .config import ModelConfig, TrainingConfig
from .corpus import QAExample, answer_pool, group_by_question

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainPair:
    qid: str
    positive: str
    negative: str
    participant: str
    pos_input: tuple[tuple[int, ...], tuple[int, ...]]
    neg_input: tuple[tuple[int, ...], tuple[int, ...]]


def hinge_loss(s_pos: float, s_neg: float) -> float:
    return max(0.0, 1.0 - s_pos + s_neg)


def hinge_loss_sum(scores: Tensor, n_pairs: int) -> Tensor:
    """Sum of pair hinge losses over ``scores = [pos_1..pos_n, neg_1..neg_n]``.

    The subgradient is zero where ``1 - s_pos + s_neg <= 0``.
    """
    s = scores.data
    margin = 1.0 - s[:n_pairs] + s[n_pairs:]
    active = margin > 0.0
    loss = np.where(active, margin, 0.0).sum()

    def backward(g):
        ga = np.where(active, g, 0.0)
        return (np.concatenate([-ga, ga]),)

    return custom_op(np.asarray(loss), (scores,), backward)


def build_pairs(
    split: Sequence[QAExample],
    vocab: Vocabulary,
    cfg: ModelConfig,
    rng: np.random.Generator,
    negatives_per_question: int = 5,
    negatives: Mapping[str, Sequence[str]] | None = None,
    stats: TruncationStats | None = None,
) -> tuple[list[TrainPair], int]:
    """Cross every positive of a question with its BM25 negatives.

    ``negatives`` maps question id to precomputed negative answer ids; when
    absent they are mined from ``split``'s own answer pool.  Returns the
    shuffled pairs and the number of questions skipped for lacking
    negatives (or positives).
    """
    pool = answer_pool(split)
    groups = group_by_question(split)
    index = None
    if negatives is None:
        index = Bm25Index(pool) if pool else None
    encoded: dict[str, list[int]] = {}

    def ids(tokens):
        key = " ".join(tokens)
        if key not in encoded:
            encoded[key] = vocab.encode(tokens)
        return encoded[key]

    pairs, skipped = [], 0
    for qid in sorted(groups):
        group = groups[qid]
        positives = [ex for ex in group if ex.label == 1]
        if negatives is not None:
            negs = list(negatives.get(qid, ()))[:negatives_per_question]
        elif index is not None:
            negs = top_negatives(group[0].question, [ex.aid for ex in positives], index, negatives_per_question)
        else:
            negs = []
        if not positives or not negs:
            skipped += 1
            continue
        q_ids = ids(group[0].question)
        for pos in positives:
            pos_in = build_input(q_ids, ids(pos.answer), cfg.max_seq_len, stats)
            for aid in negs:
                neg_in = build_input(q_ids, ids(pool[aid]), cfg.max_seq_len, stats)
                pairs.append(
                    TrainPair(
                        qid, pos.aid, aid, pos.participant,
                        (tuple(pos_in[0]), tuple(pos_in[1])),
                        (tuple(neg_in[0]), tuple(neg_in[1])),
                    )
                )
    if skipped:
        log.warning("skipped %d question(s) without positives or BM25 negatives", skipped)
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order], skipped


# --------------------------------------------------------------------------- #
# optimizer
# --------------------------------------------------------------------------- #
@dataclass
class OptimizerState:
    """Adam moments and schedule.  ``m`` and ``v`` are per-parameter views
    into the flat buffers ``m_flat`` and ``v_flat`` (canonical order)."""

    base_rate: float
    total_steps: int
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    m_flat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_flat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    layout: tuple = ()  # (name, start, stop, shape) per parameter

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], total_steps: int, tc: TrainingConfig) -> "OptimizerState":
        layout, start = [], 0
        for name, value in params.items():
            size = int(np.size(value))
            layout.append((name, start, start + size, np.shape(value)))
            start += size
        m_flat, v_flat = np.zeros(start), np.zeros(start)
        return cls(
            base_rate=tc.learning_rate,
            total_steps=total_steps,
            warmup_fraction=tc.warmup_fraction,
            beta1=tc.beta1,
            beta2=tc.beta2,
            eps=tc.adam_eps,
            m={n: m_flat[a:b].reshape(sh) for n, a, b, sh in layout},
            v={n: v_flat[a:b].reshape(sh) for n, a, b, sh in layout},
            m_flat=m_flat,
            v_flat=v_flat,
            layout=tuple(layout),
        )

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_fraction * self.total_steps))


def lr_at(step: int, opt: OptimizerState) -> float:
    """Linear warmup to the base rate over the first ``ceil(0.1 * total)``
    steps, then linear decay to zero at ``total``."""
    total = opt.total_steps
    w = opt.warmup_steps
    if step < w:
        return opt.base_rate * step / w
    if step >= total:
        return opt.base_rate if total == w and step == w else 0.0
    return opt.base_rate * (total - step) / (total - w)


def optimizer_step(
    params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptimizerState
) -> None:
    """One Adam update, in place, at rate ``lr_at(step + 1)``.  Parameters
    missing from ``grads`` are treated as having zero gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    g_flat = np.zeros_like(opt.m_flat)
    for name, a, b, _ in opt.layout:
        g = grads.get(name)
        if g is not None:
            g_flat[a:b] = np.reshape(g, -1)
    opt.step += 1
    t = opt.step
    rate = lr_at(min(t, max(opt.total_steps, 1)), opt)
    b1, b2 = opt.beta1, opt.beta2
    m, v = opt.m_flat, opt.v_flat
    m *= b1
    m += (1.0 - b1) * g_flat
    v *= b2
    v += (1.0 - b2) * (g_flat * g_flat)
    update = rate * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + opt.eps)
    for name, a, b, shape in opt.layout:
        p = params[name]
        p -= update[a:b].reshape(shape)


# --------------------------------------------------------------------------- #
# epochs
# --------------------------------------------------------------------------- #
def batch_loss(params: Mapping[str, Tensor], batch: Sequence[TrainPair], cfg: ModelConfig) -> Tensor:
    """Summed hinge loss; each distinct input sequence is scored once."""
    slots: dict = {}
    pos = [slots.setdefault(p.pos_input, len(slots)) for p in batch]
    neg = [slots.setdefault(p.neg_input, len(slots)) for p in batch]
    ids, segs, mask = pad_batch(list(slots))
    scores = score_batch(ids, segs, mask, params, cfg)
    return hinge_loss_sum(gather(scores, np.array(pos + neg)), len(batch))


def epoch_order(pairs: Sequence[TrainPair], rng: np.random.Generator) -> list[int]:
    """Questions in random order, each question's pairs kept contiguous so a
    batch mostly repeats the same inputs (which are then scored once)."""
    by_q: dict[str, list[int]] = {}
    for i, p in enumerate(pairs):
        by_q.setdefault(p.qid, []).append(i)
    qids = sorted(by_q)
    return [i for k in rng.permutation(len(qids)) for i in by_q[qids[k]]]


def batches_per_epoch(n_pairs: int, batch_size: int) -> int:
    return math.ceil(n_pairs / batch_size) if n_pairs else 0


def train_epoch(
    params: dict[str, np.ndarray],
    pairs: Sequence[TrainPair],
    opt: OptimizerState,
    cfg: ModelConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """One pass over ``pairs`` in a fresh question-level random order;
    returns the mean per-pair hinge loss before each batch's update."""
    if not pairs:
        return 0.0
    order = epoch_order(pairs, rng)
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        batch = [pairs[i] for i in order[start : start + batch_size]]
        tensors = to_tensors(params, requires_grad=True)
        with GradTape() as tape:
            loss = batch_loss(tensors, batch, cfg)
        tape.backward(loss)
        total += float(loss.data)
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        optimizer_step(params, grads, opt)
    return total / len(pairs)


def score_examples(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    vocab: Vocabulary,
    examples: Sequence[QAExample],
    batch_size: int = 128,
    stats: TruncationStats | None = None,
) -> np.ndarray:
    """Forward-only scores for labelled candidates, in input order."""
    if not examples:
        return np.zeros(0)
    tensors = to_tensors(params)
    seqs = [build_input(vocab.encode(ex.question), vocab.encode(ex.answer), cfg.max_seq_len, stats) for ex in examples]
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i][0]), i))
    out = np.zeros(len(seqs))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        ids, segs, mask = pad_batch([seqs[i] for i in chunk])
        out[chunk] = score_batch(ids, segs, mask, tensors, cfg).data
    return out
