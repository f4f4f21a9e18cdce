"""Answer-selection ranking metrics: AP/RR per question, MAP/MRR per
participant, and the unweighted cross-participant overall."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    question_id: str
    entries: tuple[tuple[str, float, int], ...]  # (answer id, score, label), best first

    @property
    def labels(self) -> list[int]:
        return [label for _, _, label in self.entries]


def rank(question_id: str, candidates: Iterable[tuple[str, float, int]]) -> RankedList:
    """Sort by descending score; ties go to the smaller answer id."""
    ordered = sorted(candidates, key=lambda c: (-c[1], c[0]))
    if not ordered:
        raise EvaluationError(f"question {question_id!r} has no candidates")
    return RankedList(question_id, tuple(ordered))


def average_precision(ranked: RankedList | Sequence[int]) -> float:
    labels = ranked.labels if isinstance(ranked, RankedList) else list(ranked)
    hits = 0
    total = 0.0
    for k, label in enumerate(labels, start=1):
        if label:
            hits += 1
            total += hits / k
    if hits == 0:
        raise EvaluationError("average precision needs at least one positive")
    return total / hits


def reciprocal_rank(ranked: RankedList | Sequence[int]) -> float:
    labels = ranked.labels if isinstance(ranked, RankedList) else list(ranked)
    for k, label in enumerate(labels, start=1):
        if label:
            return 1.0 / k
    raise EvaluationError("reciprocal rank needs at least one positive")


@dataclass
class ParticipantMetrics:
    map: float
    mrr: float
    questions: int
    excluded: int = 0


def evaluate_participant(
    score_fn: Callable[[list], np.ndarray], examples: list
) -> ParticipantMetrics:
    """Score every candidate with ``score_fn`` (the participant's own model)
    and average AP and RR over questions that have a positive."""
    scores = np.asarray(score_fn(examples), dtype=np.float64) if examples else np.zeros(0)
    groups: dict[str, list[tuple[str, float, int]]] = defaultdict(list)
    for ex, s in zip(examples, scores):
        groups[ex.qid].append((ex.aid, float(s), int(ex.label)))
    aps, rrs = [], []
    excluded = 0
    for qid in sorted(groups):
        cands = groups[qid]
        if not any(label for _, _, label in cands):
            excluded += 1
            continue
        ranked = rank(qid, cands)
        aps.append(average_precision(ranked))
        rrs.append(reciprocal_rank(ranked))
    if not aps:
        raise EvaluationError("every question was excluded (no positive candidates)")
    return ParticipantMetrics(math.fsum(aps) / len(aps), math.fsum(rrs) / len(rrs), len(aps), excluded)


def overall(per_participant: Sequence[tuple[float, float]]) -> tuple[float, float]:
    if not per_participant:
        raise EvaluationError("overall needs at least one participant")
    maps = [m for m, _ in per_participant]
    mrrs = [r for _, r in per_participant]
    return sum(maps) / len(maps), sum(mrrs) / len(mrrs)


@dataclass
class MetricsReport:
    participants: dict[str, ParticipantMetrics] = field(default_factory=dict)

    @property
    def overall(self) -> tuple[float, float]:
        return overall([(m.map, m.mrr) for m in self.participants.values()])

    def to_dict(self) -> dict:
        o_map, o_mrr = self.overall
        return {
            "participants": {
                name: {"map": m.map, "mrr": m.mrr, "questions": m.questions, "excluded": m.excluded}
                for name, m in self.participants.items()
            },
            "overall": {"map": o_map, "mrr": o_mrr},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        return cls(
            {
                name: ParticipantMetrics(v["map"], v["mrr"], v["questions"], v.get("excluded", 0))
                for name, v in raw["participants"].items()
            }
        )


def summary_table(rows: Sequence[tuple[str, MetricsReport]], digits: int = 4) -> str:
    """Plain-text table: one row per method, participants as MAP/MRR column
    pairs, overall last."""
    if not rows:
        return ""
    names = list(rows[0][1].participants)
    label_w = max(len("Method"), *(len(r[0]) for r in rows))
    cell = digits + 2
    group_w = 2 * cell + 1
    groups = names + ["Overall"]
    top = " " * label_w + " | " + " | ".join(g[:group_w].center(group_w) for g in groups)
    sub = "Method".ljust(label_w) + " | " + " | ".join(
        f"{'MAP':>{cell}} {'MRR':>{cell}}" for _ in groups
    )
    lines = [top, sub, "-" * len(sub)]
    for label, report in rows:
        vals = []
        for name in names:
            m = report.participants.get(name)
            vals.append(
                f"{m.map:>{cell}.{digits}f} {m.mrr:>{cell}.{digits}f}" if m else " " * group_w
            )
        o_map, o_mrr = report.overall
        vals.append(f"{o_map:>{cell}.{digits}f} {o_mrr:>{cell}.{digits}f}")
        lines.append(label.ljust(label_w) + " | " + " | ".join(vals))
    return "\n".join(lines) + "\n"
