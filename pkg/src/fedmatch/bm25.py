"""Okapi BM25 over one participant's answer pool, used to mine hard negatives."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Mapping, Sequence

import numpy as np

K1 = 1.2
B = 0.75


class Bm25Index:
    """Inverted index over answers keyed by answer id.

    ``idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`` so every term weight is
    positive even in tiny pools.  Query terms are summed with multiplicity.
    """

    def __init__(self, answers: Mapping[str, Sequence[str]], k1: float = K1, b: float = B):
        self.k1, self.b = k1, b
        self.aids: list[str] = sorted(answers)
        self.position = {aid: i for i, aid in enumerate(self.aids)}
        self.lengths = np.array([len(answers[a]) for a in self.aids], dtype=np.float64)
        if np.any(self.lengths <= 0):
            raise ValueError("every indexed answer needs at least one token")
        self.n_docs = len(self.aids)
        self.avg_len = float(self.lengths.mean()) if self.n_docs else 0.0
        postings: dict[str, dict[int, int]] = {}
        for i, aid in enumerate(self.aids):
            for term, tf in Counter(answers[aid]).items():
                postings.setdefault(term, {})[i] = tf
        self.postings = {
            term: (np.fromiter(p.keys(), dtype=np.int64), np.fromiter(p.values(), dtype=np.float64))
            for term, p in postings.items()
        }
        self.df = {term: len(p[0]) for term, p in self.postings.items()}
        self._norm = k1 * (1.0 - b + b * self.lengths / self.avg_len) if self.n_docs else self.lengths

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query: Iterable[str], aid: str) -> float:
        if aid not in self.position:
            raise KeyError(f"answer {aid!r} is not in the index")
        i = self.position[aid]
        total = 0.0
        for term in query:
            post = self.postings.get(term)
            if post is None:
                continue
            hit = np.nonzero(post[0] == i)[0]
            if hit.size == 0:
                continue
            tf = post[1][hit[0]]
            total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self._norm[i])
        return total

    def score_all(self, query: Iterable[str]) -> np.ndarray:
        """Scores for every indexed answer, aligned with ``self.aids``."""
        scores = np.zeros(self.n_docs)
        for term in query:
            post = self.postings.get(term)
            if post is None:
                continue
            idx, tf = post
            scores[idx] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self._norm[idx])
        return scores

    def ranked(self, query: Iterable[str]) -> list[tuple[str, float]]:
        scores = self.score_all(query)
        order = np.lexsort((np.arange(self.n_docs), -scores))
        return [(self.aids[i], float(scores[i])) for i in order]


def top_negatives(
    question: Sequence[str], positives: Iterable[str], index: Bm25Index, k: int = 5
) -> list[str]:
    """Best-scoring answers that are not ground truth; ties by ascending id."""
    exclude = set(positives)
    scores = index.score_all(question)
    order = np.lexsort((np.arange(index.n_docs), -scores))
    out = []
    for i in order:
        aid = index.aids[i]
        if aid in exclude:
            continue
        out.append(aid)
        if len(out) == k:
            break
    return out
