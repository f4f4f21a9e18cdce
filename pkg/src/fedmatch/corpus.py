"""QA examples, the synthetic heterogeneous corpus generator, splitting and
on-disk layout.

The generator stands in for a multi-domain answer-selection benchmark.  Each
participant owns a disjoint block of "domain" word ids; all participants share
a block of common word ids.  A question is built around two focus keywords of
one latent topic; its positive answers mention those keywords, while its
labelled distractors come from the same topic and mention at most one of them.

Two participant-specific signals make the data non-IID beyond vocabulary:

* a cue word from the shared block marks positives in one participant and
  distractors in the next (the same token carries opposite evidence), and
* sizes, lengths and positive rates follow per-participant profiles.

Generated token strings are ``w<id>``; the pooled vocabulary built from them
is a simulation convenience, not something a real federation could compute.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bm25 import Bm25Index, top_negatives
from .backbone import tokenize
from .config import ConfigError
from .seeding import stream

SPLITS = ("train", "dev", "test")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class QAExample:
    qid: str
    question: tuple[str, ...]
    aid: str
    answer: tuple[str, ...]
    label: int
    participant: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "qid": self.qid,
                "question": " ".join(self.question),
                "aid": self.aid,
                "answer": " ".join(self.answer),
                "label": self.label,
            },
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class ParticipantProfile:
    participant_id: str
    vocab_offset: int
    vocab_size: int
    n_questions: int
    answers_per_question: float
    question_length: float
    answer_length: float
    positive_rate: float

    def validate(self, prefix: str) -> None:
        for name in ("vocab_offset",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name}", "must be non-negative")
        for name in ("vocab_size", "n_questions", "answers_per_question", "question_length", "answer_length"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if not 0 < self.positive_rate < 1:
            raise ConfigError(f"{prefix}.positive_rate", "must lie in (0, 1)")


@dataclass(frozen=True)
class GeneratorOptions:
    shared_vocab: int = 120
    n_topics: int = 16
    keywords_per_topic: int = 6
    focus_keywords: int = 2
    cue_rate: float = 0.8  # chance an answer carries its participant's cue word
    keyword_dropout: float = 0.3  # chance a positive mentions only one focus keyword
    near_miss_rate: float = 0.7  # chance a distractor mentions one focus keyword
    iid: bool = False
    min_question_length: int = 3
    min_answer_length: int = 4
    max_question_length: int = 12
    max_answer_length: int = 20

    def validate(self, prefix: str = "generator") -> None:
        if self.keywords_per_topic <= self.focus_keywords:
            raise ConfigError(f"{prefix}.keywords_per_topic", "must exceed focus_keywords")
        for name in ("cue_rate", "keyword_dropout", "near_miss_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{prefix}.{name}", "must lie in [0, 1]")
        if self.n_topics < 2:
            raise ConfigError(f"{prefix}.n_topics", "must be at least 2")


# Per-dataset statistics of the five-domain benchmark this generator imitates:
# (name, #questions, #answers, avg question length, avg answer length, %positive)
DOMAIN_STATS = (
    ("privacyqa", 1750, 4947, 8.46, 139.62, 14.29),
    ("bioasq", 2740, 12815, 10.5, 36.0, 21.87),
    ("fiqa", 6648, 26016, 12.4, 202.0, 32.15),
    ("inqa", 1309, 27413, 7.2, 92.3, 25.67),
    ("medquad", 380, 2396, 19.7, 469.7, 37.22),
)


def default_profiles(scale: float = 0.45, domain_vocab: int = 160, shared_vocab: int = 120) -> list[ParticipantProfile]:
    """Five desk-scale profiles keeping the benchmark's size ratios.

    Question counts are scaled linearly; lengths are compressed (questions
    by 0.5, answers to ``2 + 0.5 * sqrt(avg length)``) so sequences fit a toy
    encoder; candidates per question follow #answers/#questions clipped to
    [3, 8].
    """
    out = []
    for i, (name, nq, na, ql, al, pos) in enumerate(DOMAIN_STATS):
        out.append(
            ParticipantProfile(
                participant_id=name,
                vocab_offset=shared_vocab + i * domain_vocab,
                vocab_size=domain_vocab,
                n_questions=max(1, round(nq * scale)),
                answers_per_question=float(min(8.0, max(3.0, round(na / nq)))),
                question_length=round(0.5 * ql, 2),
                answer_length=round(2.0 + 0.5 * math.sqrt(al), 2),
                positive_rate=pos / 100.0,
            )
        )
    return out


def _word(i: int) -> str:
    return f"w{i}"


def validate_profiles(profiles: Sequence[ParticipantProfile], options: GeneratorOptions) -> None:
    if len(profiles) < 2:
        raise ConfigError("profiles", "need at least two participants")
    names = [p.participant_id for p in profiles]
    if len(set(names)) != len(names):
        raise ConfigError("profiles", "participant ids must be unique")
    for i, p in enumerate(profiles):
        p.validate(f"profiles[{i}]")
        if p.vocab_offset < options.shared_vocab:
            raise ConfigError(
                f"profiles[{i}].vocab_offset",
                f"domain range of {p.participant_id!r} overlaps the shared range [0, {options.shared_vocab})",
            )
        need = options.n_topics * options.keywords_per_topic + 1
        if p.vocab_size < need:
            raise ConfigError(f"profiles[{i}].vocab_size", f"must be at least {need}")
    if options.shared_vocab < len(profiles) + 2:
        raise ConfigError("generator.shared_vocab", "too small for the cue words")
    if options.iid:
        return
    spans = sorted((p.vocab_offset, p.vocab_offset + p.vocab_size, p.participant_id) for p in profiles)
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ConfigError("profiles", f"domain vocabulary ranges of {an!r} and {bn!r} overlap")


def generate_synthetic(
    profiles: Sequence[ParticipantProfile],
    seed: int,
    options: GeneratorOptions | None = None,
) -> dict[str, list[QAExample]]:
    """Per-participant labelled candidate lists; deterministic in ``seed``.

    In ``iid`` mode every participant draws from the first profile's
    distribution (vocabulary, lengths, cue convention); only the question
    counts differ.
    """
    options = options or GeneratorOptions()
    options.validate()
    validate_profiles(profiles, options)
    n_cues = len(profiles)
    out = {}
    for t, prof in enumerate(profiles):
        src = profiles[0] if options.iid else prof
        cue_slot = 0 if options.iid else t
        out[prof.participant_id] = _generate_participant(
            prof.participant_id,
            prof.n_questions,
            src,
            pos_cue=_word(cue_slot),
            neg_cue=_word((cue_slot + 1) % n_cues),
            n_cues=n_cues,
            options=options,
            rng=stream(seed, "generate", prof.participant_id),
        )
    return out


def _generate_participant(pid, n_questions, prof, pos_cue, neg_cue, n_cues, options, rng):
    o = options
    n_kw = o.n_topics * o.keywords_per_topic
    base = prof.vocab_offset
    topics = [
        [_word(base + k * o.keywords_per_topic + j) for j in range(o.keywords_per_topic)]
        for k in range(o.n_topics)
    ]
    general = [_word(base + i) for i in range(n_kw, prof.vocab_size)]
    shared = [_word(i) for i in range(n_cues, o.shared_vocab)]

    def filler(n):
        pick_shared = rng.random(n) < 0.5
        words = []
        for s in pick_shared:
            pool = shared if s else general
            words.append(pool[rng.integers(len(pool))])
        return words

    def length(mean, lo, hi):
        return int(min(hi, max(lo, rng.poisson(mean))))

    examples = []
    next_aid = 0
    for j in range(n_questions):
        qid = f"{pid}-q{j:05d}"
        topic = topics[rng.integers(o.n_topics)]
        perm = rng.permutation(len(topic))
        focus = [topic[i] for i in perm[: o.focus_keywords]]
        others = [topic[i] for i in perm[o.focus_keywords :]]
        qlen = length(prof.question_length, max(o.min_question_length, o.focus_keywords + 1), o.max_question_length)
        q = focus + filler(qlen - len(focus))
        q = [q[i] for i in rng.permutation(len(q))]

        n_cand = max(2, int(rng.poisson(prof.answers_per_question)))
        n_pos = int(min(n_cand - 1, max(1, rng.binomial(n_cand, prof.positive_rate))))
        labels = [1] * n_pos + [0] * (n_cand - n_pos)
        for label in labels:
            alen = length(prof.answer_length, o.min_answer_length, o.max_answer_length)
            if label:
                keep = o.focus_keywords - 1 if rng.random() < o.keyword_dropout else o.focus_keywords
                keys = [focus[i] for i in rng.permutation(o.focus_keywords)[:keep]]
                cue = pos_cue
            else:
                keys = [focus[rng.integers(o.focus_keywords)]] if rng.random() < o.near_miss_rate else []
                cue = neg_cue
            n_other = int(rng.integers(1, 3))
            keys += [others[i] for i in rng.permutation(len(others))[:n_other]]
            if rng.random() < o.cue_rate:
                keys.append(cue)
            words = keys + filler(max(0, alen - len(keys)))
            words = [words[i] for i in rng.permutation(len(words))]
            examples.append(
                QAExample(qid, tuple(q), f"{pid}-a{next_aid:06d}", tuple(words), label, pid)
            )
            next_aid += 1
    return examples


# --------------------------------------------------------------------------- #
# grouping, splitting, negatives
# --------------------------------------------------------------------------- #
def group_by_question(examples: Iterable[QAExample]) -> dict[str, list[QAExample]]:
    groups: dict[str, list[QAExample]] = defaultdict(list)
    for ex in examples:
        groups[ex.qid].append(ex)
    return dict(groups)


def split(
    examples: Sequence[QAExample],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    purpose: str = "split",
) -> tuple[list[QAExample], list[QAExample], list[QAExample]]:
    """Partition by question id so a question's candidates stay together."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split.ratios", "need three non-negative ratios summing to 1")
    qids = sorted({ex.qid for ex in examples})
    n = len(qids)
    if n < 3:
        raise ConfigError("split", f"need at least 3 questions, got {n}")
    n_dev = max(1, int(math.floor(ratios[1] * n + 0.5)))
    n_test = max(1, int(math.floor(ratios[2] * n + 0.5)))
    n_train = n - n_dev - n_test
    if n_train < 1:
        raise ConfigError("split", f"{n} questions leave no training data")
    participant = examples[0].participant if examples else ""
    order = stream(seed, purpose, participant).permutation(n)
    assign = {}
    for rank_, i in enumerate(order):
        assign[qids[i]] = 0 if rank_ < n_train else (1 if rank_ < n_train + n_dev else 2)
    parts: tuple[list, list, list] = ([], [], [])
    for ex in examples:
        parts[assign[ex.qid]].append(ex)
    return parts


def subsample_questions(examples: Sequence[QAExample], ratio: float, seed: int) -> list[QAExample]:
    """Keep ``ceil(ratio * #questions)`` questions chosen by a seeded stream."""
    if ratio >= 1.0:
        return list(examples)
    qids = sorted({ex.qid for ex in examples})
    if not qids:
        return []
    keep_n = max(1, math.ceil(ratio * len(qids)))
    participant = examples[0].participant
    chosen = stream(seed, "train-ratio", participant).permutation(len(qids))[:keep_n]
    keep = {qids[i] for i in chosen}
    return [ex for ex in examples if ex.qid in keep]


def answer_pool(examples: Iterable[QAExample]) -> dict[str, tuple[str, ...]]:
    pool = {}
    for ex in examples:
        pool.setdefault(ex.aid, ex.answer)
    return pool


def mine_negatives(train: Sequence[QAExample], k: int = 5) -> dict[str, list[str]]:
    """BM25 top-``k`` non-ground-truth answers per training question, drawn
    from this participant's own training pool."""
    index = Bm25Index(answer_pool(train))
    out = {}
    for qid, group in sorted(group_by_question(train).items()):
        positives = [ex.aid for ex in group if ex.label == 1]
        out[qid] = top_negatives(group[0].question, positives, index, k)
    return out


def unigram_distribution(examples: Iterable[QAExample]) -> Counter:
    counts: Counter = Counter()
    for ex in examples:
        counts.update(ex.answer)
    seen_q = set()
    for ex in examples:
        if ex.qid not in seen_q:
            seen_q.add(ex.qid)
            counts.update(ex.question)
    return counts


def jensen_shannon(p: Counter, q: Counter) -> float:
    """Jensen-Shannon divergence (natural log) between two count tables."""
    keys = sorted(set(p) | set(q))
    pa = np.array([p.get(k, 0) for k in keys], dtype=np.float64)
    qa = np.array([q.get(k, 0) for k in keys], dtype=np.float64)
    pa /= pa.sum()
    qa /= qa.sum()
    m = 0.5 * (pa + qa)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(pa, m) + 0.5 * kl(qa, m)


# Minimum pairwise unigram divergence separating non-IID corpora from the IID control.
HETEROGENEITY_FLOOR = 0.1


def heterogeneity(data: dict[str, Sequence[QAExample]]) -> float:
    """Smallest pairwise Jensen-Shannon divergence between participants."""
    dists = [unigram_distribution(v) for _, v in sorted(data.items())]
    pairs = [(a, b) for i, a in enumerate(dists) for b in dists[i + 1 :]]
    if not pairs:
        raise ValueError("heterogeneity needs at least two participants")
    return min(jensen_shannon(a, b) for a, b in pairs)


# --------------------------------------------------------------------------- #
# disk layout
# --------------------------------------------------------------------------- #
@dataclass
class Corpus:
    participants: list[str]
    splits: dict[str, dict[str, list[QAExample]]]
    negatives: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    profiles: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def write_corpus(
    out_dir: str | Path,
    data: dict[str, list[QAExample]],
    seed: int,
    profiles: Sequence[ParticipantProfile] = (),
    options: GeneratorOptions | None = None,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    negatives_per_question: int = 5,
) -> Corpus:
    """Split each participant, mine training negatives and write
    ``<out>/<participant>/{train,dev,test}.jsonl``, ``negatives.jsonl`` and
    ``profile.json`` plus a top-level ``corpus.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {p.participant_id: p for p in profiles}
    corpus = Corpus(list(data), {}, {}, {})
    for pid, examples in data.items():
        train, dev, test = split(examples, ratios, seed)
        negs = mine_negatives(train, negatives_per_question)
        pdir = out / pid
        pdir.mkdir(exist_ok=True)
        for name, part in zip(SPLITS, (train, dev, test)):
            _write_lines(pdir / f"{name}.jsonl", (ex.to_json() for ex in part))
        _write_lines(
            pdir / "negatives.jsonl",
            (json.dumps({"qid": qid, "negatives": aids}) for qid, aids in negs.items()),
        )
        profile = asdict(by_id[pid]) if pid in by_id else {"participant_id": pid}
        (pdir / "profile.json").write_text(json.dumps(profile, indent=2) + "\n", encoding="utf-8")
        corpus.splits[pid] = {"train": train, "dev": dev, "test": test}
        corpus.negatives[pid] = negs
        corpus.profiles[pid] = profile
    corpus.meta = {
        "participants": list(data),
        "seed": seed,
        "ratios": list(ratios),
        "negatives_per_question": negatives_per_question,
        "generator": asdict(options) if options else None,
    }
    (out / "corpus.json").write_text(json.dumps(corpus.meta, indent=2) + "\n", encoding="utf-8")
    return corpus


_REQUIRED = ("qid", "question", "aid", "answer", "label")


def _read_jsonl(path: Path, participant: str) -> list[QAExample]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path}: not valid UTF-8 ({exc})") from exc
    examples, bad, total = [], 0, 0
    for line in text.splitlines():
        if not line.strip():
            continue
        total += 1
        try:
            raw = json.loads(line)
            if not isinstance(raw, dict) or any(k not in raw for k in _REQUIRED):
                raise ValueError("missing field")
            label = int(raw["label"])
            question = tuple(tokenize(str(raw["question"])))
            answer = tuple(tokenize(str(raw["answer"])))
            if label not in (0, 1) or not question or not answer:
                raise ValueError("bad label or empty text")
        except (ValueError, TypeError):
            bad += 1
            continue
        examples.append(QAExample(str(raw["qid"]), question, str(raw["aid"]), answer, label, participant))
    if total and bad / total > 0.10:
        raise IngestError(f"{path}: {bad} of {total} lines malformed (over 10%)")
    return examples


def ingest(path: str | Path) -> dict[str, list[QAExample]]:
    """Read per-participant JSONL (``{qid, question, aid, answer, label}``).

    Accepts either one ``<participant>.jsonl`` file per participant or the
    split layout ``<participant>/{train,dev,test}.jsonl``.  Text is
    lower-cased and whitespace-tokenized.
    """
    root = Path(path)
    if not root.is_dir():
        raise OSError(f"cannot read corpus directory {root}")
    out: dict[str, list[QAExample]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = [sub / f"{s}.jsonl" for s in SPLITS if (sub / f"{s}.jsonl").exists()]
        if files:
            out[sub.name] = [ex for f in files for ex in _read_jsonl(f, sub.name)]
    for f in sorted(root.glob("*.jsonl")):
        out[f.stem] = _read_jsonl(f, f.stem)
    return out


def load_corpus(path: str | Path) -> Corpus:
    """Load the split layout written by :func:`write_corpus`."""
    root = Path(path)
    if not root.is_dir():
        raise OSError(f"cannot read corpus directory {root}")
    meta_path = root / "corpus.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    participants = meta.get("participants") or sorted(
        p.name for p in root.iterdir() if p.is_dir() and (p / "train.jsonl").exists()
    )
    if not participants:
        raise ConfigError("corpus", f"no participants found under {root}")
    corpus = Corpus(list(participants), {}, {}, {}, meta)
    for pid in participants:
        pdir = root / pid
        corpus.splits[pid] = {s: _read_jsonl(pdir / f"{s}.jsonl", pid) for s in SPLITS}
        neg_path = pdir / "negatives.jsonl"
        if neg_path.exists():
            negs = {}
            for line in neg_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    raw = json.loads(line)
                    negs[str(raw["qid"])] = [str(a) for a in raw["negatives"]]
            corpus.negatives[pid] = negs
        prof_path = pdir / "profile.json"
        if prof_path.exists():
            corpus.profiles[pid] = json.loads(prof_path.read_text(encoding="utf-8"))
    return corpus


def profiles_from_dicts(raw: Sequence[dict]) -> list[ParticipantProfile]:
    known = {f.name for f in fields(ParticipantProfile)}
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"profiles[{i}]", "must be a mapping")
        for key in item:
            if key not in known:
                raise ConfigError(f"profiles[{i}].{key}", "unknown field")
        missing = known - set(item)
        if missing:
            raise ConfigError(f"profiles[{i}].{sorted(missing)[0]}", "missing")
        out.append(ParticipantProfile(**item))
    return out
