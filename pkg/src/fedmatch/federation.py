"""In-process federation: a server holding the shared backbone, clients holding
shared + private parameters, and byte-serialized messages between them.

Every round samples clients, distributes the global shared parameters,
trains each sampled client locally for ``aggregation_every_k_epochs`` epochs,
averages the returned shared parameters, and evaluates every client on dev.
Private parameters never leave a client: uploads are built from the shared
segment only and :func:`encode_update` refuses any private name.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .backbone import TruncationStats, Vocabulary, init_parameters, parameter_shapes
from .config import ModelConfig, RunConfig
from .corpus import Corpus, mine_negatives, subsample_questions
from .evaluation import MetricsReport, ParticipantMetrics, evaluate_participant
from .seeding import key_words, stream
from .trainer import (
    OptimizerState,
    TrainPair,
    batches_per_epoch,
    build_pairs,
    score_examples,
    train_epoch,
)

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


class PrivacyError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# parameter split
# --------------------------------------------------------------------------- #
def partition_parameters(cfg: ModelConfig) -> tuple[list[str], list[str]]:
    """Shared: embeddings, the bottom ``n_shared_layers`` layers and the head.
    Private: the remaining top layers and every patch."""
    shared, private = [], []
    n_shared = cfg.shared_layers
    for name, _ in parameter_shapes(cfg):
        if name.startswith("patches."):
            private.append(name)
        elif name.startswith("layers."):
            layer = int(name.split(".")[1])
            (shared if layer < n_shared else private).append(name)
        else:
            shared.append(name)
    return shared, private


def shared_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    names = set(partition_parameters(cfg)[0])
    return [(n, s) for n, s in parameter_shapes(cfg) if n in names]


# --------------------------------------------------------------------------- #
# state
# --------------------------------------------------------------------------- #
@dataclass
class ServerState:
    theta: dict[str, np.ndarray]
    config: RunConfig
    model: ModelConfig
    clients: list[str]
    round: int = 0

    @property
    def schema(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.theta.items()]


@dataclass
class ClientState:
    index: int
    name: str
    shared: dict[str, np.ndarray]
    private: dict[str, np.ndarray]
    optimizer: OptimizerState
    splits: dict[str, list]
    pairs: list[TrainPair]
    batch_size: int
    order: tuple[str, ...]  # canonical parameter order of the full model
    skipped_questions: int = 0
    truncation: TruncationStats = field(default_factory=TruncationStats)

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Theta_t and beta_t merged in canonical order (views, not copies)."""
        merged = {**self.shared, **self.private}
        return {k: merged[k] for k in self.order}

    def model_with(self, theta: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        merged = {**theta, **self.private}
        return {k: merged[k] for k in self.order}


# --------------------------------------------------------------------------- #
# messages
# --------------------------------------------------------------------------- #
def encode_update(params: Mapping[str, np.ndarray], private_names: Iterable[str], meta=None) -> bytes:
    private_names = set(private_names)
    leaked = [k for k in params if k in private_names]
    if leaked:
        raise PrivacyError(f"refusing to send private parameter {leaked[0]!r}")
    return checkpoint.dumps(params, meta=meta)


def decode_update(payload: bytes, schema: Sequence[tuple[str, tuple[int, ...]]]) -> dict[str, np.ndarray]:
    ckpt = checkpoint.loads(payload)
    try:
        checkpoint.check_schema(ckpt.params, list(schema))
    except checkpoint.CheckpointError as exc:
        raise ProtocolError(f"schema mismatch: {exc}") from exc
    return ckpt.params


class Transport:
    """Carries message bytes; keeps a copy of every uplink when ``record``."""

    def __init__(self, record: bool = False):
        self.record = record
        self.uplinks: list[tuple[int, str, bytes]] = []
        self.downlinks = 0
        self.uplink_bytes = 0

    def down(self, round_: int, client: str, payload: bytes) -> bytes:
        self.downlinks += 1
        return bytes(payload)

    def up(self, round_: int, client: str, payload: bytes) -> bytes:
        self.uplink_bytes += len(payload)
        if self.record:
            self.uplinks.append((round_, client, bytes(payload)))
        return bytes(payload)


# --------------------------------------------------------------------------- #
# protocol steps
# --------------------------------------------------------------------------- #
def distribute(
    server: ServerState,
    clients: Sequence[ClientState],
    selected: Iterable[int] | None = None,
    transport: Transport | None = None,
) -> None:
    """Selected clients replace theta_t by a copy of theta, received as bytes."""
    transport = transport or Transport()
    payload = checkpoint.dumps(server.theta, meta={"round": server.round})
    chosen = set(range(len(clients)) if selected is None else selected)
    for c in clients:
        if c.index not in chosen:
            continue
        local_schema = [(k, v.shape) for k, v in c.shared.items()]
        received = checkpoint.loads(transport.down(server.round, c.name, payload))
        try:
            checkpoint.check_schema(received.params, local_schema)
        except checkpoint.CheckpointError as exc:
            raise ProtocolError(f"client {c.name!r}: {exc}") from exc
        c.shared = received.params


def aggregate(updates: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Unweighted elementwise mean, summed in the given order.

    Elements on which every update agrees are copied through unchanged, so a
    mean of equal values is exact.
    """
    if not updates:
        raise ProtocolError("aggregate needs at least one update")
    ref = [(k, np.shape(v)) for k, v in updates[0].items()]
    for i, u in enumerate(updates[1:], start=1):
        got = [(k, np.shape(v)) for k, v in u.items()]
        if got != ref:
            bad = next((a[0] for a, b in zip(ref, got) if a != b), None)
            if bad is None:
                bad = ref[len(got)][0] if len(got) < len(ref) else got[len(ref)][0]
            raise ProtocolError(f"update {i} diverges at parameter {bad!r}")
    out = {}
    n = len(updates)
    for name, _ in ref:
        first = np.asarray(updates[0][name], dtype=np.float64)
        total = first.copy()
        same = np.ones(first.shape, dtype=bool)
        for u in updates[1:]:
            arr = np.asarray(u[name], dtype=np.float64)
            total = total + arr
            same &= arr == first
        mean = total / n
        out[name] = np.where(same, first, mean)
    return out


def sample_clients(server: ServerState, rng: np.random.Generator) -> list[int]:
    t = len(server.clients)
    size = server.config.federation.sample_size
    if size is None or size >= t:
        return list(range(t))
    return sorted(int(i) for i in rng.choice(t, size=size, replace=False))


@dataclass
class RoundReport:
    round: int
    sampled: list[str]
    losses: dict[str, list[float]]
    dev: dict[str, ParticipantMetrics]
    flagged: list[str] = field(default_factory=list)

    @property
    def overall(self) -> tuple[float, float]:
        return MetricsReport(dict(self.dev)).overall


def _train_client(client: ClientState, cfg: ModelConfig, epochs: int, seed: int, round_: int) -> tuple[list[float], bool]:
    losses = []
    params = client.params
    try:
        for e in range(epochs):
            rng = stream(seed, "epoch", client.index, round_, e)
            losses.append(train_epoch(params, client.pairs, client.optimizer, cfg, client.batch_size, rng))
    except FloatingPointError as exc:
        log.warning("client %s: %s", client.name, exc)
        return losses, True
    bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
    if bad:
        log.warning("client %s produced non-finite parameter %r", client.name, bad[0])
        return losses, True
    return losses, False


def evaluate_client(
    client: ClientState,
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    vocab: Vocabulary,
    split: str,
    batch_size: int = 128,
) -> ParticipantMetrics:
    return evaluate_participant(
        lambda exs: score_examples(params, cfg, vocab, exs, batch_size), client.splits[split]
    )


@dataclass
class Federation:
    """Everything a run needs between rounds."""

    server: ServerState
    clients: list[ClientState]
    vocab: Vocabulary
    shared_names: list[str]
    private_names: list[str]
    transport: Transport = field(default_factory=Transport)
    workers: int = 1

    @property
    def federated(self) -> bool:
        return self.server.config.federation.mode == "federated"

    def eval_params(self, client: ClientState) -> dict[str, np.ndarray]:
        return client.model_with(self.server.theta) if self.federated else client.params


def run_round(fed: Federation, rng: np.random.Generator | None = None) -> RoundReport:
    server, clients = fed.server, fed.clients
    cfg = server.config
    r = server.round + 1
    rng = rng if rng is not None else stream(cfg.seed, "sample", r)
    selected = sample_clients(server, rng)
    if fed.federated:
        distribute(server, clients, selected, fed.transport)
    epochs = cfg.federation.aggregation_every_k_epochs

    def work(i):
        return _train_client(clients[i], server.model, epochs, cfg.seed, r)

    if fed.workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=fed.workers) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(i) for i in selected]
    losses, flagged = {}, []
    for i, (loss, bad) in zip(selected, results):
        losses[clients[i].name] = loss
        if bad:
            flagged.append(clients[i].name)

    if fed.federated:
        updates = []
        for i in selected:
            c = clients[i]
            if c.name in flagged:
                continue
            payload = encode_update(c.shared, fed.private_names, meta={"client": c.name, "round": r})
            updates.append(decode_update(fed.transport.up(r, c.name, payload), server.schema))
        if updates:
            server.theta = aggregate(updates)
    server.round = r

    dev = {}
    for c in clients:
        dev[c.name] = evaluate_client(
            c, fed.eval_params(c), server.model, fed.vocab, "dev", cfg.training.eval_batch_size
        )
    return RoundReport(r, [clients[i].name for i in selected], losses, dev, flagged)


# --------------------------------------------------------------------------- #
# experiment
# --------------------------------------------------------------------------- #
def build_vocabulary(corpus: Corpus, participants: Sequence[str]) -> Vocabulary:
    texts = []
    for pid in participants:
        for ex in corpus.splits[pid]["train"]:
            texts.append(ex.question)
            texts.append(ex.answer)
    return Vocabulary.build(texts)


def setup(
    config: RunConfig,
    corpus: Corpus,
    vocab: Vocabulary | None = None,
    transport: Transport | None = None,
    workers: int = 1,
) -> Federation:
    participants = list(config.data.participants or corpus.participants)
    missing = [p for p in participants if p not in corpus.splits]
    if missing:
        raise ProtocolError(f"participant {missing[0]!r} is not in the corpus")
    config.validate(len(participants))
    vocab = vocab or build_vocabulary(corpus, participants)
    model = _with_vocab(config.model, len(vocab))
    shared_names, private_names = partition_parameters(model)
    order = tuple(n for n, _ in parameter_shapes(model))
    seed = config.seed
    theta = init_parameters(model, key_words(seed, "server-init"), names=shared_names)
    server = ServerState(theta, config, model, participants)
    tc = config.training
    fc = config.federation

    clients = []
    for t, pid in enumerate(participants):
        splits = dict(corpus.splits[pid])
        train = splits["train"]
        negatives = corpus.negatives.get(pid)
        if config.data.train_ratio < 1.0:
            train = subsample_questions(train, config.data.train_ratio, seed)
            negatives = None
        if negatives is None:
            negatives = mine_negatives(train, tc.negatives_per_question)
        splits["train"] = train
        stats = TruncationStats()
        pairs, skipped = build_pairs(
            train, vocab, model, stream(seed, "pairs", t), tc.negatives_per_question, negatives, stats
        )
        batch = tc.batch_size_for(pid)
        total = fc.aggregation_every_k_epochs * fc.rounds * batches_per_epoch(len(pairs), batch)
        private = init_parameters(model, key_words(seed, "client-init", t), names=private_names)
        shared = {k: v.copy() for k, v in theta.items()}
        params = {**shared, **private}
        opt = OptimizerState.create({k: params[k] for k in order}, total, tc)
        clients.append(
            ClientState(t, pid, shared, private, opt, splits, pairs, batch, order, skipped, stats)
        )
    fed = Federation(server, clients, vocab, shared_names, private_names, transport or Transport(), workers)
    distribute(server, clients, None, fed.transport)
    return fed


def _with_vocab(model: ModelConfig, size: int) -> ModelConfig:
    from dataclasses import replace

    return replace(model, vocab_size=size)


@dataclass
class ExperimentResult:
    rounds: list[RoundReport]
    final: MetricsReport
    federation: Federation

    @property
    def overall(self) -> tuple[float, float]:
        return self.final.overall


def final_evaluation(fed: Federation) -> MetricsReport:
    if fed.federated:
        distribute(fed.server, fed.clients, None, fed.transport)
    report = MetricsReport()
    for c in fed.clients:
        report.participants[c.name] = evaluate_client(
            c, c.params, fed.server.model, fed.vocab, "test", fed.server.config.training.eval_batch_size
        )
    return report


class MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = path.open("w", encoding="utf-8", newline="\n") if path else None

    def write(self, obj: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(obj, sort_keys=False) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def checkpoint_meta(fed: Federation, client: ClientState | None = None) -> dict:
    cfg = fed.server.config
    meta = {"vocab": fed.vocab.to_list(), "run": cfg.name, "seed": cfg.seed, "eval_batch_size": cfg.training.eval_batch_size}
    if client is not None:
        meta["participant"] = client.name
    return meta


def model_dict(model: ModelConfig) -> dict:
    from dataclasses import asdict

    return asdict(model)


def run_experiment(
    config: RunConfig,
    corpus: Corpus,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    transport: Transport | None = None,
    workers: int = 1,
    on_round: Callable[[RoundReport], None] | None = None,
) -> ExperimentResult:
    if seed is not None:
        config = config.replace(seed=seed)
    fed = setup(config, corpus, transport=transport, workers=workers)
    out = Path(out_dir) if out_dir is not None else None
    if out:
        (out / "server").mkdir(parents=True, exist_ok=True)
        (out / "final").mkdir(parents=True, exist_ok=True)
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)
    reports = []
    try:
        for _ in range(config.federation.rounds):
            rep = run_round(fed)
            reports.append(rep)
            for name, losses in rep.losses.items():
                for e, value in enumerate(losses):
                    mlog.write({"round": rep.round, "client": name, "epoch": e + 1, "mean_loss": value})
            for c in fed.clients:
                m = rep.dev[c.name]
                mlog.write(
                    {
                        "round": rep.round,
                        "client": c.name,
                        "sampled": c.name in rep.sampled,
                        "flagged": c.name in rep.flagged,
                        "dev_map": m.map,
                        "dev_mrr": m.mrr,
                    }
                )
            o_map, o_mrr = rep.overall
            mlog.write({"round": rep.round, "overall_dev_map": o_map, "overall_dev_mrr": o_mrr, "sampled": rep.sampled})
            if out and fed.federated:
                checkpoint.save(
                    out / "server" / f"round_{rep.round:03d}.fmck",
                    fed.server.theta,
                    config=model_dict(fed.server.model),
                    meta=checkpoint_meta(fed),
                )
            if on_round:
                on_round(rep)
        final = final_evaluation(fed)
        o_map, o_mrr = final.overall
        mlog.write({"final": final.to_dict()["participants"], "overall_test_map": o_map, "overall_test_mrr": o_mrr})
    finally:
        mlog.close()
    if out:
        private = set(fed.private_names)
        for c in fed.clients:
            checkpoint.save(
                out / "final" / f"{c.name}.fmck",
                c.params,
                private=private,
                config=model_dict(fed.server.model),
                meta=checkpoint_meta(fed, c),
            )
    return ExperimentResult(reports, final, fed)
