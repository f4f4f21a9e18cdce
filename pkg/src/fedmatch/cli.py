"""Command-line entry point: ``fedmatch {generate,run,grid,eval}``.

Exit status is 0 on success, 1 for user errors (bad config, missing files,
schema mismatches) and 2 for internal errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import fnmatch
import json
import logging
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import checkpoint
from .backbone import RESERVED, TruncationStats, Vocabulary, parameter_shapes
from .checkpoint import CheckpointError
from .config import ConfigError, ModelConfig, RunConfig, apply_overrides, config_from_dict, load_config
from .corpus import (
    HETEROGENEITY_FLOOR,
    GeneratorOptions,
    IngestError,
    default_profiles,
    generate_synthetic,
    heterogeneity,
    load_corpus,
    profiles_from_dicts,
    write_corpus,
)
from .evaluation import EvaluationError, MetricsReport, evaluate_participant, summary_table
from .federation import ProtocolError, partition_parameters, run_experiment
from .patch import patch_param_count
from .reporting import RowResult, combined_table, run_summary, write_grid_outputs
from .trainer import score_examples

log = logging.getLogger("fedmatch")

USER_ERRORS = (ConfigError, IngestError, CheckpointError, ProtocolError, EvaluationError, OSError)


class UsageError(ValueError):
    pass


def _read_yaml(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return raw


# --------------------------------------------------------------------------- #
# generate
# --------------------------------------------------------------------------- #
GENERATE_KEYS = {"seed", "scale", "domain_vocab", "shared_vocab", "profiles", "generator", "ratios", "negatives_per_question"}


def generate_from_dict(raw: dict, out_dir: str | Path, seed: int | None = None):
    for key in raw:
        if key not in GENERATE_KEYS:
            raise ConfigError(key, "unknown field")
    gen_raw = raw.get("generator") or {}
    known = {f.name for f in dataclasses.fields(GeneratorOptions)}
    for key in gen_raw:
        if key not in known:
            raise ConfigError(f"generator.{key}", "unknown field")
    if "shared_vocab" in raw and "shared_vocab" not in gen_raw:
        gen_raw = {**gen_raw, "shared_vocab": raw["shared_vocab"]}
    options = GeneratorOptions(**gen_raw)
    options.validate()
    if raw.get("profiles"):
        profiles = profiles_from_dicts(raw["profiles"])
    else:
        profiles = default_profiles(
            scale=float(raw.get("scale", 0.45)),
            domain_vocab=int(raw.get("domain_vocab", 160)),
            shared_vocab=options.shared_vocab,
        )
    seed = int(raw.get("seed", 0)) if seed is None else seed
    ratios = tuple(raw.get("ratios", (0.8, 0.1, 0.1)))
    data = generate_synthetic(profiles, seed, options)
    return write_corpus(out_dir, data, seed, profiles, options, ratios, int(raw.get("negatives_per_question", 5)))


def cmd_generate(args) -> int:
    raw = _read_yaml(args.config) if args.config else {}
    corpus = generate_from_dict(raw, args.out, args.seed)
    for pid in corpus.participants:
        sizes = {s: len({ex.qid for ex in corpus.splits[pid][s]}) for s in ("train", "dev", "test")}
        print(f"{pid}: {sizes['train']} train / {sizes['dev']} dev / {sizes['test']} test questions")
    if len(corpus.participants) > 1:
        data = {pid: [ex for part in corpus.splits[pid].values() for ex in part] for pid in corpus.participants}
        print(f"min pairwise unigram JS divergence: {heterogeneity(data):.4f} (non-IID floor {HETEROGENEITY_FLOOR})")
    print(f"corpus written to {args.out}")
    return 0


# --------------------------------------------------------------------------- #
# run
# --------------------------------------------------------------------------- #
def _resolve_corpus(cfg: RunConfig, override: str | None) -> RunConfig:
    return cfg.replace(corpus=override) if override else cfg


def execute_run(cfg: RunConfig, out_dir: str | Path, workers: int = 1, quiet: bool = False) -> MetricsReport:
    """Run one experiment and write metrics, checkpoints and summaries."""
    corpus = load_corpus(cfg.corpus)
    participants = list(cfg.data.participants or corpus.participants)
    cfg.validate(len(participants))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    start = time.time()

    def progress(rep):
        if not quiet:
            o_map, o_mrr = rep.overall
            flagged = f" flagged={rep.flagged}" if rep.flagged else ""
            print(
                f"[{cfg.name}] round {rep.round}/{cfg.federation.rounds} dev MAP {o_map:.4f} MRR {o_mrr:.4f}"
                f" ({time.time() - start:.0f}s){flagged}",
                file=sys.stderr,
                flush=True,
            )

    result = run_experiment(cfg, corpus, out_dir=out, workers=workers, on_round=progress)
    fed = result.federation
    model = fed.server.model
    shared, private = partition_parameters(model)
    sizes = dict(parameter_shapes(model))

    def count(names):
        total = 0
        for n in names:
            c = 1
            for s in sizes[n]:
                c *= s
            total += c
        return total

    counts = {
        "shared parameters": count(shared),
        "private parameters": count(private),
        "patch parameters": patch_param_count(model),
    }
    trunc = TruncationStats()
    skipped = 0
    for c in fed.clients:
        trunc.merge(c.truncation)
        skipped += c.skipped_questions
    trunc_info = {
        "training inputs truncated": f"{trunc.truncated} of {trunc.sequences}",
        "questions skipped (no negatives)": skipped,
    }
    summary = run_summary(cfg.name, result.final, counts, trunc_info)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    report = {
        "name": cfg.name,
        "seed": cfg.seed,
        "final": result.final.to_dict(),
        "rounds": [
            {
                "round": r.round,
                "sampled": r.sampled,
                "flagged": r.flagged,
                "losses": r.losses,
                "dev": {k: {"map": m.map, "mrr": m.mrr} for k, m in r.dev.items()},
                "overall_dev_map": r.overall[0],
                "overall_dev_mrr": r.overall[1],
            }
            for r in result.rounds
        ],
        "counts": counts,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return result.final


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides: dict[str, Any] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(item, "overrides take the form key=value")
        key, value = item.split("=", 1)
        overrides[key] = yaml.safe_load(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "corpus", None):
        overrides["corpus"] = args.corpus
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    report = execute_run(cfg, out, workers=args.workers)
    sys.stdout.write((out / "summary.txt").read_text(encoding="utf-8"))
    print(f"outputs in {out}")
    return 0


# --------------------------------------------------------------------------- #
# grid
# --------------------------------------------------------------------------- #
@dataclasses.dataclass(frozen=True)
class GridRow:
    name: str
    axis: str | None
    value: Any
    config: RunConfig


def ablation_axes(base: RunConfig) -> list[tuple[str, str | None, Any, dict]]:
    """Rows of the standard ablation grid, each changing one knob of ``base``
    (client-sampling rows also exist for the no-patch baseline)."""
    d = base.model.d_model
    rows: list[tuple[str, str | None, Any, dict]] = [("fedmatch", None, None, {})]
    for mode in ("inner", "outer", "vertical", "horizontal"):
        for kind in ("pal", "low_rank"):
            label = f"{mode}-{kind}"
            rows.append((f"structure-{label}", "structure", label, {"model.insertion_mode": mode, "model.patch_kind": kind}))
    for k in range(base.model.n_layers + 1):
        rows.append((f"shared-layers-{k}", "n_shared_layers", k, {"model.n_shared_layers": k}))
    # patch sizes {32..512} of a 768-wide encoder, rescaled to this width
    for size in (32, 64, 128, 256, 512):
        ds = max(1, round(size / 768 * d))
        rows.append((f"patch-size-{ds}", "d_patch", ds, {"model.d_patch": ds}))
    for k in (1, 2, 3):
        rows.append((f"aggregation-every-{k}", "aggregation_every_k_epochs", k, {"federation.aggregation_every_k_epochs": k}))
    for ratio in (0.2, 0.4, 0.6, 0.8, 1.0):
        rows.append((f"train-ratio-{ratio}", "train_ratio", ratio, {"data.train_ratio": ratio}))
    rows.append(("fedmatch-sampled-2", "sampling", "fedmatch", {"federation.sample_size": 2}))
    rows.append(("fedavg", "baseline", "fedavg", {"model.insertion_mode": "none"}))
    rows.append(("fedavg-sampled-2", "sampling", "fedavg", {"model.insertion_mode": "none", "federation.sample_size": 2}))
    rows.append(("isolated", "baseline", "isolated", {"model.insertion_mode": "none", "federation.mode": "isolated"}))
    return rows


def load_grid(path: str | Path, seed: int | None = None) -> list[GridRow]:
    """Resolve and validate every row before anything runs."""
    path = Path(path)
    raw = _read_yaml(path)
    for key in raw:
        if key not in ("base", "preset", "rows"):
            raise ConfigError(key, "unknown field")
    base_raw = raw.get("base") or {}
    if isinstance(base_raw, str):
        base = load_config((path.parent / base_raw) if not Path(base_raw).is_absolute() else base_raw)
    elif isinstance(base_raw, dict):
        base = config_from_dict(base_raw, path.parent)
    else:
        raise ConfigError("base", "must be a mapping or a config path")
    if seed is not None:
        base = base.replace(seed=seed)
    specs: list[tuple[str, str | None, Any, dict]] = []
    preset = raw.get("preset")
    if preset is not None:
        if preset != "ablation-axes":
            raise ConfigError("preset", "only 'ablation-axes' is available")
        specs += ablation_axes(base)
    for i, row in enumerate(raw.get("rows") or []):
        if not isinstance(row, dict) or "name" not in row:
            raise ConfigError(f"rows[{i}]", "needs a name")
        for key in row:
            if key not in ("name", "axis", "value", "set"):
                raise ConfigError(f"rows[{i}].{key}", "unknown field")
        overrides = row.get("set") or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"rows[{i}].set", "must be a mapping of dotted keys")
        specs.append((str(row["name"]), row.get("axis"), row.get("value"), overrides))
    if not specs:
        raise ConfigError("rows", "the grid is empty")
    names = [s[0] for s in specs]
    dup = next((n for n in names if names.count(n) > 1), None)
    if dup:
        raise ConfigError("rows", f"duplicate row name {dup!r}")
    rows = []
    for name, axis, value, overrides in specs:
        try:
            cfg = apply_overrides(base, {**overrides, "name": name})
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"rows[{name}].{exc.path}", str(exc).split(": ", 1)[-1]) from exc
        rows.append(GridRow(name, axis, value, cfg))
    return rows


def _grid_worker(row: GridRow, out_dir: str) -> tuple[str, dict | None, str | None]:
    try:
        report = execute_run(row.config, out_dir, quiet=True)
        return row.name, report.to_dict(), None
    except Exception as exc:  # recorded per row; the grid carries on
        return row.name, None, f"{type(exc).__name__}: {exc}"


def cmd_grid(args) -> int:
    rows = load_grid(args.config, args.seed)
    if args.rows:
        patterns = [p.strip() for p in args.rows.split(",") if p.strip()]
        rows = [r for r in rows if any(fnmatch.fnmatch(r.name, p) for p in patterns)]
        if not rows:
            raise ConfigError("--rows", f"no grid row matches {args.rows!r}")
    if args.corpus:
        rows = [dataclasses.replace(r, config=r.config.replace(corpus=args.corpus)) for r in rows]
    out = Path(args.out) if args.out else Path("runs") / "grid"
    out.mkdir(parents=True, exist_ok=True)
    for r in rows:
        load_corpus(r.config.corpus)  # fail fast on a missing corpus
    # rows whose resolved configs coincide are computed once
    unique: dict[str, GridRow] = {}
    alias: dict[str, str] = {}
    for r in rows:
        key = json.dumps({**r.config.to_dict(), "name": ""}, sort_keys=True)
        alias[r.name] = unique.setdefault(key, r).name
    todo = list({id(r): r for r in unique.values()}.values())
    results: dict[str, tuple[dict | None, str | None]] = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_grid_worker, r, str(out / "rows" / r.name)) for r in todo]
            for fut in futures:
                name, report, err = fut.result()
                results[name] = (report, err)
                print(f"[grid] {name}: {'ok' if err is None else err}", file=sys.stderr, flush=True)
    else:
        for r in todo:
            name, report, err = _grid_worker(r, str(out / "rows" / r.name))
            results[name] = (report, err)
            print(f"[grid] {name}: {'ok' if err is None else err}", file=sys.stderr, flush=True)
    outcomes = []
    for r in rows:
        report, err = results[alias[r.name]]
        outcomes.append(
            RowResult(r.name, r.axis, r.value, MetricsReport.from_dict(report) if report else None, err, str(out / "rows" / alias[r.name]))
        )
    write_grid_outputs(out, outcomes, plots=not args.no_plots)
    sys.stdout.write(combined_table(outcomes))
    print(f"outputs in {out}")
    return 1 if any(not o.ok for o in outcomes) else 0


# --------------------------------------------------------------------------- #
# eval
# --------------------------------------------------------------------------- #
def evaluate_checkpoint(ckpt: checkpoint.Checkpoint, corpus, split: str = "test", source: str = "checkpoint"):
    meta = ckpt.meta
    pid = meta.get("participant")
    if pid is None:
        raise CheckpointError(f"{source}: no participant recorded in the manifest")
    if pid not in corpus.splits:
        raise CheckpointError(f"{source}: participant {pid!r} is not in the corpus")
    try:
        model = ModelConfig(**ckpt.config)
    except TypeError as exc:
        raise CheckpointError(f"{source}: unreadable model config ({exc})") from exc
    vocab = Vocabulary(meta.get("vocab", []))
    if len(vocab) != model.vocab_size:
        raise CheckpointError(
            f"{source}: parameter 'embeddings.token' has {model.vocab_size} rows but the stored vocabulary has {len(vocab)}"
        )
    checkpoint.check_schema(ckpt.params, parameter_shapes(model))
    batch = int(meta.get("eval_batch_size", 128))
    return pid, evaluate_participant(
        lambda exs: score_examples(ckpt.params, model, vocab, exs, batch), corpus.splits[pid][split]
    )


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if path.is_dir():
        final = path / "final" if (path / "final").is_dir() else path
        files = sorted(final.glob("*.fmck"))
        if not files:
            raise OSError(f"no checkpoints (*.fmck) under {path}")
    else:
        files = [path]
    corpus = load_corpus(args.corpus)
    report = MetricsReport()
    for f in files:
        pid, metrics = evaluate_checkpoint(checkpoint.load(f), corpus, args.split, str(f))
        report.participants[pid] = metrics
    # keep corpus participant order
    report.participants = {p: report.participants[p] for p in corpus.participants if p in report.participants}
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    sys.stdout.write(summary_table([(path.name or str(path), report)]))
    return 0


# --------------------------------------------------------------------------- #
# entry
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-participant corpus")
    g.add_argument("--config", help="generator YAML (defaults: five scaled profiles)")
    g.add_argument("--out", required=True, help="corpus directory to write")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run one federated experiment")
    r.add_argument("--config", required=True, help="run config YAML")
    r.add_argument("--out", help="output directory (default runs/<name>)")
    r.add_argument("--seed", type=int, help="override the run seed")
    r.add_argument("--corpus", help="override the corpus path")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. model.d_patch=4")
    r.add_argument("--workers", type=int, default=1, help="threads for clients within a round")
    r.set_defaults(func=cmd_run)

    gr = sub.add_parser("grid", help="run a grid of experiments and compare them")
    gr.add_argument("--config", required=True, help="grid YAML (base config plus rows or a preset)")
    gr.add_argument("--out", help="output directory (default runs/grid)")
    gr.add_argument("--seed", type=int, help="override the seed of every row")
    gr.add_argument("--corpus", help="override the corpus path of every row")
    gr.add_argument("--rows", help="comma-separated name patterns selecting rows")
    gr.add_argument("--jobs", type=int, default=1, help="rows run in parallel processes")
    gr.add_argument("--no-plots", action="store_true", help="write sweep CSVs without figures")
    gr.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", help="evaluate saved per-participant checkpoints")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, run directory or final/ directory")
    e.add_argument("--corpus", required=True, help="corpus directory")
    e.add_argument("--split", default="test", choices=("train", "dev", "test"))
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # anything else is a bug
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
