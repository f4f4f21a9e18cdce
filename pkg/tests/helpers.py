import numpy as np

from fedmatch.backbone import init_parameters
from fedmatch.config import ModelConfig

COMBOS = [(m, k) for m in ("inner", "outer", "vertical", "horizontal") for k in ("pal", "low_rank")]


def toy_config(mode="none", kind="low_rank", **kw):
    base = dict(d_model=8, n_heads=2, n_layers=2, d_ff=16, vocab_size=12, max_seq_len=12, d_patch=4, pal_heads=2)
    base.update(kw)
    return ModelConfig(insertion_mode=mode, patch_kind=kind, **base)


def random_params(cfg, seed=0, std=0.5, randomize_up=True):
    """Parameters with O(1) entries (well-conditioned finite differences) and,
    by default, non-zero patch up-projections and non-trivial norms."""
    r = np.random.default_rng(seed)
    params = init_parameters(cfg, [seed])
    out = {}
    for name, value in params.items():
        if name.endswith(".up") and not randomize_up:
            out[name] = np.zeros_like(value)
        elif name.endswith(".gain"):
            out[name] = 1.0 + 0.1 * r.normal(size=value.shape)
        else:
            out[name] = std * r.normal(size=value.shape)
    return out


def tiny_profiles(n=3, questions=12):
    from fedmatch.corpus import ParticipantProfile

    return [
        ParticipantProfile(f"p{t}", 40 + 30 * t, 30, questions + 3 * t, 4.0, 4.0, 5.0, 0.3)
        for t in range(n)
    ]


TINY_OPTIONS = dict(shared_vocab=40, n_topics=3, keywords_per_topic=4, max_answer_length=8, max_question_length=6)


def tiny_corpus(n=3, questions=12, seed=0, out_dir=None):
    """Small generated corpus, split and with mined negatives; written to
    ``out_dir`` when given, otherwise built in memory."""
    from fedmatch.corpus import Corpus, GeneratorOptions, generate_synthetic, mine_negatives, split, write_corpus

    profiles = tiny_profiles(n, questions)
    opts = GeneratorOptions(**TINY_OPTIONS)
    data = generate_synthetic(profiles, seed, opts)
    if out_dir is not None:
        return write_corpus(out_dir, data, seed, profiles, opts)
    corpus = Corpus(list(data), {}, {})
    for pid, exs in data.items():
        tr, dv, te = split(exs, (0.6, 0.2, 0.2), seed)
        corpus.splits[pid] = {"train": tr, "dev": dv, "test": te}
        corpus.negatives[pid] = mine_negatives(tr, 5)
    return corpus


def tiny_run(**overrides):
    from fedmatch.config import RunConfig

    base = {
        "model.d_model": 8,
        "model.n_heads": 2,
        "model.d_ff": 16,
        "model.d_patch": 4,
        "model.max_seq_len": 20,
        "federation.rounds": 2,
        "training.learning_rate": 0.01,
        "training.batch_size": 4,
    }
    base.update(overrides)
    return RunConfig(name="tiny").replace(**base)
