import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import reference as ref
from helpers import COMBOS, random_params, toy_config
from fedmatch.autodiff import GradTape, Tensor, grad_check
from fedmatch.backbone import (
    CLS,
    PAD,
    SEP,
    UNK,
    TruncationStats,
    Vocabulary,
    backbone_shapes,
    build_input,
    embed,
    encode,
    ffn_block,
    init_parameters,
    pad_batch,
    parameter_shapes,
    score,
    score_batch,
    self_attention,
    to_tensors,
    tokenize,
)
from fedmatch.layers import LayerParams, attention_weights
from fedmatch.config import ModelConfig


def tensors(params, grad=False):
    return to_tensors(params, requires_grad=grad)


# --------------------------------------------------------------------------- vocabulary / inputs
def test_tokenize_lowercases_and_splits():
    assert tokenize("What IS  this?\tok") == ["what", "is", "this?", "ok"]


def test_vocabulary_reserved_ids_and_unknowns():
    v = Vocabulary.build([["b", "a"], ["c", "a"]])
    assert v.itos[:4] == ["[PAD]", "[CLS]", "[SEP]", "[UNK]"]
    assert (PAD, CLS, SEP, UNK) == (0, 1, 2, 3)
    assert v.encode(["a", "b", "c", "zzz"]) == [4, 5, 6, UNK]
    assert Vocabulary(v.to_list()) == v


def test_build_input_layout():
    ids, segs = build_input([10, 11], [20, 21, 22], 12)
    assert ids == [CLS, 10, 11, SEP, 20, 21, 22, SEP]
    assert segs == [0, 0, 0, 0, 1, 1, 1, 1]


def test_build_input_truncates_answer_only():
    stats = TruncationStats()
    ids, segs = build_input([10, 11], [20, 21, 22, 23], 7, stats)
    assert ids == [CLS, 10, 11, SEP, 20, 21, SEP]
    assert (stats.sequences, stats.truncated, stats.dropped_tokens) == (1, 1, 2)
    with pytest.raises(ValueError, match="question of 5 tokens"):
        build_input([1, 2, 3, 4, 5], [6], 7)


def test_pad_batch():
    ids, segs, mask = pad_batch([([1, 5, 2], [0, 0, 0]), ([1, 5, 2, 6, 2], [0, 0, 0, 1, 1])])
    assert ids.tolist() == [[1, 5, 2, 0, 0], [1, 5, 2, 6, 2]]
    assert mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert segs[1].tolist() == [0, 0, 0, 1, 1]


# --------------------------------------------------------------------------- parameters
def test_parameter_names_ordered_and_shapes():
    cfg = toy_config()
    names = [n for n, _ in backbone_shapes(cfg)]
    assert names[:3] == ["embeddings.token", "embeddings.position", "embeddings.segment"]
    assert names[-2:] == ["head.weight", "head.bias"]
    shapes = dict(backbone_shapes(cfg))
    assert shapes["layers.1.attention.query"] == (2, 4, 8)
    assert shapes["layers.0.ffn.w1"] == (16, 8)
    assert shapes["head.bias"] == ()


def test_parameter_count_pure_function_of_config():
    cfg = toy_config()
    d, n, dff, V, L = 8, 2, 16, 12, 12
    per_layer = 3 * d * d + d * d + 2 * d + dff * d + dff + d * dff + d + 2 * d
    expected = V * d + L * d + 2 * d + 2 * per_layer + d + 1
    assert sum(int(np.prod(s)) for _, s in backbone_shapes(cfg)) == expected
    assert backbone_shapes(cfg) == backbone_shapes(toy_config())


def test_init_recipe():
    cfg = ModelConfig(vocab_size=50, insertion_mode="horizontal")
    p = init_parameters(cfg, [7])
    assert np.all(p["layers.0.attention.norm.gain"] == 1.0)
    assert np.all(p["layers.0.ffn.b1"] == 0.0)
    assert np.all(p["head.bias"] == 0.0)
    assert np.all(p["patches.layers.1.up"] == 0.0)
    w = p["embeddings.token"]
    assert abs(w.std() - 0.02) < 0.002 and abs(w.mean()) < 0.002


def test_init_keyed_by_name():
    a = init_parameters(toy_config("none"), [3])
    b = init_parameters(toy_config("horizontal"), [3])
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()
    c = init_parameters(toy_config("none"), [4])
    assert a["embeddings.token"].tobytes() != c["embeddings.token"].tobytes()


# --------------------------------------------------------------------------- embed
def test_embed_zero_tables():
    cfg = toy_config()
    p = {k: np.zeros_like(v) for k, v in init_parameters(cfg, [0]).items()}
    assert np.all(embed([1, 5, 2], [0, 0, 0], tensors(p)).data == 0.0)


def test_embed_lookup_oracle():
    cfg = toy_config()
    p = random_params(cfg, 1)
    ids, segs = [1, 7, 2], [0, 0, 1]
    out = embed(ids, segs, tensors(p)).data
    for j, (t, s) in enumerate(zip(ids, segs)):
        want = p["embeddings.token"][t] + p["embeddings.position"][j] + p["embeddings.segment"][s]
        np.testing.assert_allclose(out[j], want, rtol=0, atol=1e-15)


def test_embed_out_of_range_id():
    p = tensors(random_params(toy_config(), 1))
    with pytest.raises(IndexError):
        embed([1, 99], [0, 0], p)


# --------------------------------------------------------------------------- attention / layers
def test_attention_singleton_weight_is_one():
    cfg = toy_config()
    p = random_params(cfg, 2)
    w = attention_weights(np.random.default_rng(0).normal(size=(1, 8)), p["layers.0.attention.query"], p["layers.0.attention.key"])
    assert w.shape == (2, 1, 1) and np.all(w == 1.0)


def test_attention_identical_positions_split_evenly():
    cfg = toy_config()
    p = random_params(cfg, 2)
    row = np.random.default_rng(0).normal(size=8)
    w = attention_weights(np.stack([row, row]), p["layers.0.attention.query"], p["layers.0.attention.key"])
    np.testing.assert_array_equal(w, np.full((2, 2, 2), 0.5))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_attention_rows_sum_to_one(seed, seq):
    cfg = toy_config()
    p = random_params(cfg, seed % 7)
    h = np.random.default_rng(seed).normal(size=(seq, 8))
    w = attention_weights(h, p["layers.1.attention.query"], p["layers.1.attention.key"])
    assert np.all(np.abs(w.sum(-1) - 1.0) < 1e-12)


def test_self_attention_matches_naive_loops():
    cfg = toy_config(d_model=4, d_ff=8)
    p = random_params(cfg, 3)
    H = np.random.default_rng(5).normal(size=(3, 4))
    got = self_attention(Tensor(H), LayerParams(tensors(p), 0)).data
    pl = ref.to_lists(p)
    A = ref.mh(H.tolist(), pl, "layers.0.")
    want = [ref.ln_attn(ref.vadd(A[j], H[j].tolist()), pl, "layers.0.") for j in range(3)]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_ffn_block_zero_ffn_is_layer_norm():
    cfg = toy_config()
    p = random_params(cfg, 4)
    for k in ("w1", "b1", "w2", "b2"):
        p[f"layers.0.ffn.{k}"] = np.zeros_like(p[f"layers.0.ffn.{k}"])
    p["layers.0.ffn.norm.gain"] = np.ones(8)
    p["layers.0.ffn.norm.bias"] = np.zeros(8)
    h = np.random.default_rng(1).normal(size=(3, 8))
    got = ffn_block(Tensor(h), LayerParams(tensors(p), 0)).data
    want = [ref.layer_norm(r.tolist(), [1.0] * 8, [0.0] * 8) for r in h]
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


def test_ffn_block_hand_params():
    # single position, d=2: W1 = I, b1 = 0, W2 = I, b2 = [1, 0], unit gain / zero bias
    cfg = toy_config(d_model=2, n_heads=1, d_ff=2, d_patch=1)
    p = {
        "layers.0.ffn.w1": np.eye(2), "layers.0.ffn.b1": np.zeros(2),
        "layers.0.ffn.w2": np.eye(2), "layers.0.ffn.b2": np.array([1.0, 0.0]),
        "layers.0.ffn.norm.gain": np.ones(2), "layers.0.ffn.norm.bias": np.zeros(2),
    }
    full = {**{k: np.zeros(s) for k, s in backbone_shapes(cfg)}, **p}
    h = np.array([[0.5, -0.5]])
    # FFN(h) + h = [0.5 + gelu(0.5) + 1, -0.5 + gelu(-0.5)]
    v = [0.5 + ref.gelu(0.5) + 1.0, -0.5 + ref.gelu(-0.5)]
    want = ref.layer_norm(v, [1.0, 1.0], [0.0, 0.0])
    got = ffn_block(Tensor(h), LayerParams(tensors(full), 0)).data
    np.testing.assert_allclose(got[0], want, rtol=1e-13)
    # two-element layer norm of distinct values is +-1 up to epsilon
    assert abs(abs(got[0, 0]) - 1.0) < 1e-4


@given(st.integers(1, 5), st.integers(0, 100))
def test_layer_shapes_preserved(seq, seed):
    cfg = toy_config()
    p = tensors(random_params(cfg, seed % 5))
    h = Tensor(np.random.default_rng(seed).normal(size=(seq, 8)))
    lp = LayerParams(p, 0)
    assert self_attention(h, lp).shape == (seq, 8)
    assert ffn_block(h, lp).shape == (seq, 8)


# --------------------------------------------------------------------------- encode / score
@pytest.mark.parametrize("mode,kind", [("none", "low_rank")] + COMBOS)
def test_encode_matches_naive_loops(mode, kind):
    cfg = toy_config(mode, kind, d_model=4, d_ff=8, d_patch=2, pal_heads=1)
    p = random_params(cfg, 11)
    ids, segs = [1, 5, 2, 7, 8, 2], [0, 0, 0, 1, 1, 1]
    got = encode(np.array(ids), np.array(segs), tensors(p), cfg).data
    np.testing.assert_allclose(got, ref.encode(ids, segs, p, cfg), rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("mode,kind", [("none", "low_rank")] + COMBOS)
def test_score_matches_naive_loops(mode, kind):
    cfg = toy_config(mode, kind, d_model=4, d_ff=8, d_patch=2, pal_heads=1)
    p = random_params(cfg, 12)
    got = score([5, 6], [7, 8, 9], tensors(p), cfg).item()
    ids, segs = build_input([5, 6], [7, 8, 9], cfg.max_seq_len)
    assert abs(got - ref.score(ids, segs, p, cfg)) < 1e-11


def test_constant_head_gives_constant_score():
    cfg = toy_config("horizontal")
    p = random_params(cfg, 2)
    p["head.weight"] = np.zeros(8)
    p["head.bias"] = np.array(0.75)
    for q, a in ([[4], [5]], [[6, 7], [8, 9, 10]]):
        assert score(q, a, tensors(p), cfg).item() == 0.75


def test_score_is_deterministic():
    cfg = toy_config("outer", "pal")
    p = tensors(random_params(cfg, 2))
    assert score([4, 5], [6], p, cfg).data.tobytes() == score([4, 5], [6], p, cfg).data.tobytes()


@pytest.mark.parametrize("mode,kind", [("none", "low_rank")] + COMBOS)
def test_cls_shortcut_agrees_with_full_encoding(mode, kind):
    cfg = toy_config(mode, kind)
    p = tensors(random_params(cfg, 3))
    ids, segs, mask = pad_batch([build_input([4, 5], [6, 7, 8], 12), build_input([9], [10], 12)])
    fast = score_batch(ids, segs, mask, p, cfg).data
    h = encode(ids, segs, p, cfg, mask).data[:, 0, :]
    full = h @ p["head.weight"].data + p["head.bias"].data
    np.testing.assert_allclose(fast, full, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode,kind", [("none", "low_rank"), ("horizontal", "pal"), ("inner", "low_rank")])
def test_padding_does_not_change_scores(mode, kind):
    cfg = toy_config(mode, kind)
    p = tensors(random_params(cfg, 4))
    seqs = [build_input([4], [5], 12), build_input([6, 7, 8], [9, 10, 11, 4], 12)]
    ids, segs, mask = pad_batch(seqs)
    batched = score_batch(ids, segs, mask, p, cfg).data
    alone = [score([4], [5], p, cfg).item(), score([6, 7, 8], [9, 10, 11, 4], p, cfg).item()]
    np.testing.assert_allclose(batched, alone, rtol=1e-12, atol=1e-12)


def test_full_backbone_gradient_two_token_example():
    cfg = toy_config()
    params = tensors(random_params(cfg, 5), grad=True)
    err = grad_check(lambda: score([5], [6], params, cfg), list(params.values()))
    assert err < 1e-4


def test_gradient_reaches_every_parameter_used():
    cfg = toy_config("horizontal")
    params = tensors(random_params(cfg, 6), grad=True)
    with GradTape() as tape:
        s = score([5, 6], [7], params, cfg)
    tape.backward(s)
    for name, t in params.items():
        if name in ("embeddings.token", "embeddings.position"):
            continue  # only touched rows carry gradient
        assert t.grad is not None and np.any(t.grad != 0), name
