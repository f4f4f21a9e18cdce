from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import tiny_corpus, tiny_run, toy_config
from fedmatch import checkpoint
from fedmatch.autodiff import GradTape
from fedmatch.backbone import to_tensors
from fedmatch.federation import (
    PrivacyError,
    ProtocolError,
    Transport,
    aggregate,
    decode_update,
    distribute,
    encode_update,
    partition_parameters,
    run_experiment,
    run_round,
    sample_clients,
    setup,
)
from fedmatch.seeding import stream
from fedmatch.trainer import OptimizerState, batch_loss, batches_per_epoch, epoch_order, optimizer_step


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus(3, 12, seed=0)


@pytest.fixture(scope="module")
def corpus5():
    return tiny_corpus(5, 10, seed=1)


# ------------------------------------------------------------ partition ---- #
def test_partition_all_shared_with_patches():
    shared, private = partition_parameters(toy_config("horizontal"))
    assert all(n.startswith("patches.") for n in private) and len(private) == 4
    assert "embeddings.token" in shared and "head.weight" in shared
    assert any(n.startswith("layers.1.") for n in shared)


def test_partition_top_layer_private():
    shared, private = partition_parameters(toy_config("none", n_shared_layers=1))
    assert not any(n.startswith("layers.1.") for n in shared)
    assert all(n.startswith("layers.1.") for n in private) and private
    assert "head.weight" in shared


def test_partition_fedavg_has_nothing_private():
    assert partition_parameters(toy_config("none"))[1] == []


# ------------------------------------------------------------ aggregate ---- #
def _random_sets(r, k, shapes=((3, 4), (5,), ())):
    return [{f"p{i}": r.normal(size=s) * 10 ** r.uniform(-3, 3) for i, s in enumerate(shapes)} for _ in range(k)]


def test_aggregate_matches_exact_rational_mean():
    r = np.random.default_rng(0)
    sets = _random_sets(r, 5)
    got = aggregate(sets)
    for name in sets[0]:
        flat = [np.ravel(s[name]) for s in sets]
        exact = [float(sum(Fraction(float(a[j])) for a in flat) / 5) for j in range(flat[0].size)]
        assert np.max(np.abs(np.ravel(got[name]) - exact)) <= 1e-12 * max(1.0, np.max(np.abs(exact)))


def test_aggregate_exact_cases():
    a = {"w": np.array([0.1, 0.7, -3.3])}
    assert aggregate([a, a, a])["w"].tobytes() == a["w"].tobytes()
    two = aggregate([{"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 5.0])}])
    np.testing.assert_array_equal(two["w"], [2.0, 3.5])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6))
def test_aggregate_within_range(values):
    got = float(aggregate([{"x": np.array(v)} for v in values])["x"])
    assert min(values) - 1e-9 <= got <= max(values) + 1e-9


def test_aggregate_rejects_mismatched_schema():
    with pytest.raises(ProtocolError, match="b"):
        aggregate([{"a": np.zeros(2), "b": np.zeros(2)}, {"a": np.zeros(2), "b": np.zeros(3)}])
    with pytest.raises(ProtocolError):
        aggregate([])


# ------------------------------------------------------------- messages ---- #
def test_encode_update_refuses_private_names():
    with pytest.raises(PrivacyError, match="patches.x"):
        encode_update({"a": np.zeros(1), "patches.x": np.zeros(1)}, ["patches.x"])


def test_decode_update_checks_schema():
    payload = encode_update({"a": np.zeros(2)}, [])
    assert decode_update(payload, [("a", (2,))])["a"].shape == (2,)
    with pytest.raises(ProtocolError):
        decode_update(payload, [("a", (3,))])


def test_distribute_copies_theta_to_selected(corpus):
    fed = setup(tiny_run(), corpus)
    for k in fed.server.theta:
        fed.server.theta[k] = fed.server.theta[k] + 1.0
    distribute(fed.server, fed.clients, [1])
    name = next(iter(fed.server.theta))
    assert np.array_equal(fed.clients[1].shared[name], fed.server.theta[name])
    assert not np.array_equal(fed.clients[0].shared[name], fed.server.theta[name])
    assert fed.clients[1].shared[name] is not fed.server.theta[name]


# ------------------------------------------------------------- sampling ---- #
def test_sampling_frequency_within_three_sigma(corpus5):
    fed = setup(tiny_run(**{"federation.sample_size": 2}), corpus5)
    n = 3000
    counts = np.zeros(5)
    for r in range(n):
        chosen = sample_clients(fed.server, stream(0, "sample", r))
        assert len(chosen) == 2 and len(set(chosen)) == 2
        counts[chosen] += 1
    p = 2 / 5
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_full_participation_by_default(corpus):
    fed = setup(tiny_run(), corpus)
    assert sample_clients(fed.server, np.random.default_rng(0)) == [0, 1, 2]


# ------------------------------------------------------ protocol oracle ---- #
def test_manual_protocol_oracle(corpus):
    cfg = tiny_run(**{"federation.rounds": 1, "training.batch_size": 1000, "data.participants": ("p0", "p1")})
    fed = setup(cfg, corpus)
    model = fed.server.model
    theta0 = {k: v.copy() for k, v in fed.server.theta.items()}
    privates = [{k: v.copy() for k, v in c.private.items()} for c in fed.clients]
    pairs = [c.pairs for c in fed.clients]
    order = fed.clients[0].order

    # hand-composed: copy theta, one Adam step on the whole pair list, average
    locals_ = []
    for t in range(2):
        params = {k: ({**theta0, **privates[t]})[k].copy() for k in order}
        total = cfg.federation.rounds * batches_per_epoch(len(pairs[t]), 1000)
        opt = OptimizerState.create(params, total, cfg.training)
        idx = epoch_order(pairs[t], stream(cfg.seed, "epoch", t, 1, 0))
        tensors = to_tensors(params, requires_grad=True)
        with GradTape() as tape:
            loss = batch_loss(tensors, [pairs[t][i] for i in idx], model)
        tape.backward(loss)
        optimizer_step(params, {k: v.grad for k, v in tensors.items() if v.grad is not None}, opt)
        locals_.append(params)
    want = {k: (locals_[0][k] + locals_[1][k]) / 2 for k in theta0}
    want = {k: np.where(locals_[0][k] == locals_[1][k], locals_[0][k], w) for k, w in want.items()}

    run_round(fed)
    for k in theta0:
        assert fed.server.theta[k].tobytes() == want[k].tobytes(), k
    for t in range(2):
        for k in privates[t]:
            assert fed.clients[t].private[k].tobytes() == locals_[t][k].tobytes(), k


# -------------------------------------------------------------- privacy ---- #
def test_privacy_scan_of_uplinks(corpus5):
    transport = Transport(record=True)
    cfg = tiny_run(**{"federation.rounds": 3, "model.n_shared_layers": 1})
    fed = setup(cfg, corpus5, transport=transport)
    private = fed.private_names
    assert any(n.startswith("layers.") for n in private) and any(n.startswith("patches.") for n in private)
    for _ in range(3):
        seen = len(transport.uplinks)
        run_round(fed)
        for r, client, payload in transport.uplinks[seen:]:
            names = set(checkpoint.loads(payload).params)
            assert names == set(fed.shared_names)
            for name in private:
                assert name.encode() not in payload
            for c in fed.clients:
                for name in private:
                    value = c.private[name]
                    if np.all(value == value.flat[0]):
                        continue  # constant tensors (fresh gains/biases) carry no client information
                    assert value.astype("<f8").tobytes() not in payload, (client, c.name, name)
    assert len(transport.uplinks) == 15


# --------------------------------------------------------- edge configs ---- #
def test_zero_learning_rate_fixed_point(corpus):
    fed = setup(tiny_run(**{"training.learning_rate": 0.0}), corpus)
    theta0 = {k: v.copy() for k, v in fed.server.theta.items()}
    priv0 = [{k: v.copy() for k, v in c.private.items()} for c in fed.clients]
    run_round(fed)
    run_round(fed)
    assert all(fed.server.theta[k].tobytes() == theta0[k].tobytes() for k in theta0)
    for c, p in zip(fed.clients, priv0):
        assert all(c.private[k].tobytes() == p[k].tobytes() for k in p)


def test_zero_rounds_evaluates_initial_model(corpus, tmp_path):
    res = run_experiment(tiny_run(**{"federation.rounds": 0}), corpus, out_dir=tmp_path)
    assert res.rounds == []
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "overall_test_map" in lines[0]
    assert 0 < res.overall[0] <= 1


def test_single_client_federation_equals_local_training(corpus):
    cfg = tiny_run(**{"data.participants": ("p1",)})
    fed = setup(cfg, corpus)
    run_round(fed)
    c = fed.clients[0]
    assert all(np.array_equal(fed.server.theta[k], c.shared[k]) for k in fed.server.theta)


def test_isolated_mode_never_aggregates(corpus):
    transport = Transport(record=True)
    cfg = tiny_run(**{"federation.mode": "isolated", "model.insertion_mode": "none"})
    fed = setup(cfg, corpus, transport=transport)
    theta0 = {k: v.copy() for k, v in fed.server.theta.items()}
    run_round(fed)
    run_round(fed)
    assert transport.uplinks == []
    assert all(np.array_equal(fed.server.theta[k], theta0[k]) for k in theta0)
    name = "layers.0.ffn.w1"
    assert not np.array_equal(fed.clients[0].shared[name], fed.clients[1].shared[name])


def test_sampled_round_trains_only_selected(corpus5):
    cfg = tiny_run(**{"federation.sample_size": 2})
    fed = setup(cfg, corpus5)
    before = [{k: v.copy() for k, v in c.private.items()} for c in fed.clients]
    rep = run_round(fed)
    assert len(rep.sampled) == 2 and set(rep.losses) == set(rep.sampled)
    for c, b in zip(fed.clients, before):
        moved = any(not np.array_equal(c.private[k], b[k]) for k in b)
        assert moved == (c.name in rep.sampled)


def test_aggregation_frequency_runs_k_epochs(corpus):
    fed = setup(tiny_run(**{"federation.aggregation_every_k_epochs": 3}), corpus)
    rep = run_round(fed)
    assert all(len(v) == 3 for v in rep.losses.values())
    c = fed.clients[0]
    assert c.optimizer.total_steps == 3 * 2 * batches_per_epoch(len(c.pairs), c.batch_size)


def test_experiment_is_deterministic(corpus):
    a = run_experiment(tiny_run(seed=4), corpus)
    b = run_experiment(tiny_run(seed=4), corpus)
    assert a.final.to_json() == b.final.to_json()
    c = run_experiment(tiny_run(seed=5), corpus)
    assert c.final.to_json() != a.final.to_json()


def test_unknown_participant(corpus):
    with pytest.raises(ProtocolError, match="nobody"):
        setup(tiny_run(**{"data.participants": ("nobody",)}), corpus)
