import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from helpers import random_params, toy_config
from fedmatch import checkpoint
from fedmatch.checkpoint import CheckpointError


def test_write_read_write_is_byte_identical(tmp_path):
    params = random_params(toy_config("horizontal", "pal"), 0)
    a = checkpoint.save(tmp_path / "a.fmck", params, private={"patches.layers.0.up"}, config={"d": 8}, meta={"x": 1})
    ck = checkpoint.load(a)
    b = checkpoint.save(tmp_path / "b.fmck", ck.params, ck.private, ck.config, ck.meta)
    assert a.read_bytes() == b.read_bytes()
    assert ck.private == {"patches.layers.0.up"}
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].shape == np.shape(params[k])
        assert ck.params[k].tobytes() == np.asarray(params[k]).tobytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.dictionaries(st.text("abcxyz.", min_size=1, max_size=6), hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=3), elements=finite), max_size=4))
def test_round_trip_property(params):
    blob = checkpoint.dumps(params)
    ck = checkpoint.loads(blob)
    assert checkpoint.dumps(ck.params) == blob
    for k, v in params.items():
        assert ck.params[k].shape == v.shape
        np.testing.assert_array_equal(ck.params[k], v)


def test_rejects_bad_inputs(tmp_path):
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"nope" * 8)
    blob = checkpoint.dumps({"a": np.zeros(3)})
    with pytest.raises(CheckpointError, match="payload"):
        checkpoint.loads(blob[:-8])
    with pytest.raises(CheckpointError, match="non-finite"):
        checkpoint.dumps({"a": np.array([np.inf])})
    with pytest.raises(OSError, match="missing.fmck"):
        checkpoint.load(tmp_path / "missing.fmck")


def test_check_schema_names_first_divergence():
    params = {"a": np.zeros(2), "b": np.zeros((2, 3))}
    checkpoint.check_schema(params, [("a", (2,)), ("b", (2, 3))])
    with pytest.raises(CheckpointError, match="'b'"):
        checkpoint.check_schema(params, [("a", (2,)), ("b", (3, 2))])
    with pytest.raises(CheckpointError, match="missing parameter 'c'"):
        checkpoint.check_schema(params, [("a", (2,)), ("b", (2, 3)), ("c", ())])
    with pytest.raises(CheckpointError, match="unexpected parameter 'b'"):
        checkpoint.check_schema(params, [("a", (2,))])
