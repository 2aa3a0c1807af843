import numpy as np
import pytest

from ivae import checkpoint
from ivae.models import build_model
from helpers import model_grads, tiny_trimodal


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"b": rng.standard_normal(3), "a": rng.standard_normal((2, 4)), "s": np.array(2.5)}
    checkpoint.save(tmp_path / "m.ivae", arrays, {"seed": 3, "schema_hash": "abc"})
    back, meta = checkpoint.load(tmp_path / "m.ivae")
    assert meta == {"seed": 3, "schema_hash": "abc"}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].shape == v.shape


def test_file_layout(tmp_path):
    checkpoint.save(tmp_path / "m.ivae", {"w": np.ones(2)})
    raw = (tmp_path / "m.ivae").read_bytes()
    assert raw[:5] == b"IVAE1"
    assert raw[-16:] == np.ones(2, "<f8").tobytes()


def test_bytes_are_deterministic(tmp_path):
    arrays = {"x": np.arange(6.0).reshape(2, 3), "y": np.zeros(1)}
    checkpoint.save(tmp_path / "a", arrays, {"k": 1})
    checkpoint.save(tmp_path / "b", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic_and_mismatch(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(checkpoint.CheckpointError, match="not an IVAE1"):
        checkpoint.load(tmp_path / "x")
    with pytest.raises(checkpoint.CheckpointError, match="schema_hash"):
        checkpoint.check_compatible({"schema_hash": "a"}, schema_hash="b")
    checkpoint.check_compatible({"schema_hash": "a"}, schema_hash="a")


def test_model_state_restores_identical_loss(tmp_path):
    batch, schema = tiny_trimodal()
    m = build_model("mmvae", schema, hidden=8, seed=1)
    checkpoint.save(tmp_path / "m.ivae", m.state_dict())
    other = build_model("mmvae", schema, hidden=8, seed=99)
    other.load_state_dict(checkpoint.load(tmp_path / "m.ivae")[0])
    assert model_grads(m, batch)[0] == model_grads(other, batch)[0]
