"""Binary tensor files and checkpoint directories round-trip bit-exactly."""

import json
import struct

import numpy as np
import pytest

from umfdet import checkpoint as ck
from umfdet.errors import DataError
from umfdet.instruct import Vocabulary
from umfdet.model import ModelConfig, init_model
from umfdet.ndtensor import Tensor


def _arrays():
    rng = np.random.default_rng(5)
    return {
        "a": rng.normal(size=(3, 4)),
        "b.W": rng.normal(size=(7,)),
        "scalarish": np.asarray(3.5),
        "tiny": np.asarray([1e-300, -1e300, 0.0, np.pi]),
    }


# ---------------------------------------------------------------------------
# tensor files


def test_tensor_file_round_trip_bit_exact(tmp_path):
    path = tmp_path / "t.umfd"
    arrays = _arrays()
    ck.write_tensor_file(path, arrays)
    back = ck.read_tensor_file(path)
    assert list(back) == list(arrays)  # insertion order preserved
    for name, arr in arrays.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.astype("<f8").tobytes()


def test_tensor_file_accepts_tensors_and_rewrites_identically(tmp_path):
    named = {"w": Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)}
    a, b = tmp_path / "a.umfd", tmp_path / "b.umfd"
    ck.write_tensor_file(a, named)
    ck.write_tensor_file(b, {"w": named["w"].values})
    assert a.read_bytes() == b.read_bytes()


def test_tensor_file_header_layout(tmp_path):
    path = tmp_path / "t.umfd"
    ck.write_tensor_file(path, {"x": np.zeros(2)})
    blob = path.read_bytes()
    assert blob[:5] == b"UMFD1"
    (mlen,) = struct.unpack("<Q", blob[5:13])
    manifest = json.loads(blob[13:13 + mlen])
    assert manifest["dtype"] == "<f8"
    assert manifest["tensors"] == [{"name": "x", "shape": [2], "offset": 0}]
    assert len(blob) == 13 + mlen + 16


def test_tensor_file_bad_magic(tmp_path):
    path = tmp_path / "t.umfd"
    path.write_bytes(b"NOPE1" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        ck.read_tensor_file(path)


def test_tensor_file_truncated_header(tmp_path):
    path = tmp_path / "t.umfd"
    path.write_bytes(b"UMFD1\x08")
    with pytest.raises(DataError, match="truncated"):
        ck.read_tensor_file(path)


def test_tensor_file_corrupt_manifest(tmp_path):
    path = tmp_path / "t.umfd"
    manifest = b"{broken"
    path.write_bytes(b"UMFD1" + struct.pack("<Q", len(manifest)) + manifest)
    with pytest.raises(DataError, match="manifest"):
        ck.read_tensor_file(path)


def test_tensor_file_payload_overrun(tmp_path):
    path = tmp_path / "t.umfd"
    ck.write_tensor_file(path, {"x": np.zeros(4)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])  # drop one float64
    with pytest.raises(DataError, match="overruns"):
        ck.read_tensor_file(path)


def test_tensor_file_trailing_bytes(tmp_path):
    path = tmp_path / "t.umfd"
    ck.write_tensor_file(path, {"x": np.zeros(4)})
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(DataError, match="trailing"):
        ck.read_tensor_file(path)


# ---------------------------------------------------------------------------
# model checkpoints


@pytest.fixture()
def small(toy_vocab):
    cfg = ModelConfig(h=16, h_v=64, n_heads=2, n_enc=1, n_moe=1, n_dec=1,
                      vocab_size=len(toy_vocab), max_len=64, max_vis_tokens=8)
    return cfg, init_model(cfg, np.random.default_rng(1)), toy_vocab


def test_save_load_model_bit_exact(tmp_path, small):
    cfg, params, vocab = small
    ck.save_model(tmp_path / "ckpt", params, vocab)
    loaded, loaded_vocab = ck.load_model(tmp_path / "ckpt")
    assert loaded.config == cfg
    assert len(loaded_vocab) == len(vocab)
    assert set(loaded.tensors) == set(params.tensors)
    for name, t in params.tensors.items():
        assert np.array_equal(loaded.tensors[name].values, t.values), name
    # mixture layers are views over the loaded tensors, not stale inits
    assert loaded.tensors["cmoe.0.router.W"] is loaded.cmoe_layers[0].router.W
    assert np.array_equal(loaded.cmoe_layers[0].router.W.values,
                          params.cmoe_layers[0].router.W.values)


def test_save_model_twice_is_byte_identical(tmp_path, small):
    _, params, vocab = small
    ck.save_model(tmp_path / "a", params, vocab)
    ck.save_model(tmp_path / "b", params, vocab)
    for name in (ck.WEIGHTS_FILE, ck.CONFIG_FILE, ck.VOCAB_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_model_missing_files(tmp_path, small):
    _, params, vocab = small
    ck.save_model(tmp_path / "ckpt", params, vocab)
    (tmp_path / "ckpt" / ck.CONFIG_FILE).unlink()
    with pytest.raises(DataError, match=ck.CONFIG_FILE):
        ck.load_model(tmp_path / "ckpt")


def test_load_model_name_mismatch(tmp_path, small):
    _, params, vocab = small
    ck.save_model(tmp_path / "ckpt", params, vocab)
    weights = ck.read_tensor_file(tmp_path / "ckpt" / ck.WEIGHTS_FILE)
    weights["bogus.W"] = weights.pop("head.W")
    ck.write_tensor_file(tmp_path / "ckpt" / ck.WEIGHTS_FILE, weights)
    with pytest.raises(DataError, match="disagree"):
        ck.load_model(tmp_path / "ckpt")


def test_load_model_shape_mismatch(tmp_path, small):
    _, params, vocab = small
    ck.save_model(tmp_path / "ckpt", params, vocab)
    weights = ck.read_tensor_file(tmp_path / "ckpt" / ck.WEIGHTS_FILE)
    weights["head.b"] = np.zeros(3)
    ck.write_tensor_file(tmp_path / "ckpt" / ck.WEIGHTS_FILE, weights)
    with pytest.raises(DataError, match="head.b"):
        ck.load_model(tmp_path / "ckpt")


# ---------------------------------------------------------------------------
# trainer state


def test_train_state_round_trip(tmp_path):
    moments = {"adam.m.w": np.full(3, 0.25), "adam.v.w": np.full(3, 0.5)}
    meta = {"step": 17, "rng_state": {"bit_generator": "PCG64", "state": {"state": 1}},
            "sampler": {"perm": [2, 0, 1], "cursor": 1}}
    ck.save_train_state(tmp_path / "ckpt", moments, meta)
    arrays, back = ck.load_train_state(tmp_path / "ckpt")
    assert back == meta
    assert np.array_equal(arrays["adam.m.w"], moments["adam.m.w"])


def test_train_state_absent_returns_none(tmp_path, small):
    _, params, vocab = small
    ck.save_model(tmp_path / "ckpt", params, vocab)
    assert ck.load_train_state(tmp_path / "ckpt") is None


def test_train_state_orphan_moments(tmp_path):
    ck.save_train_state(tmp_path / "ckpt", {"m": np.zeros(1)}, {"step": 1})
    (tmp_path / "ckpt" / ck.TRAIN_STATE_FILE).unlink()
    with pytest.raises(DataError, match=ck.TRAIN_STATE_FILE):
        ck.load_train_state(tmp_path / "ckpt")
