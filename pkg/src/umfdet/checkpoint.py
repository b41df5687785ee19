"""Checkpoint persistence.

Tensor files are a small self-describing binary format: a 5-byte magic,
a little-endian u64 manifest length, a JSON manifest listing (name, shape,
offset) per tensor, then raw little-endian float64 payloads at those
offsets. Values round-trip bit-exactly, which the resume contract relies
on. A checkpoint directory holds the weights file plus the vocabulary and
the model config, and optionally the optimizer state for resuming.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .instruct import Vocabulary
from .model import ModelConfig, ModelParams, init_model

MAGIC = b"UMFD1"
WEIGHTS_FILE = "weights.umfd"
OPTIMIZER_FILE = "optimizer.umfd"
CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.tsv"
TRAIN_STATE_FILE = "train_state.json"


def write_tensor_file(path, named) -> None:
    """Serialize name -> array (or Tensor) preserving insertion order."""
    arrays = {}
    for name, t in named.items():
        src = np.asarray(getattr(t, "values", t), dtype="<f8")
        # ascontiguousarray promotes 0-d to 1-d; restore the true shape
        arrays[name] = np.ascontiguousarray(src).reshape(src.shape)
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = json.dumps({"dtype": "<f8", "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(arr.tobytes())


def read_tensor_file(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a tensor file (bad magic {blob[:5]!r})")
    if len(blob) < len(MAGIC) + 8:
        raise DataError(f"{path}: truncated header")
    (manifest_len,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(blob[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest: {exc}")
    payload = blob[start + manifest_len:]
    out = {}
    expected = 0
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: tensor {name} overruns payload")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
        expected = max(expected, offset + nbytes)
    if expected != len(payload):
        raise DataError(f"{path}: payload has {len(payload) - expected} trailing bytes")
    return out


def save_model(ckpt_dir, params: ModelParams, vocab: Vocabulary) -> None:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor_file(d / WEIGHTS_FILE, params.tensors)
    vocab.save(d / VOCAB_FILE)
    with open(d / CONFIG_FILE, "w", encoding="utf-8") as fh:
        json.dump(params.config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(ckpt_dir):
    """Rebuild (params, vocab) from a checkpoint directory; weight names and
    shapes must match the config's architecture exactly."""
    d = Path(ckpt_dir)
    for required in (WEIGHTS_FILE, CONFIG_FILE, VOCAB_FILE):
        if not (d / required).exists():
            raise DataError(f"checkpoint {d} is missing {required}")
    with open(d / CONFIG_FILE, "r", encoding="utf-8") as fh:
        config = ModelConfig.from_json(json.load(fh))
    vocab = Vocabulary.load(d / VOCAB_FILE)
    params = init_model(config, np.random.default_rng(0))
    loaded = read_tensor_file(d / WEIGHTS_FILE)
    missing = sorted(set(params.tensors) - set(loaded))
    extra = sorted(set(loaded) - set(params.tensors))
    if missing or extra:
        raise DataError(f"checkpoint {d} weight names disagree with config: "
                        f"missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in loaded.items():
        t = params.tensors[name]
        if t.values.shape != arr.shape:
            raise DataError(f"checkpoint {d}: tensor {name} has shape {arr.shape}, "
                            f"expected {t.values.shape}")
        t.values = arr
    return params, vocab


def save_train_state(ckpt_dir, moment_arrays: dict, meta: dict) -> None:
    """Persist optimizer moments plus JSON-serializable trainer metadata
    (step counter, rng state and friends)."""
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor_file(d / OPTIMIZER_FILE, moment_arrays)
    with open(d / TRAIN_STATE_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_train_state(ckpt_dir):
    """Return (moment_arrays, meta) or None when the directory holds no
    trainer state (weights-only checkpoint)."""
    d = Path(ckpt_dir)
    if not (d / OPTIMIZER_FILE).exists():
        return None
    if not (d / TRAIN_STATE_FILE).exists():
        raise DataError(f"checkpoint {d} has optimizer moments but no {TRAIN_STATE_FILE}")
    arrays = read_tensor_file(d / OPTIMIZER_FILE)
    with open(d / TRAIN_STATE_FILE, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return arrays, meta
