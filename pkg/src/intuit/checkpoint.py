"""Binary checkpoint container shared by the policy and the calibrator.

Layout (little-endian)::

    b"INTUIT1\\0"  u32 version  u32 meta_len  meta (canonical JSON)
    u32 n_arrays
    repeated: u16 name_len  name  u8 ndim  u32 dims[ndim]  float32 data

Parameters live on the float32 grid, so save/load is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .calibrator import CalibratorModel
from .reasoner import ModelConfig, PolicyModel

MAGIC = b"INTUIT1\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode(state: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, 0)]
    body = _canonical(meta)
    parts[1] = struct.pack("<II", VERSION, len(body))
    parts.append(body)
    parts.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name])
        a32 = arr.astype("<f4")
        if not np.array_equal(a32.astype(np.float64), arr):
            raise CheckpointError(f"{name} is not representable in float32")
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(a32.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an INTUIT1 checkpoint")
    version, meta_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(blob[pos : pos + meta_len])
    pos += meta_len
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(n):
        name_len, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        state[name] = data.reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return state, meta


def save_policy(model: PolicyModel, path, extra: dict | None = None) -> None:
    meta = {"kind": "policy", "model": vars(model.config), **(extra or {})}
    Path(path).write_bytes(encode(model.state_dict(), meta))


def save_calibrator(model: CalibratorModel, path, extra: dict | None = None) -> None:
    meta = {
        "kind": "calibrator",
        "model": vars(model.config),
        "head_shape": list(model.head_shape),
        **(extra or {}),
    }
    Path(path).write_bytes(encode(model.state_dict(), meta))


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return decode(blob)


def load_policy(path) -> tuple[PolicyModel, dict]:
    state, meta = read(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a policy")
    model = PolicyModel(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    return model, meta


def load_calibrator(path) -> tuple[CalibratorModel, dict]:
    state, meta = read(path)
    if meta.get("kind") != "calibrator":
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a calibrator")
    d_model, num_classes = meta["head_shape"]
    model = CalibratorModel(ModelConfig(**meta["model"]), num_classes)
    model.load_state_dict(state)
    return model, meta
