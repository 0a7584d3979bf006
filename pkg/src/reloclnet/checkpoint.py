"""RLCK checkpoint container: JSON config plus named float32 tensors."""

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"RLCK"
VERSION = 1


def dumps(config, named_arrays):
    """Serialise ``config`` (JSON-able dict) and ``(name, array)`` records."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    named_arrays = list(named_arrays)
    buf.write(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data, source="<bytes>"):
    """Inverse of :func:`dumps`; returns ``(config, {name: float32 array})``."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{source}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise DataError(f"{source}: not an RLCK checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    (n_blob,) = struct.unpack("<I", take(4))
    try:
        config = json.loads(take(n_blob).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt config block ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise DataError(f"{source}: trailing bytes in checkpoint")
    return config, arrays


def fingerprint(data):
    """32-byte SHA-256 digest identifying a serialised checkpoint."""
    return hashlib.sha256(data).digest()


def model_bytes(model, extra=None):
    config = {"model": model.config.to_dict()}
    if extra:
        config.update(extra)
    return dumps(config, model.named_parameters_as_arrays())


def save_model(model, path, extra=None):
    data = model_bytes(model, extra)
    Path(path).write_bytes(data)
    return fingerprint(data)


def load_model(path):
    """Return ``(model, config_dict, fingerprint)`` from an RLCK file."""
    from .encoders import ModelConfig
    from .model import ReLoCLNetModel

    data = Path(path).read_bytes()
    config, arrays = loads(data, str(path))
    model = ReLoCLNetModel(ModelConfig.from_dict(config["model"]))
    model.load_state_dict(arrays)
    model.eval()
    return model, config, fingerprint(data)
