"""Binary model container.

Layout::

    b"SBM1"
    uint32 LE   header length in bytes
    header      UTF-8 JSON: {"meta": ..., "spec": <canonical spec text>}
    float64 LE  trainable tensors in declaration order, then BN running
                mean/var per BN layer in declaration order

Tensor shapes are implied by the spec, so the body is raw values only.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .arch import NetworkSpec, TrainedModel, buffer_shapes, param_shapes

MAGIC = b"SBM1"


class ModelFormatError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def to_bytes(model: TrainedModel) -> bytes:
    header = json.dumps({"meta": _jsonable(model.meta), "spec": model.spec.to_text()},
                        sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name, key, _ in param_shapes(model.spec):
        parts.append(np.ascontiguousarray(model.params[name][key], dtype="<f8").tobytes())
    for name, key, _ in buffer_shapes(model.spec):
        parts.append(np.ascontiguousarray(model.stats[name][key], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> TrainedModel:
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise ModelFormatError("truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode())
        spec = NetworkSpec.from_text(header["spec"])
    except (ValueError, KeyError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None
    pos = 8 + hlen
    params, stats = {}, {}
    for target, shapes in ((params, param_shapes(spec)), (stats, buffer_shapes(spec))):
        for name, key, shape in shapes:
            count = int(np.prod(shape))
            chunk = blob[pos:pos + 8 * count]
            if len(chunk) != 8 * count:
                raise ModelFormatError(f"truncated tensor {name}.{key}")
            target.setdefault(name, {})[key] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * count
    if pos != len(blob):
        raise ModelFormatError(f"{len(blob) - pos} trailing bytes")
    return TrainedModel(spec, params, stats, header["meta"])


def save_model(model: TrainedModel, path):
    Path(path).write_bytes(to_bytes(model))


def load_model(path) -> TrainedModel:
    return from_bytes(Path(path).read_bytes())
