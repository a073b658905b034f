"""Binary checkpoint container for models.

Layout (all integers little-endian u32, all tensor data little-endian
float32, row-major):

    u32  format version (currently 1)
    u32 x 7  config fields, fixed order:
             vocab_size, d_model, n_layers, n_attn_heads,
             max_positions, n_pred_heads, leap_stride
    u32  tensor count
    per tensor:
        u32 name length, then that many bytes of UTF-8 name
        u32 rank, then rank x u32 dims
        dims-product x f32 data

Loading rebuilds the config, then validates that the stored tensor names and
shapes match exactly what that config requires.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerLM, param_shapes

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

FORMAT_VERSION = 1

_CONFIG_FIELDS = (
    "vocab_size",
    "d_model",
    "n_layers",
    "n_attn_heads",
    "max_positions",
    "n_pred_heads",
    "leap_stride",
)


def save_checkpoint(model: TransformerLM, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for field in _CONFIG_FIELDS:
            fh.write(struct.pack("<I", getattr(model.config, field)))
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError("truncated checkpoint file")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def load_checkpoint(path) -> TransformerLM:
    with open(path, "rb") as fh:
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        fields = {name: _read_u32(fh) for name in _CONFIG_FIELDS}
        config = ModelConfig(**fields)
        expected = param_shapes(config)
        count = _read_u32(fh)
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u32(fh)
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = _read_u32(fh)
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
            if name not in expected:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            if tuple(dims) != expected[name]:
                raise ValueError(
                    f"tensor {name!r} has shape {tuple(dims)}, config requires {expected[name]}"
                )
            params[name] = data.reshape(dims).astype(np.float32)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
        if fh.read(1):
            raise ValueError("trailing bytes after last tensor")
    return TransformerLM(config, params)
