"""Flat binary model checkpoints with a bit-exact round trip.

Layout (all integers little-endian uint32):

    magic "DYNLATCK" | version | config_len | config JSON (utf-8)
    | n_tensors | repeated: name_len | name utf-8 | rank | dims...
    | raw little-endian float32 data

Tensors are written in sorted name order, so saving the same model twice
produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from dynlat.errors import ConfigError
from dynlat.model import EncoderConfig, Model, PredictionNetConfig
from dynlat.numerics import Parameter

MAGIC = b"DYNLATCK"
VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_model(path, model: Model) -> None:
    path = Path(path)
    config = {
        "encoder": model.encoder.to_dict(),
        "predictor": model.predictor.to_dict(),
    }
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(model.params)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_u32(VERSION))
        fh.write(_u32(len(config_bytes)))
        fh.write(config_bytes)
        fh.write(_u32(len(names)))
        for name in names:
            value = model.params[name].value
            encoded = name.encode("utf-8")
            fh.write(_u32(len(encoded)))
            fh.write(encoded)
            fh.write(_u32(value.ndim))
            for dim in value.shape:
                fh.write(_u32(dim))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ConfigError("checkpoint truncated")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def load_model(path) -> Model:
    path = Path(path)
    with path.open("rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint")
        version = _read_u32(fh)
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8"))
        encoder = EncoderConfig.from_dict(config["encoder"])
        predictor = PredictionNetConfig.from_dict(config["predictor"])
        params = {}
        for _ in range(_read_u32(fh)):
            name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
            rank = _read_u32(fh)
            dims = tuple(_read_u32(fh) for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, 4 * count)
            value = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
            params[name] = Parameter(value)
        if fh.read(1):
            raise ConfigError(f"{path}: trailing bytes after tensor data")
    return Model(encoder=encoder, predictor=predictor, params=params)
