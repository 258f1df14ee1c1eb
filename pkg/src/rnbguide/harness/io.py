from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def fmt(x: float) -> str:
    """Shortest round-tripping decimal for a float."""
    return repr(float(x))


def pgm_bytes(field: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255), values min-max scaled; constant fields map to 0."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"PGM needs a 2D field, got shape {f.shape}")
    lo, hi = float(f.min()), float(f.max())
    if hi - lo <= 0:
        pixels = np.zeros(f.shape, dtype=np.uint8)
    else:
        pixels = np.rint((f - lo) / (hi - lo) * 255.0).astype(np.uint8)
    header = f"P5\n{f.shape[1]} {f.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes(order="C")


def dump_pgm(field: np.ndarray, path) -> None:
    atomic_write_bytes(path, pgm_bytes(field))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != 255:
        raise ValueError(f"unsupported PGM: {magic} maxval {maxval}")
    return np.frombuffer(data[pos:pos + width * height], dtype=np.uint8).reshape(height, width)
