"""Binary checkpoints: parameter values and optimizer velocity.

Layout (little-endian): magic ``NTCK``, format version u32, header length u32
plus UTF-8 header text (the model configuration as ``key = value`` lines, with
optional training-state keys), entry count u32, then per entry: name length
u32 + UTF-8 name, rank u32, dims as u32s, and row-major float32 data for the
value followed by the velocity. Gradients are never serialized.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Transducer
from .tensor import InvariantError, ParamStore

MAGIC = b"NTCK"
FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    """The file's format version does not match this implementation."""


def save_checkpoint(path, store: ParamStore, header_text: str) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        header = header_text.encode("utf-8")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        names = store.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            p = store[name]
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(p.velocity, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (header text, values, velocities)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise InvariantError(f"{path} is not a checkpoint file")
    off = 4

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", blob, off)
        off += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )
    header_len = u32()
    header = blob[off : off + header_len].decode("utf-8")
    off += header_len
    values: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name_len = u32()
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        for target in (values, velocities):
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            target[name] = arr
    return header, values, velocities


def load_model(path, precision: str | None = None) -> tuple[Transducer, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns (model, header key-values)."""
    header, values, velocities = load_checkpoint(path)
    config = ModelConfig.from_text(header)
    if precision is not None and precision != config.precision:
        config = ModelConfig.from_text(
            header.replace(f"precision = {config.precision}", f"precision = {precision}")
        )
    model = Transducer(config, seed=0)
    model.store.set_values(values, velocities)
    extras = {}
    for line in header.splitlines():
        if "=" in line:
            key, _, val = line.partition("=")
            extras[key.strip()] = val.strip()
    return model, extras


def save_model(path, model: Transducer, extras: dict[str, str] | None = None) -> None:
    header = model.config.to_text()
    if extras:
        header += "".join(f"{k} = {v}\n" for k, v in sorted(extras.items()))
    save_checkpoint(path, model.store, header)
