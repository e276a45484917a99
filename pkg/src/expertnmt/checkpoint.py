"""Versioned binary checkpoints.

Layout::

    ckpt v1
    config <n>          then n lines "key=value"
    meta <n>            then n lines "key=value"
    tensors <n>         then per tensor: "name<TAB>d0,d1,...\\n" + raw float64 LE bytes

Model tensors are validated against the shapes implied by the config.
Extra tensors (optimizer moments) use a ``/``-qualified name.
"""

from __future__ import annotations

import io
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"ckpt v1\n"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _kv_block(title: str, items: dict) -> bytes:
    lines = [f"{title} {len(items)}"] + [f"{k}={v}" for k, v in items.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_checkpoint(path, params: ModelParams, meta: dict | None = None, extra: dict | None = None):
    cfg = {f.name: getattr(params.config, f.name) for f in fields(ModelConfig)}
    tensors = dict(params.tensors)
    tensors.update(extra or {})
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_kv_block("config", cfg))
    buf.write(_kv_block("meta", meta or {}))
    buf.write(f"tensors {len(tensors)}\n".encode())
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        buf.write(f"{name}\t{','.join(map(str, arr.shape))}\n".encode("utf-8"))
        buf.write(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def _read_block(fh, title):
    head = fh.readline().decode("utf-8").split()
    if len(head) != 2 or head[0] != title:
        raise CheckpointError(f"expected '{title} <n>' block")
    out = {}
    for _ in range(int(head[1])):
        key, _, value = fh.readline().decode("utf-8").rstrip("\n").partition("=")
        out[key] = value
    return out


def _parse_value(kind, text):
    if kind is bool:
        if text not in ("True", "False"):
            raise CheckpointError(f"bad boolean {text!r}")
        return text == "True"
    return kind(text)


def load_checkpoint(path) -> tuple[ModelParams, dict, dict]:
    """Return (params, meta, extra tensors)."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a ckpt v1 file")
        raw_cfg = _read_block(fh, "config")
        meta = _read_block(fh, "meta")
        kinds = {f.name: f.type for f in fields(ModelConfig)}
        kw = {}
        for name, text in raw_cfg.items():
            if name not in kinds:
                raise CheckpointError(f"{path}: unknown config key {name!r}")
            kind = {"int": int, "float": float, "bool": bool}[str(kinds[name])]
            kw[name] = _parse_value(kind, text)
        config = ModelConfig(**kw)
        head = fh.readline().decode().split()
        if len(head) != 2 or head[0] != "tensors":
            raise CheckpointError(f"{path}: missing tensors block")
        tensors = {}
        for _ in range(int(head[1])):
            name, _, dims = fh.readline().decode("utf-8").rstrip("\n").partition("\t")
            shape = tuple(int(x) for x in dims.split(",")) if dims else ()
            count = int(np.prod(shape, dtype=np.int64))
            data = fh.read(count * _DTYPE.itemsize)
            if len(data) != count * _DTYPE.itemsize:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype=_DTYPE).reshape(shape).astype(np.float64)
    shapes = param_shapes(config)
    model = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, config implies {shape}")
        model[name] = tensors.pop(name)
    return ModelParams(config, model), meta, tensors
