"""Tensor and config file formats.

Binary container: magic, tensor count, then per tensor a length-prefixed
name, the rank, the dimensions, and the row-major float64 little-endian
payload. A whitespace text alternative (`lhet-text 1` header, then per tensor
a `tensor <name> <dims...>` line followed by the values) is accepted for
small diffable fixtures. Model configs are JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import ModelConfig

MAGIC = b"LHET\x01\n"
TEXT_MAGIC = "lhet-text 1"


def save_tensors(path, tensors: dict, fmt: str = "binary") -> None:
    if fmt == "binary":
        _save_binary(path, tensors)
    elif fmt == "text":
        _save_text(path, tensors)
    else:
        raise ValidationError(f"unknown tensor format {fmt!r}")


def load_tensors(path) -> dict:
    raw = Path(path).read_bytes()
    if raw.startswith(MAGIC):
        return _load_binary(raw, path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ValidationError(f"{path}: unrecognized tensor container")
    if text.lstrip().startswith(TEXT_MAGIC):
        return _load_text(text, path)
    raise ValidationError(f"{path}: unrecognized tensor container")


def _save_binary(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = np.ascontiguousarray(tensor, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _load_binary(raw: bytes, path) -> dict:
    off = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off)
            off += size * 8
            out[name] = arr.reshape(shape).astype(np.float64)
        return out
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: truncated or corrupt tensor container: {exc}")


def _save_text(path, tensors: dict) -> None:
    lines = [TEXT_MAGIC]
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims}".rstrip())
        lines.append(" ".join(repr(v) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_text(text: str, path) -> dict:
    tokens = text.split("\n")
    if tokens[0].strip() != TEXT_MAGIC:
        raise ValidationError(f"{path}: bad text tensor header")
    out = {}
    idx = 1
    values: list[str] = []
    pending: tuple[str, tuple[int, ...]] | None = None

    def flush():
        nonlocal values, pending
        if pending is None:
            return
        name, shape = pending
        size = int(np.prod(shape)) if shape else 1
        if len(values) != size:
            raise ValidationError(
                f"{path}: tensor {name!r} expects {size} values, got {len(values)}")
        out[name] = np.array([float(v) for v in values]).reshape(shape)
        values, pending = [], None

    for line in tokens[idx:]:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("tensor "):
            flush()
            parts = stripped.split()
            pending = (parts[1], tuple(int(d) for d in parts[2:]))
        else:
            if pending is None:
                raise ValidationError(f"{path}: values before any tensor header")
            values.extend(stripped.split())
    flush()
    return out


# -- model tensors -----------------------------------------------------------


def model_to_tensors(model) -> dict:
    out = {}
    for l, filt in enumerate(model.conv):
        out[f"conv{l}"] = filt
    for l, mat in enumerate(model.fc):
        out[f"fc{l}"] = mat
    return out


def tensors_to_model(tensors: dict, config: ModelConfig):
    from .oracle import PlainModel

    conv = []
    for l in range(len(config.conv)):
        key = f"conv{l}"
        if key not in tensors:
            raise ValidationError(f"weights file is missing tensor {key!r}")
        conv.append(tensors[key])
    fc = []
    for l in range(len(config.fc)):
        key = f"fc{l}"
        if key not in tensors:
            raise ValidationError(f"weights file is missing tensor {key!r}")
        fc.append(tensors[key])
    return PlainModel(conv=conv, fc=fc)


# -- configs -----------------------------------------------------------------


def load_config(path) -> ModelConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid config JSON: {exc.msg}")
    return ModelConfig.from_dict(raw)


def save_config(path, config: ModelConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n",
                          encoding="utf-8")
