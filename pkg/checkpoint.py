#!/usr/bin/env python3
"""
GPDNN Checkpoints
Binary named-tensor format plus a JSON model spec sidecar.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
from pydantic import ValidationError

from nn_layers import Model, ModelSpec, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"GPDN"
VERSION = 1
SPEC_SUFFIX = ".json"

PathLike = Union[str, Path]


class CheckpointError(Exception):
    """Unreadable checkpoint or one that does not fit its model spec"""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        offset = 12
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if offset + 8 * n > len(blob):
                raise CheckpointError(f"{source}: truncated payload for '{name}'")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * n
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated header ({e})") from None
    if offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - offset} trailing bytes")
    return out


def save_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_tensors(path.read_bytes(), str(path))


def spec_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SPEC_SUFFIX)


def save_model(path: PathLike, model: Model) -> Path:
    """Write `path` and its `<path>.json` spec sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, model.params)
    spec_path(path).write_text(model.spec.model_dump_json(indent=2) + "\n")
    logger.info(f"Saved checkpoint {path} ({len(model.params)} tensors)")
    return path


def load_model(path: PathLike) -> Model:
    path = Path(path)
    sidecar = spec_path(path)
    if not sidecar.is_file():
        raise CheckpointError(f"model spec not found next to checkpoint: {sidecar}")
    try:
        spec = ModelSpec.model_validate_json(sidecar.read_text())
    except ValidationError as e:
        raise CheckpointError(f"{sidecar}: invalid model spec ({e})") from None
    tensors = load_tensors(path)

    expected = parameter_shapes(spec)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names do not match spec '{spec.name}' "
                              f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: '{name}' has shape {tensors[name].shape}, spec wants {shape}")
    logger.info(f"Loaded checkpoint {path} for model '{spec.name}'")
    return Model(spec, tensors)
