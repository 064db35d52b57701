"""
VTKF checkpoint container.

Layout (little-endian):
    b"VTKF" | u32 version | u64 config length | config JSON (UTF-8, canonical)
    then until EOF, one record per tensor:
    u32 name length | name (UTF-8) | u32 rank | u64 dim * rank | float32 payload
"""
import json
import os
import struct
from pathlib import Path
from typing import Any, Union

import numpy as np
import structlog
import torch

from src.domain.errors import CheckpointError
from src.utils import canonicalize_params

logger = structlog.get_logger()

MAGIC = b"VTKF"
FORMAT_VERSION = 1


def encode_checkpoint(config: dict[str, Any], tensors: dict[str, torch.Tensor]) -> bytes:
    canonical_json, _ = canonicalize_params(config)
    blob = canonical_json.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        array = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a VTKF checkpoint (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("checkpoint truncated")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported VTKF version {version}")
    (config_len,) = take("<Q")
    if pos + config_len > len(view):
        raise CheckpointError("config block truncated")
    try:
        config = json.loads(bytes(view[pos:pos + config_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config block is not valid JSON: {e}") from e
    pos += config_len

    tensors: dict[str, torch.Tensor] = {}
    while pos < len(view):
        (name_len,) = take("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(view):
            raise CheckpointError(f"payload of '{name}' truncated")
        array = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(dims)
        pos += nbytes
        tensors[name] = torch.from_numpy(array.astype(np.float32))
    return config, tensors


def save_checkpoint(path: Union[str, Path], config: dict[str, Any],
                    tensors: dict[str, torch.Tensor]) -> Path:
    """Write atomically: the previous file at `path` survives a failed write."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    os.replace(tmp, path)
    logger.info("checkpoint_saved", path=str(path), tensors=len(tensors))
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    config, tensors = decode_checkpoint(data)
    logger.debug("checkpoint_loaded", path=str(path), tensors=len(tensors))
    return config, tensors
