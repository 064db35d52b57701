"""Byte-level image codecs. PPM (P6) is always available; PNG needs ENABLE_PNG and Pillow."""
import os
from pathlib import Path
from typing import Union

import numpy as np
import structlog
import torch

from src.config import settings
from src.domain.errors import ImageFormatError

logger = structlog.get_logger()

PathLike = Union[str, os.PathLike]

PPM_SUFFIXES = {".ppm"}
PNG_SUFFIXES = {".png"}


def supported_suffixes() -> set[str]:
    return PPM_SUFFIXES | (PNG_SUFFIXES if settings.ENABLE_PNG else set())


def quantize(pixels: torch.Tensor) -> np.ndarray:
    """round(v*255) with halves rounded up, clamped to [0, 255]."""
    scaled = torch.floor(pixels.detach().to(torch.float64) * 255.0 + 0.5)
    return scaled.clamp(0, 255).to(torch.uint8).cpu().numpy()


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping '#' comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("truncated PPM header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes) -> torch.Tensor:
    tokens, offset = _read_header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError("malformed PPM header") from e
    if width < 1 or height < 1:
        raise ImageFormatError(f"image has a zero dimension ({width}x{height})")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported PPM maxval {maxval}")

    expected = width * height * 3
    raster = data[offset:offset + expected]
    if len(raster) != expected:
        raise ImageFormatError(f"PPM raster truncated: {len(raster)} of {expected} bytes")

    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return torch.from_numpy(arr.astype(np.float32) / float(maxval))


def encode_ppm(pixels: torch.Tensor) -> bytes:
    height, width, _ = pixels.shape
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + quantize(pixels).tobytes()


def read_pixels(path: PathLike) -> torch.Tensor:
    """Read an image file into an [H, W, 3] float32 tensor scaled to [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"cannot read {path}: {e}") from e

    if suffix in PPM_SUFFIXES:
        return decode_ppm(data)
    if suffix in PNG_SUFFIXES:
        return _read_png(path)
    raise ImageFormatError(f"unsupported image format '{suffix}'")


def write_pixels(pixels: torch.Tensor, path: PathLike) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in PPM_SUFFIXES:
        payload = encode_ppm(pixels)
        path.write_bytes(payload)
    elif suffix in PNG_SUFFIXES:
        _write_png(pixels, path)
    else:
        raise ImageFormatError(f"unsupported image format '{suffix}'")
    logger.debug("image_written", path=str(path), height=pixels.shape[0], width=pixels.shape[1])


def _require_png():
    if not settings.ENABLE_PNG:
        raise ImageFormatError("PNG support is disabled (set ENABLE_PNG=true)")
    try:
        from PIL import Image as PILImage
    except ImportError as e:
        raise ImageFormatError("PNG support requires Pillow") from e
    return PILImage


def _read_png(path: Path) -> torch.Tensor:
    PILImage = _require_png()
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise ImageFormatError(f"cannot decode {path}: {e}") from e
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageFormatError(f"image has a zero dimension ({arr.shape[1]}x{arr.shape[0]})")
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def _write_png(pixels: torch.Tensor, path: Path) -> None:
    PILImage = _require_png()
    PILImage.fromarray(quantize(pixels), mode="RGB").save(path)
