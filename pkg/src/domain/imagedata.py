"""
Image value type, file ingestion and the deterministic synthetic dataset.

Pixels live in [0, 1] everywhere inside the pipeline; quantization to bytes
happens only in src.infrastructure.imageio.
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.domain.errors import ImageFormatError
from src.infrastructure import imageio
from src.utils import make_generator

logger = structlog.get_logger()


@dataclass(frozen=True)
class Image:
    """An RGB image stored channel-last as an [H, W, 3] float tensor in [0, 1]."""
    pixels: torch.Tensor

    def __post_init__(self):
        p = self.pixels
        if p.dim() != 3 or p.shape[-1] != 3:
            raise ImageFormatError(f"expected [H, W, 3] pixels, got {tuple(p.shape)}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageFormatError(f"image has a zero dimension {tuple(p.shape)}")
        if not bool(torch.isfinite(p).all()) or float(p.min()) < 0.0 or float(p.max()) > 1.0:
            raise ImageFormatError("pixel values must lie in [0, 1]")

    @classmethod
    def from_tensor(cls, pixels: torch.Tensor, clamp: bool = False) -> "Image":
        """Wrap raw values; with clamp=True out-of-range values are clamped instead of rejected."""
        pixels = pixels.detach()
        if clamp:
            pixels = pixels.clamp(0.0, 1.0)
        return cls(pixels.to(torch.float32).contiguous())

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return 3


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(default=8, ge=1)
    seed: int = 0
    size_range: tuple[int, int] = (64, 64)
    aspect_range: tuple[float, float] = (1.0, 1.0)
    class_count: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "DatasetSpec":
        lo, hi = self.size_range
        if lo < 32 or hi < lo:
            raise ValueError(f"size_range must satisfy 32 <= min <= max, got {self.size_range}")
        a_lo, a_hi = self.aspect_range
        if not (0.25 <= a_lo <= a_hi <= 4.0):
            raise ValueError(f"aspect_range must lie within [1/4, 4], got {self.aspect_range}")
        return self


def load_image(path: Union[str, Path]) -> Image:
    return Image(imageio.read_pixels(path))


def save_image(img: Image, path: Union[str, Path]) -> None:
    imageio.write_pixels(img.pixels, path)


def list_images(directory: Union[str, Path]) -> list[Path]:
    """Supported image files of a directory in sorted filename order."""
    directory = Path(directory)
    suffixes = imageio.supported_suffixes()
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in suffixes)
    if not paths:
        raise ImageFormatError(f"no supported images in {directory}")
    return paths


def load_directory(directory: Union[str, Path]) -> list[tuple[Path, Image]]:
    """(path, image) pairs in sorted filename order."""
    paths = list_images(directory)
    logger.info("directory_loaded", path=str(directory), count=len(paths))
    return [(p, load_image(p)) for p in paths]


def center_crop(img: Image, size: int) -> Image:
    """Center crop to a square of the short side, then resize to `size`."""
    side = min(img.height, img.width)
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    square = img.pixels[top:top + side, left:left + side]
    if side != size:
        square = resize_bilinear(square, size, size).clamp(0.0, 1.0)
    return Image(square.contiguous())


def resize_bilinear(pixels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of an [H, W, C] tensor (half-pixel centers, no antialiasing)."""
    if pixels.shape[0] == height and pixels.shape[1] == width:
        return pixels
    chw = pixels.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(chw, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0)


# --- Synthetic data ---

PATTERN_FAMILIES = ("gradient", "stripes", "blobs")


def _class_style(label: int) -> dict:
    """Per-class palette and pattern parameters; independent of the dataset seed."""
    gen = make_generator(0x5EED, label)
    palette = torch.rand(3, 3, generator=gen)
    return {
        "family": PATTERN_FAMILIES[label % len(PATTERN_FAMILIES)],
        "palette": palette,
        "angle": float(torch.rand(1, generator=gen)) * math.pi,
        "frequency": 2.0 + 4.0 * float(torch.rand(1, generator=gen)),
        "blob_count": 2 + label % 3,
    }


def _render(label: int, height: int, width: int, gen: torch.Generator) -> torch.Tensor:
    style = _class_style(label)
    c0, c1, c2 = style["palette"]
    ys = torch.linspace(0.0, 1.0, height).view(height, 1).expand(height, width)
    xs = torch.linspace(0.0, 1.0, width).view(1, width).expand(height, width)

    jitter = 0.3 * (float(torch.rand(1, generator=gen)) - 0.5)
    angle = style["angle"] + jitter
    u = xs * math.cos(angle) + ys * math.sin(angle)

    if style["family"] == "gradient":
        t = (u - u.min()) / (u.max() - u.min() + 1e-12)
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    elif style["family"] == "stripes":
        phase = 2 * math.pi * float(torch.rand(1, generator=gen))
        t = 0.5 + 0.5 * torch.sin(2 * math.pi * style["frequency"] * u + phase)
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    else:
        img = c2.expand(height, width, 3).clone()
        for _ in range(style["blob_count"]):
            cy, cx = torch.rand(2, generator=gen).tolist()
            radius = 0.1 + 0.15 * float(torch.rand(1, generator=gen))
            d2 = (ys - cy) ** 2 + (xs - cx) ** 2
            w = torch.exp(-d2 / (2 * radius ** 2))[..., None]
            img = img * (1 - w) + c0 * w

    return img.clamp(0.0, 1.0).to(torch.float32).contiguous()


def _sample_size(spec: DatasetSpec, gen: torch.Generator) -> tuple[int, int]:
    lo, hi = spec.size_range
    side = int(torch.randint(lo, hi + 1, (1,), generator=gen))
    a_lo, a_hi = spec.aspect_range
    u = float(torch.rand(1, generator=gen))
    aspect = math.exp(math.log(a_lo) + u * (math.log(a_hi) - math.log(a_lo)))  # width / height
    if aspect >= 1.0:
        return max(1, round(side / aspect)), side
    return side, max(1, round(side * aspect))


def generate_synthetic(spec: DatasetSpec) -> list[tuple[Image, int]]:
    """
    Deterministic procedural dataset: a pure function of `spec`.

    Each sample draws from its own generator keyed on (seed, index), so any
    subset can be regenerated independently.
    """
    samples = []
    for index in range(spec.count):
        gen = make_generator(spec.seed, index)
        label = int(torch.randint(0, spec.class_count, (1,), generator=gen))
        height, width = _sample_size(spec, gen)
        samples.append((Image(_render(label, height, width, gen)), label))
    logger.debug("synthetic_generated", count=spec.count, seed=spec.seed)
    return samples
