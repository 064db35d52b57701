"""
Native-resolution front end: fit an image into a token budget without
changing its aspect ratio, pad it with gray to a whole number of patches,
and cut it into channel-last patch tokens.
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import torch

from src.domain.errors import ShapeError
from src.domain.imagedata import Image, resize_bilinear

PAD_VALUE = 0.5


@dataclass(frozen=True)
class GridFit:
    grid_h: int
    grid_w: int
    resized_h: int
    resized_w: int
    scale: float
    source_h: int
    source_w: int

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w


@dataclass(frozen=True)
class PackedImage:
    tokens: torch.Tensor  # [grid_h * grid_w, p * p * 3]
    pad_mask: torch.Tensor  # [grid_h * p, grid_w * p], True = real content
    grid: GridFit
    patch_size: int

    @property
    def canvas(self) -> torch.Tensor:
        return unpatchify(self.tokens, self.grid, self.patch_size)


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def _grid_for(scale: Fraction, h: int, w: int, p: int) -> tuple[int, int]:
    return math.ceil(scale * h / p), math.ceil(scale * w / p)


def fit_grid(h: int, w: int, p: int, budget: int) -> GridFit:
    """
    Largest scale s <= 1 with ceil(s*h/p) * ceil(s*w/p) <= budget.

    The token grid only changes at scales k*p/h or k*p/w, so the optimum is
    one of those breakpoints (or 1). All of them are checked in exact
    rational arithmetic.
    """
    if budget < 1:
        raise ValueError(f"token budget must be >= 1, got {budget}")
    if h < 1 or w < 1:
        raise ValueError(f"image dimensions must be >= 1, got {h}x{w}")
    if p < 1:
        raise ValueError(f"patch size must be >= 1, got {p}")

    one = Fraction(1)
    candidates = {one}
    for extent in (h, w):
        for k in range(1, math.ceil(extent / p) + 1):
            candidates.add(min(one, Fraction(k * p, extent)))

    best: Optional[Fraction] = None
    for s in candidates:
        gh, gw = _grid_for(s, h, w, p)
        if gh * gw <= budget and (best is None or s > best):
            best = s
    # s = p / max(h, w) always yields a 1x1 grid, so best is set
    assert best is not None

    gh, gw = _grid_for(best, h, w, p)
    return GridFit(
        grid_h=gh,
        grid_w=gw,
        resized_h=max(1, _round_half_up(best * h)),
        resized_w=max(1, _round_half_up(best * w)),
        scale=float(best),
        source_h=h,
        source_w=w,
    )


def fit_fixed(h: int, w: int, p: int, budget: int) -> GridFit:
    """Square grid for the fixed-resolution regime: side = floor(sqrt(budget)) patches."""
    side = max(1, math.isqrt(budget))
    crop = min(h, w)
    return GridFit(side, side, side * p, side * p, side * p / crop, crop, crop)


def _pixels(img: Union[Image, torch.Tensor]) -> torch.Tensor:
    return img.pixels if isinstance(img, Image) else img


def resize_pad(img: Union[Image, torch.Tensor], fit: GridFit, p: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Resize to (resized_h, resized_w), place top-left on a gray canvas, return (canvas, mask)."""
    pixels = _pixels(img)
    if (pixels.shape[0], pixels.shape[1]) != (fit.source_h, fit.source_w):
        raise ShapeError(
            f"fit was computed for {fit.source_h}x{fit.source_w}, image is "
            f"{pixels.shape[0]}x{pixels.shape[1]}")
    canvas_h, canvas_w = fit.grid_h * p, fit.grid_w * p
    if fit.resized_h > canvas_h or fit.resized_w > canvas_w:
        raise ShapeError("resized image does not fit the canvas")

    content = resize_bilinear(pixels, fit.resized_h, fit.resized_w)
    canvas = torch.full((canvas_h, canvas_w, 3), PAD_VALUE, dtype=pixels.dtype)
    canvas[:fit.resized_h, :fit.resized_w] = content
    mask = torch.zeros(canvas_h, canvas_w, dtype=torch.bool)
    mask[:fit.resized_h, :fit.resized_w] = True
    return canvas, mask


def patchify(padded: Union[Image, torch.Tensor], p: int) -> torch.Tensor:
    """[H, W, C] -> [(H/p)*(W/p), p*p*C], row-major patches, channel-last within a patch."""
    x = _pixels(padded)
    h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"{h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return x.reshape(gh, p, gw, p, c).permute(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def unpatchify(tokens: torch.Tensor, grid: Union[GridFit, tuple[int, int]], p: int) -> torch.Tensor:
    """Exact inverse of patchify; accepts [N, D] or batched [B, N, D] tokens."""
    gh, gw = grid.shape if isinstance(grid, GridFit) else grid
    batched = tokens.dim() == 3
    t = tokens if batched else tokens.unsqueeze(0)
    b, n, d = t.shape
    if n != gh * gw:
        raise ShapeError(f"{n} tokens do not fill a {gh}x{gw} grid")
    if d % (p * p):
        raise ShapeError(f"token length {d} is not a multiple of {p}x{p}")
    c = d // (p * p)
    out = t.reshape(b, gh, gw, p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, gh * p, gw * p, c)
    return out if batched else out[0]


def grid_positions(grid_h: int, grid_w: int) -> torch.Tensor:
    """Row-major integer (row, col) coordinates, shape [grid_h * grid_w, 2]."""
    rows = torch.arange(grid_h).repeat_interleave(grid_w)
    cols = torch.arange(grid_w).repeat(grid_h)
    return torch.stack([rows, cols], dim=-1)


def pack_image(img: Union[Image, torch.Tensor], p: int, budget: int, regime: str = "naflex") -> PackedImage:
    pixels = _pixels(img)
    h, w = int(pixels.shape[0]), int(pixels.shape[1])
    if regime == "fixed":
        fit = fit_fixed(h, w, p, budget)
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        pixels = pixels[top:top + side, left:left + side]
    elif regime == "naflex":
        fit = fit_grid(h, w, p, budget)
    else:
        raise ValueError(f"unknown training regime '{regime}'")
    canvas, mask = resize_pad(pixels, fit, p)
    return PackedImage(tokens=patchify(canvas, p), pad_mask=mask, grid=fit, patch_size=p)


def token_pad_fraction(packed: PackedImage) -> float:
    total = packed.pad_mask.numel()
    return float(total - int(packed.pad_mask.sum())) / total


def random_crop(img: Image, gen: torch.Generator, min_area: float = 0.5) -> Image:
    """Aspect-preserving random crop covering at least `min_area` of the image."""
    area = min_area + (1.0 - min_area) * float(torch.rand(1, generator=gen))
    side_scale = math.sqrt(area)
    ch = max(1, round(img.height * side_scale))
    cw = max(1, round(img.width * side_scale))
    top = int(torch.randint(0, img.height - ch + 1, (1,), generator=gen))
    left = int(torch.randint(0, img.width - cw + 1, (1,), generator=gen))
    return Image(img.pixels[top:top + ch, left:left + cw].contiguous())
