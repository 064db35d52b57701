"""
GAN-free reconstruction objective: Charbonnier + SSIM + perceptual tile loss
on frozen extractor features, plus the latent regularizer term.

All terms are reduced over the valid (non-padding) region only. Images are
[H, W, 3]; masks are [H, W] with the valid region anchored top-left.
"""
import math
from typing import Optional

import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from src.domain.errors import NonFiniteError, ShapeError
from src.domain.extractor import FrozenExtractor
from src.domain.imagedata import resize_bilinear

logger = structlog.get_logger()

CHARBONNIER_EPS = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    w_char: float = Field(default=1.0, ge=0)
    w_ssim: float = Field(default=0.1, ge=0)
    w_perc: float = Field(default=500.0, ge=0)
    tile: int = Field(default=64, ge=1)
    tiles_per_image: Optional[int] = Field(default=1, ge=1)  # None = exhaustive tiling


# Loss ablation rows: each adds one component to the pixel-only baseline.
LOSS_PRESETS: dict[str, LossWeights] = {
    "pixel": LossWeights(w_char=1.0, w_ssim=0.0, w_perc=0.0),
    "pixel+ssim": LossWeights(w_char=1.0, w_ssim=0.1, w_perc=0.0),
    "pixel+ssim+perc500": LossWeights(w_char=1.0, w_ssim=0.1, w_perc=500.0),
    "pixel+ssim+perc1000": LossWeights(w_char=1.0, w_ssim=0.1, w_perc=1000.0),
}


def valid_extent(mask: torch.Tensor) -> tuple[int, int]:
    """(rows, cols) of the top-left valid rectangle."""
    rows = int(mask.any(dim=1).sum())
    cols = int(mask.any(dim=0).sum())
    if rows == 0 or cols == 0:
        raise ShapeError("mask has no valid pixels")
    return rows, cols


def _crop_valid(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor]):
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if mask is None:
        return x, x_hat
    rows, cols = valid_extent(mask)
    return x[:rows, :cols], x_hat[:rows, :cols]


def charbonnier(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    err = torch.sqrt((x - x_hat).pow(2) + CHARBONNIER_EPS ** 2)
    if mask is None:
        return err.mean()
    if not bool(mask.any()):
        raise ShapeError("mask has no valid pixels")
    return err[mask].mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords.pow(2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-window SSIM for [H, W, C] inputs; only windows fully inside the image ([C, H-10, W-10])."""
    h, w, c = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"valid region {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = gaussian_window(dtype=x.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(t):
        return F.conv2d(t.permute(2, 0, 1).unsqueeze(0), kernel, groups=c)[0]

    mu_x, mu_y = filt(x), filt(y)
    sigma_xx = filt(x * x) - mu_x.pow(2)
    sigma_yy = filt(y * y) - mu_y.pow(2)
    sigma_xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x.pow(2) + mu_y.pow(2) + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2)
    return num / den


def ssim_loss(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    x, x_hat = _crop_valid(x, x_hat, mask)
    return 1.0 - ssim_map(x, x_hat).mean()


def tile_offsets(rows: int, cols: int, tile: int, count: Optional[int],
                 generator: Optional[torch.Generator] = None) -> list[tuple[int, int]]:
    """Top-left tile corners: `count` uniform draws, or an exhaustive covering when count is None."""
    if count is None:
        ys = list(range(0, rows - tile + 1, tile))
        xs = list(range(0, cols - tile + 1, tile))
        if ys[-1] != rows - tile:
            ys.append(rows - tile)
        if xs[-1] != cols - tile:
            xs.append(cols - tile)
        return [(y, x) for y in ys for x in xs]
    offsets = []
    for _ in range(count):
        y = int(torch.randint(0, rows - tile + 1, (1,), generator=generator))
        x = int(torch.randint(0, cols - tile + 1, (1,), generator=generator))
        offsets.append((y, x))
    return offsets


def perceptual_tile_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor: FrozenExtractor,
                         weights: LossWeights, mask: Optional[torch.Tensor] = None,
                         generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    MSE between token-wise L2-normalized extractor features of aligned tiles.

    Tiles are drawn at the same location in both images inside the valid
    region. A valid region smaller than a tile is first upscaled (same
    aspect, same factor for both images) so its short side equals the tile.
    """
    tile = weights.tile
    x, x_hat = _crop_valid(x, x_hat, mask)
    rows, cols = x.shape[0], x.shape[1]
    if rows < tile or cols < tile:
        factor = tile / min(rows, cols)
        rows, cols = max(tile, math.ceil(rows * factor)), max(tile, math.ceil(cols * factor))
        x = resize_bilinear(x, rows, cols)
        x_hat = resize_bilinear(x_hat, rows, cols)

    offsets = tile_offsets(rows, cols, tile, weights.tiles_per_image, generator)
    ref_tiles = torch.stack([x[y:y + tile, c:c + tile] for y, c in offsets])
    rec_tiles = torch.stack([x_hat[y:y + tile, c:c + tile] for y, c in offsets])

    with torch.no_grad():
        ref_feats = extractor.forward_features(ref_tiles)
    rec_feats = extractor.forward_features(rec_tiles)

    per_tap = [
        F.mse_loss(F.normalize(rec, dim=-1), F.normalize(ref, dim=-1))
        for ref, rec in zip(ref_feats, rec_feats)
    ]
    return torch.stack(per_tap).mean()


def total_loss(x: torch.Tensor, x_hat: torch.Tensor, reg_loss: torch.Tensor, weights: LossWeights,
               extractor: Optional[FrozenExtractor] = None, mask: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted composite for one image; zero-weight terms are skipped and reported as 0."""
    zero = x_hat.new_zeros(())
    terms = {
        "char": charbonnier(x, x_hat, mask) if weights.w_char > 0 else zero,
        "ssim": ssim_loss(x, x_hat, mask) if weights.w_ssim > 0 else zero,
        "perc": zero,
        "reg": reg_loss,
    }
    if weights.w_perc > 0:
        if extractor is None:
            raise ValueError("perceptual weight is non-zero but no extractor was given")
        terms["perc"] = perceptual_tile_loss(x, x_hat, extractor, weights, mask, generator)

    for name, value in terms.items():
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteError(f"loss_{name}", float(value))

    total = (weights.w_char * terms["char"] + weights.w_ssim * terms["ssim"]
             + weights.w_perc * terms["perc"] + terms["reg"])
    breakdown = {name: float(value) for name, value in terms.items()}
    breakdown["total"] = float(total)
    return total, breakdown
