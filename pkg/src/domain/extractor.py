"""
Frozen ViT feature extractor used by the perceptual tile loss and by the
Fréchet distances. Weights are a deterministic function of the seed unless
external weights are loaded through `load_weights`.
"""
from pathlib import Path
from typing import Optional, Union

import structlog
import torch
from torch import nn

from src.domain.backbone import NORM_EPS, BlockConfig, TokenBatch, TransformerBlock
from src.domain.errors import ShapeError
from src.domain.imagedata import resize_bilinear
from src.domain.naflex import grid_positions, patchify

logger = structlog.get_logger()


def default_taps(depth: int) -> tuple[int, ...]:
    """Blocks at depth/3, 2*depth/3 and depth (1-based)."""
    taps = sorted({max(1, depth // 3), max(1, 2 * depth // 3), depth})
    return tuple(taps)


class FrozenExtractor(nn.Module):
    def __init__(self, seed: int = 0, patch: int = 8, width: int = 64, depth: int = 4,
                 heads: int = 4, tile: int = 64, taps: Optional[tuple[int, ...]] = None):
        super().__init__()
        if tile % patch:
            raise ValueError(f"tile {tile} is not divisible by extractor patch {patch}")
        self.seed = seed
        self.patch = patch
        self.tile = tile
        self.taps = taps or default_taps(depth)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            cfg = BlockConfig(width=width, heads=heads, layerscale_init=1.0)
            self.embed = nn.Linear(patch * patch * 3, width)
            self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(depth))
            self.norm = nn.LayerNorm(width, eps=NORM_EPS, elementwise_affine=False)

        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FrozenExtractor":
        # always in inference mode
        return super().train(False)

    def load_weights(self, path: Union[str, Path]) -> None:
        """Replace the random weights with externally trained ones stored in a VTKF file."""
        from src.infrastructure.checkpoint import load_checkpoint

        _, tensors = load_checkpoint(path)
        missing = set(self.state_dict()) - set(tensors)
        if missing:
            raise ShapeError(f"extractor weights missing {sorted(missing)[:5]}")
        self.load_state_dict({k: tensors[k] for k in self.state_dict()})
        logger.info("extractor_weights_loaded", path=str(path), seed=self.seed)

    def forward_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Images [B, H, W, 3] (dims divisible by patch) -> layer-normalized token features at each tap."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, h, w, _ = images.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"{h}x{w} is not divisible by extractor patch {self.patch}")
        grid = (h // self.patch, w // self.patch)
        tokens = torch.stack([patchify(img, self.patch) for img in images])
        batch = TokenBatch(self.embed(tokens), grid_positions(*grid), grid)
        feats = []
        for index, blk in enumerate(self.blocks, start=1):
            batch = blk(batch)
            if index in self.taps:
                feats.append(self.norm(batch.values))
        return feats

    @torch.no_grad()
    def pooled(self, images: list[torch.Tensor]) -> torch.Tensor:
        """Mean-pooled final-block features [N, width]; each image is resized to the tile size."""
        rows = []
        for img in images:
            resized = resize_bilinear(img.to(torch.float32), self.tile, self.tile)
            rows.append(self.forward_features(resized)[-1].mean(dim=1)[0])
        return torch.stack(rows).to(torch.float64)


def default_extractors(seeds: dict[str, int], tile: int = 64,
                       weights: Optional[dict[str, Path]] = None) -> dict[str, FrozenExtractor]:
    """One extractor per id; ids listed in `weights` load those files instead of keeping random weights."""
    extractors = {}
    for name, seed in sorted(seeds.items()):
        extractor = FrozenExtractor(seed=seed, tile=tile)
        if weights and name in weights:
            extractor.load_weights(weights[name])
        extractors[name] = extractor
    return extractors
