"""
ViT autoencoder: shallow encoder, pluggable latent regularizer, deep decoder.

Models are named {scale}d{enc_depth}-{scale}/{patch}x{channels}, e.g. Bd4-B/16x64.
"""
from dataclasses import dataclass, replace
from typing import Any, Literal, Optional

import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from src.domain.backbone import NORM_EPS, BlockConfig, TokenBatch, TransformerBlock
from src.domain.errors import ShapeError
from src.domain.naflex import GridFit, PackedImage, grid_positions, unpatchify

logger = structlog.get_logger()

Regularizer = Literal["kl", "tanh_noise", "layernorm"]

# scale -> (width, decoder depth, heads); "D" is the desk-scale model, not a published variant
SCALES: dict[str, tuple[int, int, int]] = {
    "B": (768, 12, 12),
    "L": (1024, 24, 16),
    "G": (1408, 40, 16),
    "T": (3072, 40, 24),
    "D": (128, 6, 4),
}

DEFAULT_REG_PARAM: dict[str, float] = {"kl": 0.01, "tanh_noise": 0.01, "layernorm": 0.0}

LOGVAR_RANGE = (-30.0, 20.0)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["vit", "identity"] = "vit"
    scale: str = "D"
    enc_depth: int = Field(default=2, ge=0)
    dec_depth: int = Field(default=6, ge=0)
    width: int = Field(default=128, ge=1)
    heads: int = Field(default=4, ge=1)
    patch: int = Field(default=8, ge=1)
    latent_channels: int = Field(default=16, ge=1)
    regularizer: Regularizer = "layernorm"
    reg_param: float = Field(default=0.0, ge=0)  # unset: DEFAULT_REG_PARAM of the regularizer
    mlp_expansion: float = Field(default=8 / 3, gt=0)
    layerscale_init: float = 1e-4
    rope_base: float = 10000.0

    @property
    def name(self) -> str:
        return f"{self.scale}d{self.enc_depth}-{self.scale}/{self.patch}x{self.latent_channels}"

    @model_validator(mode="before")
    @classmethod
    def _default_reg_param(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("reg_param") is None:
            regularizer = data.get("regularizer", "layernorm")
            data = {**data, "reg_param": DEFAULT_REG_PARAM.get(regularizer, 0.0)}
        return data

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if (self.width // self.heads) % 4:
            raise ValueError("head_dim must be divisible by 4 for 2D RoPE")
        return self

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.width, self.heads, self.mlp_expansion,
                           self.layerscale_init, self.rope_base)

    def with_(self, **changes) -> "ModelConfig":
        """Validated copy; switching regularizer without a reg_param picks that regularizer's default."""
        data = self.model_dump()
        if "regularizer" in changes and "reg_param" not in changes:
            data.pop("reg_param")
        return ModelConfig.model_validate({**data, **changes})


def make_config(scale: str, enc_depth: int = 4, patch: int = 16, latent_channels: int = 64,
                regularizer: Regularizer = "layernorm", reg_param: Optional[float] = None) -> ModelConfig:
    if scale not in SCALES:
        raise ValueError(f"unknown scale '{scale}', expected one of {sorted(SCALES)}")
    width, dec_depth, heads = SCALES[scale]
    return ModelConfig(
        scale=scale, enc_depth=enc_depth, dec_depth=dec_depth, width=width, heads=heads,
        patch=patch, latent_channels=latent_channels, regularizer=regularizer,
        reg_param=DEFAULT_REG_PARAM[regularizer] if reg_param is None else reg_param,
    )


# Encoder depth ablation (f16x64, B decoder): linear projection up to a 4-block encoder.
ENCODER_ABLATIONS: dict[str, ModelConfig] = {
    "linear": make_config("B", enc_depth=0),
    "d1": make_config("B", enc_depth=1),
    "d2": make_config("B", enc_depth=2),
    "d4": make_config("B", enc_depth=4),
}


def compression_ratio(patch: int, latent_channels: int) -> float:
    """Pixels per latent dimension: 3 * f^2 / c with the spatial factor f equal to the patch size."""
    if latent_channels < 1:
        raise ValueError("latent_channels must be >= 1")
    return 3 * patch * patch / latent_channels


@dataclass(frozen=True)
class LatentGrid:
    latents: torch.Tensor  # [B, N, c] (or [N, c])
    grid: GridFit
    logvar: Optional[torch.Tensor] = None  # KL mode only, same shape as latents

    def __post_init__(self):
        if self.latents.shape[-2] != self.grid.tokens:
            raise ShapeError(f"{self.latents.shape[-2]} latents for a {self.grid.grid_h}x{self.grid.grid_w} grid")

    @property
    def channels(self) -> int:
        return int(self.latents.shape[-1])


def regularize_latent(z: LatentGrid, mode: str, reg_param: float,
                      generator: Optional[torch.Generator] = None,
                      training: bool = False) -> tuple[LatentGrid, torch.Tensor]:
    """Apply the bottleneck regularizer; returns (regularized latents, weighted reg loss)."""
    mu = z.latents
    zero = mu.new_zeros(())
    if mode == "kl":
        if z.logvar is None:
            raise ShapeError("KL regularization needs encoder log-variances")
        logvar = z.logvar.clamp(*LOGVAR_RANGE)
        kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
        reg_loss = reg_param * kl.mean()
        if training:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            out = mu + torch.exp(0.5 * logvar) * eps
        else:
            out = mu
        return replace(z, latents=out, logvar=None), reg_loss
    if mode == "tanh_noise":
        out = torch.tanh(mu)
        if training:
            out = out + reg_param * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return replace(z, latents=out, logvar=None), zero
    if mode == "layernorm":
        out = F.layer_norm(mu, (mu.shape[-1],), eps=NORM_EPS)
        return replace(z, latents=out, logvar=None), zero
    raise ValueError(f"unknown regularizer '{mode}'")


def _as_batch(tokens: torch.Tensor) -> torch.Tensor:
    return tokens if tokens.dim() == 3 else tokens.unsqueeze(0)


class Autoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        block = cfg.block
        head_out = 2 * cfg.latent_channels if cfg.regularizer == "kl" else cfg.latent_channels

        if cfg.width < cfg.token_dim:
            logger.warning("encoder_width_below_patch_dim", width=cfg.width,
                           pixels_per_token=cfg.token_dim, model=cfg.name)

        if cfg.enc_depth == 0:
            self.patch_embed = None
            self.enc_blocks = nn.ModuleList()
            self.enc_norm = None
            self.enc_head = nn.Linear(cfg.token_dim, head_out)
        else:
            self.patch_embed = nn.Linear(cfg.token_dim, cfg.width)
            self.enc_blocks = nn.ModuleList(TransformerBlock(block) for _ in range(cfg.enc_depth))
            self.enc_norm = nn.LayerNorm(cfg.width, eps=NORM_EPS)
            self.enc_head = nn.Linear(cfg.width, head_out)

        self.dec_embed = nn.Linear(cfg.latent_channels, cfg.width)
        self.dec_blocks = nn.ModuleList(TransformerBlock(block) for _ in range(cfg.dec_depth))
        self.dec_norm = nn.LayerNorm(cfg.width, eps=NORM_EPS)
        self.dec_head = nn.Linear(cfg.width, cfg.token_dim)

    def encoder_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("dec_"):
                yield p

    def decoder_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("dec_"):
                yield p

    def encode(self, tokens: torch.Tensor, grid: GridFit) -> LatentGrid:
        """Patch tokens [B, N, p*p*3] -> pre-regularizer latents. Encoder attention is always full."""
        x = _as_batch(tokens)
        if x.shape[-1] != self.cfg.token_dim:
            raise ShapeError(f"token length {x.shape[-1]}, expected {self.cfg.token_dim}")
        if self.patch_embed is not None:
            batch = TokenBatch(self.patch_embed(x), grid_positions(*grid.shape), grid.shape)
            for blk in self.enc_blocks:
                batch = blk(batch)
            x = self.enc_norm(batch.values)
        head = self.enc_head(x)
        if self.cfg.regularizer == "kl":
            mu, logvar = head.chunk(2, dim=-1)
            return LatentGrid(mu, grid, logvar)
        return LatentGrid(head, grid)

    def regularize(self, z: LatentGrid, generator: Optional[torch.Generator] = None,
                   training: Optional[bool] = None) -> tuple[LatentGrid, torch.Tensor]:
        return regularize_latent(z, self.cfg.regularizer, self.cfg.reg_param, generator,
                                 self.training if training is None else training)

    def decode_tokens(self, z: LatentGrid, window: Optional[int] = None) -> torch.Tensor:
        """Regularized latents -> raw (unclamped) patch tokens [B, N, p*p*3]."""
        lat = _as_batch(z.latents)
        if lat.shape[-1] != self.cfg.latent_channels:
            raise ShapeError(f"latent channels {lat.shape[-1]}, expected {self.cfg.latent_channels}")
        batch = TokenBatch(self.dec_embed(lat), grid_positions(*z.grid.shape), z.grid.shape)
        for blk in self.dec_blocks:
            batch = blk(batch, window=window)
        return self.dec_head(self.dec_norm(batch.values))

    def decode(self, z: LatentGrid, window: Optional[int] = None) -> torch.Tensor:
        """Reconstructed padded canvas [B, H, W, 3], raw values (clamp only for metrics/files)."""
        return unpatchify(self.decode_tokens(z, window), z.grid, self.cfg.patch)

    def forward(self, tokens: torch.Tensor, grid: GridFit, generator: Optional[torch.Generator] = None,
                window: Optional[int] = None):
        z = self.encode(tokens, grid)
        z_reg, reg_loss = self.regularize(z, generator)
        return self.decode(z_reg, window), z_reg, reg_loss


class IdentityAutoencoder(nn.Module):
    """Parameter-free stand-in whose latents are the patch tokens themselves."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.with_(latent_channels=cfg.token_dim, regularizer="layernorm")

    def encode(self, tokens: torch.Tensor, grid: GridFit) -> LatentGrid:
        return LatentGrid(_as_batch(tokens), grid)

    def regularize(self, z: LatentGrid, generator=None, training=None):
        return z, z.latents.new_zeros(())

    def decode_tokens(self, z: LatentGrid, window: Optional[int] = None) -> torch.Tensor:
        return _as_batch(z.latents)

    def decode(self, z: LatentGrid, window: Optional[int] = None) -> torch.Tensor:
        return unpatchify(self.decode_tokens(z), z.grid, self.cfg.patch)

    def forward(self, tokens, grid, generator=None, window=None):
        z = self.encode(tokens, grid)
        return self.decode(z), z, z.latents.new_zeros(())


def build_autoencoder(cfg: ModelConfig) -> nn.Module:
    return IdentityAutoencoder(cfg) if cfg.kind == "identity" else Autoencoder(cfg)


def encode_packed(model: nn.Module, packed: PackedImage) -> LatentGrid:
    return model.encode(packed.tokens, packed.grid)


@dataclass(frozen=True)
class ParameterCount:
    encoder: int
    decoder: int

    @property
    def total(self) -> int:
        return self.encoder + self.decoder


def count_parameters(cfg: ModelConfig) -> ParameterCount:
    """Exact scalar count of the assembled model, built on the meta device (nothing is allocated)."""
    if cfg.kind == "identity":
        return ParameterCount(0, 0)
    with torch.device("meta"):
        model = Autoencoder(cfg)
    encoder = sum(p.numel() for p in model.encoder_parameters())
    decoder = sum(p.numel() for p in model.decoder_parameters())
    return ParameterCount(encoder, decoder)
