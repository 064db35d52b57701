"""
Class-conditional flow-matching generator over autoencoder latents.

The velocity network is a DiT-style transformer: AdaLN-modulated pre-norm
self-attention with 2D RoPE, cross-attention to the class token, and a
zero-initialized output head. Training regresses the straight-line velocity
z1 - z0; sampling integrates it with Euler steps and classifier-free guidance
on EMA weights.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Union

import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn
from torch.func import functional_call

from src.domain.autoencoder import LatentGrid
from src.domain.backbone import NORM_EPS, Attention, BlockConfig, LayerScale, SwiGLU
from src.domain.errors import ShapeError
from src.domain.imagedata import Image
from src.domain.naflex import GridFit, grid_positions
from src.domain.params import ParameterStore

logger = structlog.get_logger()

TIME_SCALE = 1000.0


class FlowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(default=4, ge=1)
    width: int = Field(default=128, ge=1)
    heads: int = Field(default=4, ge=1)
    class_count: int = Field(default=4, ge=1)
    cfg_dropout: float = Field(default=0.1, ge=0, lt=1)
    ema_decay: float = Field(default=0.999, ge=0, le=1)
    latent_channels: int = Field(default=16, ge=1)
    max_grid: int = Field(default=64, ge=1)  # rows/cols covered by the absolute position tables
    time_freq_dim: int = Field(default=256, ge=2)
    mlp_expansion: float = Field(default=4.0, gt=0)
    layerscale_init: float = 1e-4
    rope_base: float = 10000.0

    @model_validator(mode="after")
    def _check(self) -> "FlowConfig":
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if (self.width // self.heads) % 4:
            raise ValueError("head_dim must be divisible by 4 for 2D RoPE")
        if self.time_freq_dim % 2:
            raise ValueError("time_freq_dim must be even")
        return self

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.width, self.heads, self.mlp_expansion,
                           self.layerscale_init, self.rope_base)

    @property
    def uncond_label(self) -> int:
        return self.class_count


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of TIME_SCALE * t, [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(t.dtype)
    args = (TIME_SCALE * t)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class CrossAttention(nn.Module):
    """Queries from latent tokens, keys/values from the conditioning tokens [B, K, C]."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.q = nn.Linear(cfg.width, cfg.width)
        self.kv = nn.Linear(cfg.width, 2 * cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.width)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        q = self.q(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(context).view(b, -1, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        out = torch.softmax(logits, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, c))


class FlowBlock(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.width, eps=NORM_EPS, elementwise_affine=False)
        self.attn = Attention(cfg)
        self.norm_cross = nn.LayerNorm(cfg.width, eps=NORM_EPS)
        self.cross = CrossAttention(cfg)
        self.ls_cross = LayerScale(cfg.width, cfg.layerscale_init)
        self.norm2 = nn.LayerNorm(cfg.width, eps=NORM_EPS, elementwise_affine=False)
        self.mlp = SwiGLU(cfg.width, cfg.hidden_dim)
        self.ada = nn.Linear(cfg.width, 6 * cfg.width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, cond, context, positions, grid):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(cond)).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1), positions, grid)
        x = x + self.ls_cross(self.cross(self.norm_cross(x), context))
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class FlowTransformer(nn.Module):
    """Velocity network v(z_t, t, label) -> [B, N, c]; label == class_count is the unconditional token."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.latent_in = nn.Linear(cfg.latent_channels, w)
        self.row_embed = nn.Parameter(torch.randn(cfg.max_grid, w) * 0.02)
        self.col_embed = nn.Parameter(torch.randn(cfg.max_grid, w) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_freq_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.class_embed = nn.Embedding(cfg.class_count + 1, w)
        self.blocks = nn.ModuleList(FlowBlock(cfg.block) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(w, eps=NORM_EPS, elementwise_affine=False)
        self.ada_out = nn.Linear(w, 2 * w)
        self.head = nn.Linear(w, cfg.latent_channels)
        for layer in (self.ada_out, self.head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor,
                grid: tuple[int, int]) -> torch.Tensor:
        gh, gw = grid
        if x.shape[-1] != self.cfg.latent_channels or x.shape[1] != gh * gw:
            raise ShapeError(f"latents {tuple(x.shape)} do not match a {gh}x{gw}x{self.cfg.latent_channels} grid")
        if gh > self.cfg.max_grid or gw > self.cfg.max_grid:
            raise ShapeError(f"grid {gh}x{gw} exceeds the position tables ({self.cfg.max_grid})")
        if labels.min() < 0 or labels.max() > self.cfg.class_count:
            raise ValueError(f"class label out of range [0, {self.cfg.class_count}]")

        positions = grid_positions(gh, gw)
        h = self.latent_in(x) + self.row_embed[positions[:, 0]] + self.col_embed[positions[:, 1]]
        class_tok = self.class_embed(labels)
        cond = self.time_mlp(timestep_embedding(t.to(x.dtype), self.cfg.time_freq_dim)) + class_tok
        context = class_tok.unsqueeze(1)
        for blk in self.blocks:
            h = blk(h, cond, context, positions, grid)
        shift, scale = self.ada_out(F.silu(cond)).chunk(2, dim=-1)
        return self.head(modulate(self.norm_out(h), shift, scale))


VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, tuple[int, int]], torch.Tensor]


def _as_time(t: Union[float, torch.Tensor], batch: int, dtype: torch.dtype) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=dtype)
    if t.dim() == 0:
        t = t.expand(batch)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError("t must lie in [0, 1]")
    return t


def velocity(model: FlowTransformer, z_t: LatentGrid, t: Union[float, torch.Tensor],
             labels: torch.Tensor) -> LatentGrid:
    x = z_t.latents if z_t.latents.dim() == 3 else z_t.latents.unsqueeze(0)
    v = model(x, _as_time(t, x.shape[0], x.dtype), torch.as_tensor(labels).reshape(-1), z_t.grid.shape)
    return LatentGrid(v, z_t.grid)


def fm_loss(model: VelocityFn, z1: torch.Tensor, labels: torch.Tensor, grid: tuple[int, int],
            generator: Optional[torch.Generator] = None, cfg_dropout: float = 0.0,
            uncond_label: Optional[int] = None) -> torch.Tensor:
    """Flow-matching MSE on z_t = (1 - t) z0 + t z1 with target z1 - z0, for latents z1 [B, N, c]."""
    b = z1.shape[0]
    t = torch.rand(b, generator=generator, dtype=z1.dtype)
    z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    if cfg_dropout > 0:
        if uncond_label is None:
            uncond_label = model.cfg.uncond_label
        drop = torch.rand(b, generator=generator) < cfg_dropout
        labels = torch.where(drop, torch.full_like(labels, uncond_label), labels)
    tb = t.view(b, 1, 1)
    z_t = (1 - tb) * z0 + tb * z1
    return F.mse_loss(model(z_t, t, labels, grid), z1 - z0)


@torch.no_grad()
def euler_sample(model: FlowTransformer, labels: torch.Tensor, steps: int, cfg_scale: float,
                 grid: tuple[int, int], generator: Optional[torch.Generator] = None,
                 params: Optional[dict[str, torch.Tensor]] = None) -> torch.Tensor:
    """
    Integrate dz/dt = v from t=0 (Gaussian noise) to t=1 with `steps` Euler steps.

    `params` (usually the EMA weights) replace the module's own parameters for
    the call. With cfg_scale == 1 only the conditional velocity is evaluated.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    cfg = model.cfg
    labels = torch.as_tensor(labels).reshape(-1)
    b = labels.shape[0]

    def v(z, t, lab):
        if params is None:
            return model(z, t, lab, grid)
        return functional_call(model, params, (z, t, lab, grid))

    z = torch.randn((b, grid[0] * grid[1], cfg.latent_channels), generator=generator)
    uncond = torch.full_like(labels, cfg.uncond_label)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((b,), k / steps)
        v_c = v(z, t, labels)
        if cfg_scale == 1.0:
            step = v_c
        else:
            v_u = v(z, t, uncond)
            step = v_u + cfg_scale * (v_c - v_u)
        z = z + dt * step
    return z


@dataclass
class FlowState:
    params: ParameterStore
    ema: ParameterStore
    step: int = 0

    @classmethod
    def from_module(cls, model: FlowTransformer) -> "FlowState":
        live = ParameterStore.from_module(model)
        return cls(params=live, ema=live.detached_copy())

    def __post_init__(self):
        self.params.check_aligned(self.ema)

    def checkpoint_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        tensors = OrderedDict((f"params.{n}", t) for n, t in self.params.items())
        tensors.update((f"ema.{n}", t) for n, t in self.ema.items())
        return tensors

    def load_checkpoint_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.params.load_({n[len("params."):]: t for n, t in tensors.items() if n.startswith("params.")})
        self.ema.load_({n[len("ema."):]: t for n, t in tensors.items() if n.startswith("ema.")})


@torch.no_grad()
def ema_update(state: FlowState, decay: float) -> FlowState:
    """ema <- decay * ema + (1 - decay) * live, in place."""
    state.params.check_aligned(state.ema)
    for name, live in state.params.items():
        state.ema[name].mul_(decay).add_(live.detach(), alpha=1.0 - decay)
    state.ema.step = state.params.step
    return state


def generate_images(ae: nn.Module, model: FlowTransformer, state: FlowState, labels: torch.Tensor,
                    grid: GridFit, steps: int = 50, cfg_scale: float = 4.0,
                    generator: Optional[torch.Generator] = None,
                    window: Optional[int] = None) -> list[Image]:
    if ae.cfg.latent_channels != model.cfg.latent_channels:
        raise ShapeError(
            f"autoencoder has {ae.cfg.latent_channels} latent channels, flow expects {model.cfg.latent_channels}")
    z = euler_sample(model, labels, steps, cfg_scale, grid.shape, generator, state.ema.as_dict())
    with torch.no_grad():
        canvases = ae.decode(LatentGrid(z, grid), window=window)
    images = [Image.from_tensor(c[:grid.resized_h, :grid.resized_w], clamp=True) for c in canvases]
    logger.info("samples_generated", count=len(images), steps=steps, cfg_scale=cfg_scale)
    return images


def estimate_flops(cfg: FlowConfig, tokens: int, batch: int = 1) -> dict[str, Union[int, str]]:
    """Matmul FLOPs (2 per multiply-add) of one forward pass; training counts forward + backward as 3x forward."""
    w, c, t = cfg.width, cfg.latent_channels, tokens
    hidden = cfg.block.hidden_dim
    per_block = (
        2 * t * w * 3 * w          # qkv
        + 2 * 2 * t * t * w        # scores and weighted sum
        + 2 * t * w * w            # attention out
        + 2 * t * w * w + 2 * 2 * w * w + 2 * 2 * t * w + 2 * t * w * w  # cross-attention
        + 2 * t * w * hidden * 3   # SwiGLU
        + 2 * w * 6 * w            # AdaLN
    )
    embed = 2 * t * c * w + 2 * cfg.time_freq_dim * w + 2 * w * w
    out = 2 * w * 2 * w + 2 * t * w * c
    forward = batch * (cfg.depth * per_block + embed + out)
    return {"forward": forward, "training": 3 * forward, "convention": "forward+backward=3x forward"}
