"""
Transformer machinery shared by the autoencoder, the frozen feature extractor
and the flow model: axial 2D RoPE, full and sliding-window attention with
per-head Q/K RMSNorm, SwiGLU MLP, LayerScale and pre-norm residual blocks.
"""
import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from src.domain.errors import ShapeError

NORM_EPS = 1e-6


def round_to_multiple(value: float, multiple: int = 64) -> int:
    return max(multiple, multiple * math.floor(value / multiple + 0.5))


@dataclass(frozen=True)
class BlockConfig:
    width: int
    heads: int
    mlp_expansion: float = 8 / 3
    layerscale_init: float = 1e-4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.width < 1 or self.heads < 1:
            raise ValueError("width and heads must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.mlp_expansion <= 0:
            raise ValueError("mlp_expansion must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def hidden_dim(self) -> int:
        return round_to_multiple(self.width * self.mlp_expansion, 64)


@dataclass(frozen=True)
class TokenBatch:
    values: torch.Tensor  # [B, T, C]
    positions: torch.Tensor  # [T, 2] integer (row, col)
    grid: tuple[int, int]
    valid_mask: Optional[torch.Tensor] = None  # [B, T]; False tokens are ignored as keys

    def __post_init__(self):
        gh, gw = self.grid
        if self.values.shape[1] != gh * gw or self.positions.shape[0] != gh * gw:
            raise ShapeError(f"token batch does not match a {gh}x{gw} grid")
        if self.valid_mask is not None and self.valid_mask.shape != self.values.shape[:2]:
            raise ShapeError("valid_mask must be [B, T]")

    def with_values(self, values: torch.Tensor) -> "TokenBatch":
        return replace(self, values=values)


# --- Rotary positions ---

def rope_angles(positions: torch.Tensor, head_dim: int, base: float, dtype: torch.dtype) -> torch.Tensor:
    """Angles [T, head_dim/2]: the first half of the pairs follow rows, the second half columns."""
    if head_dim % 4:
        raise ShapeError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    quarter = head_dim // 4
    exponent = torch.arange(quarter, dtype=torch.float64) * 2.0 / (head_dim // 2)
    inv_freq = (base ** -exponent).to(dtype)
    rows = positions[:, 0].to(dtype).unsqueeze(-1) * inv_freq
    cols = positions[:, 1].to(dtype).unsqueeze(-1) * inv_freq
    return torch.cat([rows, cols], dim=-1)


def apply_rope2d(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate feature pairs of x [..., T, D] by their token's grid coordinates."""
    d = x.shape[-1]
    angles = rope_angles(positions, d, base, x.dtype)
    cos, sin = angles.cos(), angles.sin()
    pairs = x.unflatten(-1, (d // 2, 2))
    even, odd = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return rotated.flatten(-2)


# --- Layers ---

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class SwiGLU(nn.Module):
    """out = W_down(silu(W_gate x) * W_up x)."""

    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(width, hidden)
        self.w_up = nn.Linear(width, hidden)
        self.w_down = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


def _softmax_attend(q, k, v, allowed):
    logits = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
    logits = logits.masked_fill(~allowed, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


def chebyshev_mask(positions: torch.Tensor, radius: int) -> torch.Tensor:
    """[T, T] boolean: key within Chebyshev distance `radius` of the query."""
    diff = (positions[:, None, :] - positions[None, :, :]).abs().amax(dim=-1)
    return diff <= radius


class Attention(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.rope_base = cfg.rope_base
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.q_norm = RMSNorm(cfg.head_dim)
        self.k_norm = RMSNorm(cfg.head_dim)
        self.proj = nn.Linear(cfg.width, cfg.width)

    def project_qkv(self, x: torch.Tensor, positions: torch.Tensor):
        b, t, _ = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = apply_rope2d(self.q_norm(q), positions, self.rope_base)
        k = apply_rope2d(self.k_norm(k), positions, self.rope_base)
        return q, k, v

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        grid: tuple[int, int],
        valid_mask: Optional[torch.Tensor] = None,
        window: Optional[int] = None,
        blockwise: bool = True,
    ) -> torch.Tensor:
        b, t, c = x.shape
        if c != self.heads * self.head_dim:
            raise ShapeError(f"expected width {self.heads * self.head_dim}, got {c}")
        q, k, v = self.project_qkv(x, positions)
        key_valid = valid_mask if valid_mask is not None else torch.ones(b, t, dtype=torch.bool)

        if window is not None and window < 0:
            raise ValueError(f"window radius must be >= 0, got {window}")
        if window is not None and blockwise:
            out = _local_attention(q, k, v, key_valid, grid, window)
        else:
            # queries always see themselves, so no softmax row is empty
            allowed = key_valid[:, None, None, :] | torch.eye(t, dtype=torch.bool)
            if window is not None:
                allowed = allowed & (chebyshev_mask(positions, window) | torch.eye(t, dtype=torch.bool))
            out = _softmax_attend(q, k, v, allowed)
        return self.proj(out.transpose(1, 2).reshape(b, t, c))


def _local_attention(q, k, v, key_valid, grid, radius):
    """
    Sliding-window attention in O(T * r^2): queries are tiled into b x b blocks
    and each block attends to its (b + 2r)^2 key halo, masked to the Chebyshev
    window of every query.
    """
    bsz, heads, t, d = q.shape
    gh, gw = grid
    r = min(radius, max(gh, gw) - 1)
    blk = max(1, r)
    nbh, nbw = math.ceil(gh / blk), math.ceil(gw / blk)
    hp, wp = nbh * blk, nbw * blk
    span = blk + 2 * r

    def to_grid(x):
        return x.reshape(bsz, heads, gh, gw, d)

    q_blocks = F.pad(to_grid(q), (0, 0, 0, wp - gw, 0, hp - gh))
    q_blocks = q_blocks.view(bsz, heads, nbh, blk, nbw, blk, d).permute(0, 1, 2, 4, 3, 5, 6)
    q_blocks = q_blocks.reshape(bsz, heads, nbh, nbw, blk * blk, d)

    def halo(x):
        x = F.pad(to_grid(x), (0, 0, r, wp - gw + r, r, hp - gh + r))
        x = x.unfold(2, span, blk).unfold(3, span, blk)  # [B, H, nbh, nbw, D, span, span]
        return x.permute(0, 1, 2, 3, 5, 6, 4).reshape(bsz, heads, nbh, nbw, span * span, d)

    k_win, v_win = halo(k), halo(v)

    valid = F.pad(key_valid.reshape(bsz, gh, gw).to(torch.uint8), (r, wp - gw + r, r, hp - gh + r))
    valid = valid.unfold(1, span, blk).unfold(2, span, blk).reshape(bsz, nbh, nbw, span * span).bool()

    qi = torch.arange(blk)
    ku = torch.arange(span) - r
    drow = ku[None, :] - qi[:, None]  # [blk, span]
    near = drow.abs() <= r
    same = drow == 0
    in_window = (near[:, None, :, None] & near[None, :, None, :]).reshape(blk * blk, span * span)
    is_self = (same[:, None, :, None] & same[None, :, None, :]).reshape(blk * blk, span * span)

    allowed = (in_window & valid[:, :, :, None, :]) | is_self
    out = _softmax_attend(q_blocks, k_win, v_win, allowed.unsqueeze(1))

    out = out.view(bsz, heads, nbh, nbw, blk, blk, d).permute(0, 1, 2, 4, 3, 5, 6)
    out = out.reshape(bsz, heads, hp, wp, d)[:, :, :gh, :gw]
    return out.reshape(bsz, heads, t, d)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + LS * Attn(LN(x)), then + LS * MLP(LN(x))."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.width, eps=NORM_EPS)
        self.attn = Attention(cfg)
        self.ls1 = LayerScale(cfg.width, cfg.layerscale_init)
        self.norm2 = nn.LayerNorm(cfg.width, eps=NORM_EPS)
        self.mlp = SwiGLU(cfg.width, cfg.hidden_dim)
        self.ls2 = LayerScale(cfg.width, cfg.layerscale_init)

    def forward(self, batch: TokenBatch, window: Optional[int] = None) -> TokenBatch:
        x = batch.values
        h = x + self.ls1(self.attn(self.norm1(x), batch.positions, batch.grid, batch.valid_mask, window))
        h = h + self.ls2(self.mlp(self.norm2(h)))
        if batch.valid_mask is not None:
            h = torch.where(batch.valid_mask.unsqueeze(-1), h, x)
        return batch.with_values(h)


# --- Cost accounting ---

def _axis_neighbors(n: int, r: int) -> int:
    return sum(min(i + r, n - 1) - max(i - r, 0) + 1 for i in range(n))


def attention_pairs(grid_h: int, grid_w: int, radius: Optional[int] = None) -> int:
    """Number of (query, key) pairs scored: L^2 for full attention, the exact window count for SWA."""
    if radius is None:
        return (grid_h * grid_w) ** 2
    return _axis_neighbors(grid_h, radius) * _axis_neighbors(grid_w, radius)
