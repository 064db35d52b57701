"""
Optimization loop for the autoencoder and the flow model: AdamW with
decoupled weight decay and global-norm clipping, warmup + cosine learning
rate, the two-stage token-budget schedule, JSONL step logs and VTKF
checkpoints.
"""
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import structlog
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.domain.errors import NonFiniteError, TrainingAbortedError
from src.domain.extractor import FrozenExtractor
from src.domain.flowgen import FlowState, FlowTransformer, ema_update, estimate_flops, fm_loss
from src.domain.imagedata import Image
from src.domain.losses import LossWeights, total_loss
from src.domain.naflex import GridFit, PackedImage, pack_image, random_crop
from src.domain.params import ParameterStore
from src.infrastructure.checkpoint import save_checkpoint
from src.utils import make_generator

logger = structlog.get_logger()


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    total_steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    peak_lr: float = Field(default=5e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(default=0.05, ge=0)
    eps: float = Field(default=1e-8, gt=0)
    clip_norm: float = Field(default=1.0, gt=0)
    warmup_fraction: float = Field(default=0.01, ge=0, lt=1)
    stage_split: float = Field(default=0.9, gt=0, lt=1)
    budgets: tuple[int, int] = (256, 1024)
    regime: Literal["naflex", "fixed"] = "naflex"
    random_crop: bool = False
    crop_min_area: float = Field(default=0.5, gt=0, le=1)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    single_threaded: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not 0 < self.budgets[0] < self.budgets[1]:
            raise ValueError(f"budgets must be positive and strictly increasing, got {self.budgets}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        return self


# --- Optimizer and schedules ---

def make_optimizer(params: ParameterStore, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params.as_dict().values()), lr=cfg.peak_lr, betas=cfg.betas,
                             eps=cfg.eps, weight_decay=cfg.weight_decay, foreach=False)


@torch.no_grad()
def adamw_step(params: ParameterStore, optimizer: torch.optim.Optimizer, lr: float, clip_norm: float) -> float:
    """
    Clip gradients to clip_norm (global L2), then apply one AdamW update at `lr`.

    Missing gradients count as zeros, so those parameters still decay.
    Returns the pre-clip gradient norm.
    """
    for name, p in params.items():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        if not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteError(f"grad:{name}")
    norm = torch.nn.utils.clip_grad_norm_(list(params.as_dict().values()), clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    params.step += 1
    return float(norm)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Linear warmup over warmup_fraction of training, then cosine from peak_lr to 0 at total_steps.

    Training steps run 1..total_steps, so the final step always gets lr 0 and a
    one-step run leaves the weights unchanged.
    """
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = cfg.warmup_fraction * total
    if step < warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / (total - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def budget_at(step: int, cfg: TrainConfig) -> int:
    """First budget while step/total < stage_split, the second from the split on."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.budgets[0] if step / cfg.total_steps < cfg.stage_split else cfg.budgets[1]


# --- Loops ---

@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    final: dict[str, float]


class _BatchStream:
    """Batches of indices from a per-epoch seeded permutation, without replacement within an epoch."""

    def __init__(self, size: int, batch_size: int, seed: int):
        self.size = size
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = -1
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < min(self.batch_size, self.size):
            if not self._order:
                self.epoch += 1
                self._order = torch.randperm(self.size, generator=make_generator(self.seed, self.epoch)).tolist()
            out.append(self._order.pop(0))
        return out


def _buckets(items: Sequence[Any], grid_of) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, item in enumerate(items):
        groups[grid_of(item)].append(i)
    return dict(sorted(groups.items()))


def _prepare(images: Sequence[Image], indices: list[int], step: int, budget: int,
             patch: int, cfg: TrainConfig, seed: int) -> list[PackedImage]:
    packed = []
    for i in indices:
        img = images[i]
        if cfg.random_crop:
            img = random_crop(img, make_generator(seed, step, i), cfg.crop_min_area)
        packed.append(pack_image(img, patch, budget, cfg.regime))
    return packed


def _open_log(out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    return path, path.open("w", encoding="utf-8")


def _write_log(handle, record: dict[str, Any]) -> None:
    handle.write(json.dumps(record, sort_keys=True) + "\n")
    handle.flush()
    logger.debug("train_step", **record)


def train_autoencoder(model: torch.nn.Module, images: Sequence[Image], cfg: TrainConfig,
                      weights: LossWeights, seed: int, out_dir: Path,
                      extractor: Optional[FrozenExtractor] = None,
                      checkpoint_config: Optional[dict[str, Any]] = None) -> TrainResult:
    """
    Train the autoencoder on `images`; writes train_log.jsonl and ae.vtkf into out_dir.

    Each step packs the batch at the scheduled budget, groups images by token
    grid, and averages per-image composite losses over the whole batch.
    """
    if not images:
        raise ValueError("cannot train on an empty dataset")
    params = ParameterStore.from_module(model)
    if len(params) == 0:
        raise ValueError("model has no trainable parameters")
    if cfg.single_threaded:
        torch.set_num_threads(1)

    out_dir = Path(out_dir)
    ckpt_path = out_dir / "ae.vtkf"
    ckpt_config = {"kind": "autoencoder", "model": model.cfg.model_dump(mode="json"),
                   **(checkpoint_config or {})}
    stream = _BatchStream(len(images), cfg.batch_size, seed)
    opt = make_optimizer(params, cfg)
    last_good: Optional[str] = None
    breakdown: dict[str, float] = {}
    budget_prev = None

    model.train()
    log_path, log = _open_log(out_dir, "train_log.jsonl")
    with log:
        for step in range(1, cfg.total_steps + 1):
            lr = lr_at(step, cfg)
            budget = budget_at(step, cfg)
            if budget != budget_prev:
                logger.info("budget_stage", step=step, budget=budget)
                budget_prev = budget

            packed = _prepare(images, stream.next(), step, budget, model.cfg.patch, cfg, seed)
            noise = make_generator(seed, step, 0x7E9)
            tiles = make_generator(seed, step, 0x711E)
            sums: dict[str, float] = defaultdict(float)
            try:
                loss = 0.0
                for grid, members in _buckets(packed, lambda pk: pk.grid.shape).items():
                    tokens = torch.stack([packed[i].tokens for i in members])
                    recon, _, reg_loss = model(tokens, packed[members[0]].grid, noise)
                    for row, i in enumerate(members):
                        image_loss, terms = total_loss(packed[i].canvas, recon[row], reg_loss, weights,
                                                       extractor, packed[i].pad_mask, tiles)
                        loss = loss + image_loss
                        for k, v in terms.items():
                            sums[k] += v
                loss = loss / len(packed)
                params.zero_grad()
                loss.backward()
                grad_norm = adamw_step(params, opt, lr, cfg.clip_norm)
            except NonFiniteError as e:
                logger.error("training_aborted", step=step, term=e.name, checkpoint=last_good)
                raise TrainingAbortedError(step, e, last_good) from e

            breakdown = {k: v / len(packed) for k, v in sums.items()}
            _write_log(log, {
                "step": step, "lr": lr, "budget": budget,
                "loss_total": breakdown["total"], "loss_char": breakdown["char"],
                "loss_ssim": breakdown["ssim"], "loss_perc": breakdown["perc"],
                "loss_reg": breakdown["reg"], "grad_norm": grad_norm,
            })
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                save_checkpoint(ckpt_path, {**ckpt_config, "step": step}, model.state_dict())
                last_good = str(ckpt_path)

    save_checkpoint(ckpt_path, {**ckpt_config, "step": cfg.total_steps}, model.state_dict())
    model.eval()
    logger.info("training_completed", kind="autoencoder", steps=cfg.total_steps,
                loss_total=breakdown.get("total"))
    return TrainResult(ckpt_path, log_path, cfg.total_steps, breakdown)


@dataclass(frozen=True)
class LatentSample:
    latents: torch.Tensor  # [N, c], post-regularizer
    grid: GridFit
    label: int


def train_flow(model: FlowTransformer, samples: Sequence[LatentSample], cfg: TrainConfig, seed: int,
               out_dir: Path, checkpoint_config: Optional[dict[str, Any]] = None) -> TrainResult:
    """Flow-matching training on precomputed latents; writes flow_log.jsonl and flow.vtkf (live + EMA)."""
    if not samples:
        raise ValueError("cannot train on an empty latent set")
    if cfg.single_threaded:
        torch.set_num_threads(1)

    flow_cfg = model.cfg
    state = FlowState.from_module(model)
    out_dir = Path(out_dir)
    ckpt_path = out_dir / "flow.vtkf"
    ckpt_config = {"kind": "flow", "flow": flow_cfg.model_dump(mode="json"), **(checkpoint_config or {})}
    stream = _BatchStream(len(samples), cfg.batch_size, seed)
    opt = make_optimizer(state.params, cfg)
    last_good: Optional[str] = None
    flops = 0
    loss_value = float("nan")

    model.train()
    log_path, log = _open_log(out_dir, "flow_log.jsonl")
    with log:
        for step in range(1, cfg.total_steps + 1):
            lr = lr_at(step, cfg)
            batch = [samples[i] for i in stream.next()]
            gen = make_generator(seed, step, 0xF10)
            try:
                loss = 0.0
                for grid, members in _buckets(batch, lambda s: s.grid.shape).items():
                    z1 = torch.stack([batch[i].latents for i in members])
                    labels = torch.tensor([batch[i].label for i in members])
                    loss = loss + len(members) * fm_loss(model, z1, labels, grid, gen, flow_cfg.cfg_dropout)
                    flops += int(estimate_flops(flow_cfg, grid[0] * grid[1], len(members))["training"])
                loss = loss / len(batch)
                if not bool(torch.isfinite(loss)):
                    raise NonFiniteError("loss_fm", float(loss))
                state.params.zero_grad()
                loss.backward()
                grad_norm = adamw_step(state.params, opt, lr, cfg.clip_norm)
            except NonFiniteError as e:
                logger.error("training_aborted", step=step, term=e.name, checkpoint=last_good)
                raise TrainingAbortedError(step, e, last_good) from e

            ema_update(state, flow_cfg.ema_decay)
            state.step = step
            loss_value = float(loss)
            _write_log(log, {"step": step, "lr": lr, "loss_fm": loss_value,
                             "grad_norm": grad_norm, "train_flops": flops})
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                save_checkpoint(ckpt_path, {**ckpt_config, "step": step}, state.checkpoint_tensors())
                last_good = str(ckpt_path)

    save_checkpoint(ckpt_path, {**ckpt_config, "step": cfg.total_steps}, state.checkpoint_tensors())
    model.eval()
    logger.info("training_completed", kind="flow", steps=cfg.total_steps, loss_fm=loss_value)
    return TrainResult(ckpt_path, log_path, cfg.total_steps, {"loss_fm": loss_value, "train_flops": float(flops)})
