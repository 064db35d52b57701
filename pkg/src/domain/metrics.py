"""
Reconstruction and generation metrics: PSNR, SSIM, Fréchet distance over
frozen extractor features, and the decoder latency benchmark.
"""
import math
import statistics
import time
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict, field_validator
from torch import nn

from src.domain.autoencoder import LatentGrid
from src.domain.backbone import attention_pairs
from src.domain.errors import ShapeError
from src.domain.extractor import FrozenExtractor
from src.domain.imagedata import Image, center_crop
from src.domain.losses import ssim_loss
from src.domain.naflex import GridFit, pack_image

logger = structlog.get_logger()

PSNR_CAP_DB = 100.0
WARMUP_RUNS = 2


def psnr(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> float:
    """10 log10(1 / MSE) in dB on unit dynamic range over valid pixels, capped at 100 dB."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    err = (x.to(torch.float64) - x_hat.to(torch.float64)).pow(2)
    if mask is not None:
        if not bool(mask.any()):
            raise ShapeError("mask has no valid pixels")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def ssim_metric(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> float:
    return 1.0 - float(ssim_loss(x.to(torch.float64), x_hat.to(torch.float64), mask))


# --- Fréchet distance ---

@dataclass(frozen=True)
class FeatureStats:
    mean: torch.Tensor  # [d] float64
    cov: torch.Tensor  # [d, d] float64
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("feature statistics need at least 2 samples")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance {tuple(self.cov.shape)} does not match mean dimension {d}")
        if not torch.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def stats_from_features(features: torch.Tensor) -> FeatureStats:
    """Two-pass mean and unbiased covariance of [N, d] features."""
    feats = features.to(torch.float64)
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 feature rows, got {n}")
    mean = feats.sum(dim=0) / n
    centered = feats - mean
    cov = centered.T @ centered / (n - 1)
    return FeatureStats(mean, 0.5 * (cov + cov.T), n)


def merge_stats(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Statistics of the union of two disjoint sample sets."""
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    scatter = (a.cov * (a.count - 1) + b.cov * (b.count - 1)
               + torch.outer(delta, delta) * (a.count * b.count / n))
    cov = scatter / (n - 1)
    return FeatureStats(mean, 0.5 * (cov + cov.T), n)


def _psd_sqrt(mat: torch.Tensor) -> torch.Tensor:
    vals, vecs = torch.linalg.eigh(mat)
    return (vecs * vals.clamp(min=0).sqrt()) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), via symmetric eigendecompositions."""
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    for s in (a, b):
        if not (torch.isfinite(s.mean).all() and torch.isfinite(s.cov).all()):
            raise ValueError("feature statistics are not finite")
    # Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), the inner matrix being symmetric PSD
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = torch.linalg.eigvalsh(0.5 * (inner + inner.T)).clamp(min=0).sqrt().sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + torch.trace(a.cov) + torch.trace(b.cov) - 2 * cross)
    return max(0.0, value)


def collect_stats(images: Sequence[torch.Tensor], extractor: FrozenExtractor) -> FeatureStats:
    if len(images) == 0:
        raise ValueError("cannot collect feature statistics of an empty image set")
    return stats_from_features(extractor.pooled(list(images)))


# --- Reports ---

class LatencyRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resolution: int
    mode: Literal["full", "swa"]
    median: Optional[float]
    p90: Optional[float]
    pairs: int
    tokens: int
    status: Literal["ok", "oom"] = "ok"


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    psnr_db: float
    ssim: float
    frechet: dict[str, float]
    latent_std: float
    latency_ms: list[LatencyRow] = []
    config_hash: str

    @field_validator("psnr_db", "ssim", "latent_std")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("metric is not finite")
        return v

    @field_validator("frechet")
    @classmethod
    def _finite_frechet(cls, v: dict[str, float]) -> dict[str, float]:
        if not all(math.isfinite(x) for x in v.values()):
            raise ValueError("Fréchet distance is not finite")
        return v


@torch.no_grad()
def reconstruct_image(ae: nn.Module, img: Image, budget: int, window: Optional[int] = None):
    """(resized original, clamped reconstruction, regularized latents) over the content region."""
    packed = pack_image(img, ae.cfg.patch, budget)
    z = ae.encode(packed.tokens, packed.grid)
    z_reg, _ = ae.regularize(z, training=False)
    canvas = ae.decode(z_reg, window=window)[0]
    fit = packed.grid
    original = packed.canvas[:fit.resized_h, :fit.resized_w]
    recon = canvas[:fit.resized_h, :fit.resized_w].clamp(0, 1)
    return original, recon, z_reg


def eval_reconstruction(ae: nn.Module, images: Sequence[Image], extractors: dict[str, FrozenExtractor],
                        config_hash: str, budget: int = 64, window: Optional[int] = None,
                        crop: Optional[int] = None) -> EvalReport:
    if not images:
        raise ValueError("cannot evaluate an empty dataset")
    ae.eval()
    psnrs, ssims, originals, recons, latents = [], [], [], [], []
    for img in images:
        if crop is not None:
            img = center_crop(img, crop)
        original, recon, z = reconstruct_image(ae, img, budget, window)
        psnrs.append(psnr(original, recon))
        ssims.append(ssim_metric(original, recon))
        originals.append(original)
        recons.append(recon)
        latents.append(z.latents.reshape(-1))

    frechet = {}
    if len(images) >= 2:
        for name, extractor in extractors.items():
            frechet[name] = frechet_distance(collect_stats(originals, extractor),
                                             collect_stats(recons, extractor))
    else:
        logger.warning("frechet_skipped", reason="fewer than 2 images", images=len(images))

    report = EvalReport(
        psnr_db=statistics.fmean(psnrs),
        ssim=statistics.fmean(ssims),
        frechet=frechet,
        latent_std=float(torch.cat(latents).to(torch.float64).std()),
        config_hash=config_hash,
    )
    logger.info("eval_completed", images=len(images), psnr_db=report.psnr_db, ssim=report.ssim)
    return report


def generation_frechet(samples: Sequence[Image], references: Sequence[Image],
                       extractors: dict[str, FrozenExtractor]) -> dict[str, float]:
    """Fréchet distance between generated samples and a reference set, per extractor, keyed 'g<id>'."""
    gen = [s.pixels for s in samples]
    ref = [r.pixels for r in references]
    return {f"g{name}": frechet_distance(collect_stats(ref, ex), collect_stats(gen, ex))
            for name, ex in extractors.items()}


def reference_indices(labels: Sequence[int], count: int, generator: Optional[torch.Generator] = None) -> list[int]:
    """Reference set containing every class at least once, the remainder drawn at random without replacement."""
    classes = sorted(set(labels))
    if count < len(classes):
        raise ValueError(f"reference set of {count} cannot cover {len(classes)} classes")
    if count > len(labels):
        raise ValueError(f"reference set of {count} exceeds dataset size {len(labels)}")
    chosen = []
    for cls in classes:
        members = [i for i, label in enumerate(labels) if label == cls]
        pick = int(torch.randint(len(members), (1,), generator=generator))
        chosen.append(members[pick])
    rest = [i for i in range(len(labels)) if i not in set(chosen)]
    order = torch.randperm(len(rest), generator=generator).tolist()
    chosen.extend(rest[i] for i in order[:count - len(chosen)])
    return sorted(chosen)


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of points not dominated by any other (both coordinates lower-is-better)."""
    frontier = []
    for i, (a, b) in enumerate(points):
        dominated = any(
            (c <= a and d <= b) and (c < a or d < b)
            for j, (c, d) in enumerate(points) if j != i
        )
        if not dominated:
            frontier.append(i)
    return frontier


# --- Latency ---

def _is_oom(err: BaseException) -> bool:
    oom_type = getattr(torch, "OutOfMemoryError", None)
    if oom_type is not None and isinstance(err, oom_type):
        return True
    return isinstance(err, (MemoryError, RuntimeError)) and "out of memory" in str(err).lower()


@torch.no_grad()
def bench_latency(ae: nn.Module, resolutions: Sequence[int], modes: Sequence[str], repeats: int = 5,
                  radius: int = 8, generator: Optional[torch.Generator] = None) -> list[LatencyRow]:
    """Decoder wall-clock (ms) per (square resolution, attention mode), after WARMUP_RUNS untimed runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ae.eval()
    p, c = ae.cfg.patch, ae.cfg.latent_channels
    rows = []
    for res in resolutions:
        side = math.ceil(res / p)
        grid = GridFit(side, side, res, res, 1.0, res, res)
        for mode in modes:
            if mode not in ("full", "swa"):
                raise ValueError(f"unknown attention mode '{mode}'")
            window = radius if mode == "swa" else None
            pairs = attention_pairs(side, side, window)
            try:
                z = LatentGrid(torch.randn((1, grid.tokens, c), generator=generator), grid)
                for _ in range(WARMUP_RUNS):
                    ae.decode_tokens(z, window=window)
                times = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    ae.decode_tokens(z, window=window)
                    times.append((time.perf_counter() - start) * 1000.0)
            except Exception as e:
                if not _is_oom(e):
                    raise
                logger.warning("bench_oom", resolution=res, mode=mode, error=str(e))
                rows.append(LatencyRow(resolution=res, mode=mode, median=None, p90=None,
                                       pairs=pairs, tokens=grid.tokens, status="oom"))
                continue
            rows.append(LatencyRow(
                resolution=res, mode=mode, median=float(np.median(times)),
                p90=float(np.percentile(times, 90)), pairs=pairs, tokens=grid.tokens,
            ))
            logger.info("bench_cell", resolution=res, mode=mode, median_ms=rows[-1].median, pairs=pairs)
    return rows


def scaling_exponent(tokens: Sequence[float], times: Sequence[float]) -> float:
    """Slope of the least-squares line through (log tokens, log time)."""
    if len(tokens) != len(times) or len(tokens) < 2:
        raise ValueError("need at least two (tokens, time) points")
    slope, _ = np.polyfit(np.log(np.asarray(tokens, dtype=np.float64)),
                          np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope)


class LatencyReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    latency_ms: list[LatencyRow]
    # mode -> log-log slope of median latency against token count
    exponents: dict[str, float] = {}
    config_hash: str


def latency_exponents(rows: Sequence[LatencyRow]) -> dict[str, float]:
    out = {}
    for mode in sorted({r.mode for r in rows}):
        ok = [r for r in rows if r.mode == mode and r.status == "ok"]
        if len(ok) >= 2:
            out[mode] = scaling_exponent([r.tokens for r in ok], [r.median for r in ok])
    return out
