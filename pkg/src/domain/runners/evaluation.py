from pathlib import Path
from typing import Any

import structlog
import torch

from src.domain.extractor import default_extractors
from src.domain.flowgen import generate_images
from src.domain.metrics import (
    LatencyReport,
    bench_latency,
    eval_reconstruction,
    generation_frechet,
    latency_exponents,
    reference_indices,
)
from src.domain.naflex import fit_grid
from src.domain.runners.base import BaseRunner
from src.domain.runners.common import load_autoencoder, load_dataset, load_flow, require_option, seeded_autoencoder
from src.run_config import RunConfig
from src.utils import make_generator

logger = structlog.get_logger()


class EvalRunner(BaseRunner):
    """Reconstruction metrics; with --flow also generation-side Fréchet distances."""
    command = "eval"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        ae, _ = load_autoencoder(Path(require_option(options, "checkpoint")))
        dataset = load_dataset(config)
        images = [img for img, _ in dataset]
        extractors = default_extractors(config.eval.extractor_seeds, tile=config.loss.tile,
                                    weights=config.eval.extractor_weights)
        report = eval_reconstruction(ae, images, extractors, config.config_hash(),
                                     budget=config.eval.budget, window=config.eval.window_radius,
                                     crop=config.eval.center_crop)

        if options.get("flow"):
            model, state, _ = load_flow(Path(options["flow"]))
            gen = make_generator(config.seed, 0xE7A1)
            labels = [label for _, label in dataset]
            ref_count = min(max(config.eval.sample_count, len(set(labels))), len(labels))
            ref = reference_indices(labels, ref_count, gen)
            side = config.data.synthetic.size_range[0]
            grid = fit_grid(side, side, ae.cfg.patch, config.eval.budget)
            sample_labels = torch.arange(config.eval.sample_count) % model.cfg.class_count
            samples = generate_images(ae, model, state, sample_labels, grid, config.eval.sample_steps,
                                      config.eval.cfg_scale, gen)
            report.frechet.update(generation_frechet(samples, [images[i] for i in ref], extractors))

        if options.get("bench"):
            report.latency_ms = bench_latency(ae, config.eval.bench_resolutions, config.eval.bench_modes,
                                              config.eval.bench_repeats, config.eval.bench_radius)
        return {"report": report.model_dump(mode="json")}


class BenchRunner(BaseRunner):
    """Decoder latency per (resolution, attention mode); a fresh seeded model when no checkpoint is given."""
    command = "bench"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        if options.get("checkpoint"):
            ae, _ = load_autoencoder(Path(options["checkpoint"]))
        else:
            ae = seeded_autoencoder(config.model, config.seed)
        rows = bench_latency(ae, config.eval.bench_resolutions, config.eval.bench_modes,
                             config.eval.bench_repeats, config.eval.bench_radius,
                             make_generator(config.seed, 0xBE4C))
        report = LatencyReport(latency_ms=rows, exponents=latency_exponents(rows),
                               config_hash=config.config_hash())
        logger.info("bench_completed", cells=len(rows), exponents=report.exponents)
        return {"report": report.model_dump(mode="json")}
