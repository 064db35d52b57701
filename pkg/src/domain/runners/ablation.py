"""Loss and latent-regularizer ablation grids: one trained model and one evaluation per row."""
from pathlib import Path
from typing import Any

import structlog

from src.domain.autoencoder import DEFAULT_REG_PARAM
from src.domain.extractor import default_extractors
from src.domain.losses import LOSS_PRESETS, LossWeights
from src.domain.metrics import eval_reconstruction, pareto_frontier
from src.domain.runners.base import BaseRunner
from src.domain.runners.common import load_dataset, loss_extractor, seeded_autoencoder
from src.domain.trainer import train_autoencoder
from src.run_config import RunConfig

logger = structlog.get_logger()

REGULARIZERS = ("kl", "tanh_noise", "layernorm")


def _train_and_eval(config: RunConfig, out_dir: Path, images) -> dict[str, Any]:
    model = seeded_autoencoder(config.model, config.seed)
    result = train_autoencoder(model, images, config.train, config.loss, config.seed, out_dir,
                               extractor=loss_extractor(config), checkpoint_config={"config_hash": config.config_hash()})
    extractors = default_extractors(config.eval.extractor_seeds, tile=config.loss.tile,
                                    weights=config.eval.extractor_weights)
    report = eval_reconstruction(model, images, extractors, config.config_hash(),
                                 budget=config.eval.budget, window=config.eval.window_radius)
    return {"checkpoint": str(result.checkpoint), "psnr_db": report.psnr_db, "ssim": report.ssim,
            "frechet": report.frechet, "latent_std": report.latent_std,
            "config_hash": report.config_hash}


class AblateLossRunner(BaseRunner):
    command = "ablate-loss"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        images = [img for img, _ in load_dataset(config)]
        rows = []
        for name, preset in LOSS_PRESETS.items():
            weights = LossWeights(**{**preset.model_dump(), "tile": config.loss.tile,
                                     "tiles_per_image": config.loss.tiles_per_image})
            row_config = config.model_copy(update={"loss": weights})
            logger.info("ablation_row_started", grid="loss", row=name)
            rows.append({"preset": name, **_train_and_eval(row_config, Path(out_dir) / name, images)})

        # distortion (higher PSNR is better) against perception (lower FDD is better)
        points = [(-r["psnr_db"], r["frechet"].get("fdd", 0.0)) for r in rows]
        frontier = pareto_frontier(points)
        for i, row in enumerate(rows):
            row["pareto"] = i in frontier
        return {"rows": rows}


class AblateRegRunner(BaseRunner):
    command = "ablate-reg"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        images = [img for img, _ in load_dataset(config)]
        rows = []
        for reg in REGULARIZERS:
            model_cfg = config.model.with_(regularizer=reg, reg_param=DEFAULT_REG_PARAM[reg])
            row_config = config.model_copy(update={"model": model_cfg})
            logger.info("ablation_row_started", grid="regularizer", row=reg)
            rows.append({"regularizer": reg, "reg_param": model_cfg.reg_param,
                         **_train_and_eval(row_config, Path(out_dir) / reg, images)})
        return {"rows": rows}
