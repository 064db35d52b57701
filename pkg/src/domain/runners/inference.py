from pathlib import Path
from typing import Any

import structlog
import torch

from src.domain.flowgen import generate_images
from src.domain.imagedata import Image, save_image
from src.domain.metrics import psnr, reconstruct_image
from src.domain.naflex import fit_grid
from src.domain.runners.base import BaseRunner
from src.domain.runners.common import load_autoencoder, load_dataset, load_flow, require_option
from src.run_config import RunConfig
from src.utils import make_generator

logger = structlog.get_logger()


class ReconstructRunner(BaseRunner):
    """Round-trips every dataset image; --window-radius switches the decoder to sliding-window attention."""
    command = "reconstruct"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        ae, _ = load_autoencoder(Path(require_option(options, "checkpoint")))
        window = config.eval.window_radius
        directory = Path(out_dir) / "recon"
        directory.mkdir(parents=True, exist_ok=True)
        rows = []
        for index, (img, label) in enumerate(load_dataset(config)):
            original, recon, _ = reconstruct_image(ae, img, config.eval.budget, window)
            path = directory / f"{index:05d}_c{label}.ppm"
            save_image(Image.from_tensor(recon, clamp=True), path)
            rows.append({"index": index, "path": str(path), "psnr_db": psnr(original, recon)})
        logger.info("reconstruct_completed", count=len(rows), window_radius=window)
        return {"dir": str(directory), "window_radius": window, "images": rows}


class SampleRunner(BaseRunner):
    command = "sample"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        ae, _ = load_autoencoder(Path(require_option(options, "checkpoint")))
        model, state, _ = load_flow(Path(require_option(options, "flow")))
        count = options.get("count") or config.eval.sample_count
        side = options.get("size") or config.data.synthetic.size_range[0]
        grid = fit_grid(side, side, ae.cfg.patch, config.eval.budget)
        labels = torch.arange(count) % model.cfg.class_count
        images = generate_images(ae, model, state, labels, grid, config.eval.sample_steps,
                                 config.eval.cfg_scale, make_generator(config.seed, 0x5A3))
        directory = Path(out_dir) / "samples"
        directory.mkdir(parents=True, exist_ok=True)
        for index, (img, label) in enumerate(zip(images, labels.tolist())):
            save_image(img, directory / f"{index:05d}_c{label}.ppm")
        return {"dir": str(directory), "count": len(images), "steps": config.eval.sample_steps,
                "cfg_scale": config.eval.cfg_scale}
