from pathlib import Path
from typing import Any

import structlog
import torch

from src.domain.flowgen import FlowTransformer
from src.domain.metrics import reconstruct_image
from src.domain.runners.base import BaseRunner
from src.domain.runners.common import (
    load_autoencoder,
    load_dataset,
    loss_extractor,
    require_option,
    save_identity_checkpoint,
    seeded_autoencoder,
)
from src.domain.trainer import LatentSample, train_autoencoder, train_flow
from src.run_config import RunConfig

logger = structlog.get_logger()


class TrainAutoencoderRunner(BaseRunner):
    command = "train-ae"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        out_dir = Path(out_dir)
        if config.model.kind == "identity":
            path = save_identity_checkpoint(out_dir / "ae.vtkf", config)
            logger.warning("identity_model_not_trained", checkpoint=str(path))
            return {"checkpoint": str(path), "steps": 0}

        images = [img for img, _ in load_dataset(config)]
        model = seeded_autoencoder(config.model, config.seed)
        result = train_autoencoder(
            model, images, config.train, config.loss, config.seed, out_dir,
            extractor=loss_extractor(config),
            checkpoint_config={"config_hash": config.config_hash()},
        )
        return {"checkpoint": str(result.checkpoint), "log": str(result.log_path),
                "steps": result.steps, "final": result.final, "model": config.model.name}


def encode_dataset(ae: torch.nn.Module, config: RunConfig) -> list[LatentSample]:
    """Regularized latents of every dataset image at the evaluation budget."""
    samples = []
    for img, label in load_dataset(config):
        _, _, z = reconstruct_image(ae, img, config.eval.budget)
        samples.append(LatentSample(z.latents[0], z.grid, label))
    return samples


class TrainFlowRunner(BaseRunner):
    command = "train-flow"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        ae, _ = load_autoencoder(Path(require_option(options, "checkpoint")))
        samples = encode_dataset(ae, config)
        flow_cfg = config.flow.model_copy(update={"latent_channels": ae.cfg.latent_channels})
        labels = {s.label for s in samples}
        if max(labels) >= flow_cfg.class_count:
            raise ValueError(f"dataset label {max(labels)} exceeds flow.class_count {flow_cfg.class_count}")

        torch.manual_seed(config.seed)
        model = FlowTransformer(flow_cfg)
        result = train_flow(model, samples, config.train, config.seed, Path(out_dir),
                            checkpoint_config={"config_hash": config.config_hash(),
                                               "autoencoder": str(options["checkpoint"])})
        return {"checkpoint": str(result.checkpoint), "log": str(result.log_path),
                "steps": result.steps, "final": result.final}
