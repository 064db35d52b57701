"""Helpers shared by the runners: dataset resolution and checkpoint (re)loading."""
import re
from pathlib import Path
from typing import Any, Optional

import torch

from src.domain.autoencoder import ModelConfig, build_autoencoder
from src.domain.errors import CheckpointError
from src.domain.extractor import FrozenExtractor
from src.domain.flowgen import FlowConfig, FlowState, FlowTransformer
from src.domain.imagedata import Image, generate_synthetic, load_directory, save_image
from src.infrastructure.checkpoint import load_checkpoint, save_checkpoint
from src.run_config import RunConfig

_LABEL_PATTERN = re.compile(r"_c(\d+)$")


def dataset_filename(index: int, label: int) -> str:
    return f"{index:05d}_c{label}.ppm"


def label_from_name(path: Path) -> int:
    """Class label encoded as a '_c<k>' stem suffix; 0 when absent."""
    match = _LABEL_PATTERN.search(path.stem)
    return int(match.group(1)) if match else 0


def load_dataset(config: RunConfig) -> list[tuple[Image, int]]:
    """Images of data.dir (sorted by name) or, when unset, the synthetic set."""
    if config.data.dir is None:
        return generate_synthetic(config.data.synthetic)
    return [(img, label_from_name(p)) for p, img in load_directory(config.data.dir)]


def write_dataset(samples: list[tuple[Image, int]], directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, (img, label) in enumerate(samples):
        path = directory / dataset_filename(index, label)
        save_image(img, path)
        paths.append(path)
    return paths


def seeded_autoencoder(cfg: ModelConfig, seed: int) -> torch.nn.Module:
    torch.manual_seed(seed)
    return build_autoencoder(cfg)


def loss_extractor(config: RunConfig) -> Optional[FrozenExtractor]:
    if config.loss.w_perc == 0:
        return None
    extractor = FrozenExtractor(seed=config.eval.extractor_seeds.get("fdd", 0), tile=config.loss.tile)
    if "fdd" in config.eval.extractor_weights:
        extractor.load_weights(config.eval.extractor_weights["fdd"])
    return extractor


def save_identity_checkpoint(path: Path, config: RunConfig) -> Path:
    return save_checkpoint(path, {"kind": "autoencoder", "model": config.model.model_dump(mode="json"),
                                  "config_hash": config.config_hash(), "step": 0}, {})


def load_autoencoder(path: Path) -> tuple[torch.nn.Module, dict[str, Any]]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise CheckpointError(f"{path} is not an autoencoder checkpoint")
    model = build_autoencoder(ModelConfig.model_validate(meta["model"]))
    if len(list(model.parameters())) > 0:
        model.load_state_dict(tensors)
    model.eval()
    return model, meta


def load_flow(path: Path) -> tuple[FlowTransformer, FlowState, dict[str, Any]]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise CheckpointError(f"{path} is not a flow checkpoint")
    model = FlowTransformer(FlowConfig.model_validate(meta["flow"]))
    state = FlowState.from_module(model)
    state.load_checkpoint_tensors(tensors)
    model.eval()
    return model, state, meta


def require_option(options: dict[str, Any], name: str) -> Any:
    value = options.get(name)
    if value is None:
        raise ValueError(f"--{name.replace('_', '-')} is required for this command")
    return value
