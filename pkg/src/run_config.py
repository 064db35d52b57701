from contextvars import ContextVar
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from src.domain.autoencoder import ModelConfig
from src.domain.flowgen import FlowConfig
from src.domain.imagedata import DatasetSpec
from src.domain.losses import LossWeights
from src.domain.trainer import TrainConfig
from src.utils import canonicalize_params

# Set only while RunConfig.load() resolves a TOML file.
_CONFIG_FILE: ContextVar[Optional[Path]] = ContextVar("vtk_config_file", default=None)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    budget: int = Field(default=64, ge=1)
    window_radius: Optional[int] = Field(default=None, ge=0)
    center_crop: Optional[int] = Field(default=None, ge=1)
    # extractor id -> seed; "fdd" is the loss extractor, "fid" an independent one
    extractor_seeds: dict[str, int] = {"fdd": 0, "fid": 1}
    # extractor id -> VTKF file with trained weights
    extractor_weights: dict[str, Path] = {}
    sample_count: int = Field(default=1000, ge=2)
    sample_steps: int = Field(default=50, ge=1)
    cfg_scale: float = Field(default=4.0, ge=0)
    bench_resolutions: list[int] = [64, 128, 256]
    bench_modes: list[Literal["full", "swa"]] = ["full", "swa"]
    bench_repeats: int = Field(default=5, ge=1)
    bench_radius: int = Field(default=8, ge=0)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # A directory of images; when unset the synthetic generator is used.
    dir: Optional[Path] = None
    synthetic: DatasetSpec = DatasetSpec()


class RunConfig(BaseSettings):
    """
    Experiment configuration with sections {model, train, loss, flow, eval, data}.

    Priority: explicit overrides (CLI flags) > environment (VTK_SEED,
    VTK_<SECTION>__<KEY>) > TOML file > desk-scale defaults.
    """
    model_config = SettingsConfigDict(
        env_prefix="VTK_", env_nested_delimiter="__", extra="forbid")

    seed: int = 0
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    loss: LossWeights = LossWeights()
    flow: FlowConfig = FlowConfig()
    eval: EvalConfig = EvalConfig()
    data: DataConfig = DataConfig()

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        sources: list[PydanticBaseSettingsSource] = [init_settings, env_settings]
        path = _CONFIG_FILE.get()
        if path is not None:
            sources.append(TomlConfigSettingsSource(settings_cls, toml_file=path))
        return tuple(sources)

    @classmethod
    def load(cls, path: Optional[Path] = None,
             overrides: Optional[dict[str, Any]] = None) -> "RunConfig":
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        token = _CONFIG_FILE.set(Path(path) if path is not None else None)
        try:
            return cls(**(overrides or {}))
        finally:
            _CONFIG_FILE.reset(token)

    def canonical(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        _, digest = canonicalize_params(self.canonical())
        return digest
