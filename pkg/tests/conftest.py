import pytest
import torch

from src.domain.autoencoder import ModelConfig
from src.domain.imagedata import DatasetSpec, generate_synthetic


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_model_config():
    # width 32 / 2 heads -> head_dim 16, divisible by 4 for 2D RoPE
    return ModelConfig(scale="D", enc_depth=1, dec_depth=1, width=32, heads=2,
                       patch=8, latent_channels=4, layerscale_init=0.1)


@pytest.fixture(scope="module")
def tiny_images():
    spec = DatasetSpec(count=2, seed=3, size_range=(32, 32), aspect_range=(1, 1), class_count=2)
    return [img for img, _ in generate_synthetic(spec)]


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g
