import pytest
import torch
from pydantic import ValidationError
from torch.autograd import gradcheck

from src.domain.autoencoder import (
    ENCODER_ABLATIONS,
    Autoencoder,
    IdentityAutoencoder,
    LatentGrid,
    ModelConfig,
    compression_ratio,
    count_parameters,
    encode_packed,
    make_config,
    regularize_latent,
)
from src.domain.errors import ShapeError
from src.domain.imagedata import Image
from src.domain.naflex import fit_grid, pack_image


@pytest.mark.parametrize("patch,channels,ratio", [
    (16, 64, 12), (16, 32, 24), (16, 16, 48), (8, 16, 12), (32, 128, 24), (32, 64, 48),
])
def test_compression_ratio_table(patch, channels, ratio):
    assert compression_ratio(patch, channels) == ratio


def test_model_names():
    assert make_config("T", enc_depth=4, patch=16, latent_channels=64).name == "Td4-T/16x64"
    assert ModelConfig().name == "Dd2-D/8x16"


def test_model_config_rejects_bad_heads():
    with pytest.raises(ValidationError):
        ModelConfig(width=24, heads=4)  # head_dim 6
    with pytest.raises(ValidationError):
        ModelConfig(width=100, heads=3)


def test_model_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        ModelConfig(depth=3)


@pytest.mark.parametrize("scale,expected", [
    ("B", 88e6), ("L", 302e6), ("G", 1.1e9), ("T", 4.5e9),
])
def test_decoder_parameter_counts(scale, expected):
    count = count_parameters(make_config(scale))
    assert 0.8 * expected <= count.decoder <= 1.2 * expected


def test_linear_encoder_parameter_count():
    count = count_parameters(ENCODER_ABLATIONS["linear"])
    assert 0.8 * 49e3 <= count.encoder <= 1.2 * 49e3
    assert count_parameters(ENCODER_ABLATIONS["d4"]).encoder > count.encoder


def test_count_matches_instantiated_model(tiny_model_config):
    model = Autoencoder(tiny_model_config)
    count = count_parameters(tiny_model_config)
    assert count.total == sum(p.numel() for p in model.parameters())


def _grid(gh, gw):
    return fit_grid(gh * 8, gw * 8, 8, gh * gw)


def test_kl_closed_forms():
    grid = _grid(1, 2)
    mu = torch.zeros(1, 2, 4)
    zero, loss0 = regularize_latent(LatentGrid(mu, grid, torch.zeros_like(mu)), "kl", 1.0)
    assert float(loss0) == 0.0
    assert zero.logvar is None

    _, loss_half = regularize_latent(LatentGrid(torch.ones(1, 2, 4), grid, torch.zeros(1, 2, 4)), "kl", 1.0)
    assert float(loss_half) == pytest.approx(0.5)


def test_kl_requires_logvar():
    with pytest.raises(ShapeError):
        regularize_latent(LatentGrid(torch.zeros(1, 1, 4), _grid(1, 1)), "kl", 0.01)


def test_kl_clamps_logvar():
    z = LatentGrid(torch.zeros(1, 1, 2), _grid(1, 1), torch.full((1, 1, 2), 1e4))
    _, loss = regularize_latent(z, "kl", 1.0)
    assert torch.isfinite(loss)


def test_layernorm_latents_are_standardized():
    z = LatentGrid(3.0 + 5.0 * torch.randn(2, 6, 16), _grid(2, 3))
    out, loss = regularize_latent(z, "layernorm", 0.0)

    assert float(loss) == 0.0
    assert torch.allclose(out.latents.mean(-1), torch.zeros(2, 6), atol=1e-5)
    assert torch.allclose(out.latents.var(-1, unbiased=False), torch.ones(2, 6), atol=1e-4)


def test_tanh_noise_range(gen):
    z = LatentGrid(100.0 * torch.randn(1, 4, 8), _grid(2, 2))
    clean, _ = regularize_latent(z, "tanh_noise", 0.1, training=False)
    assert float(clean.latents.abs().max()) <= 1.0

    noisy, _ = regularize_latent(z, "tanh_noise", 0.1, generator=gen, training=True)
    assert not torch.equal(noisy.latents, clean.latents)


def test_encode_decode_shapes(tiny_model_config):
    model = Autoencoder(tiny_model_config)
    packed = pack_image(Image(torch.rand(30, 20, 3)), 8, 16)
    z = encode_packed(model, packed)

    assert z.latents.shape == (1, packed.grid.tokens, 4)
    canvas = model.decode(model.regularize(z, training=False)[0])
    assert canvas.shape == (1, packed.grid.grid_h * 8, packed.grid.grid_w * 8, 3)


@pytest.mark.parametrize("regularizer, expected", [("kl", 0.01), ("tanh_noise", 0.01), ("layernorm", 0.0)])
def test_regularizer_strength_defaults(regularizer, expected):
    assert ModelConfig.model_validate({"regularizer": regularizer}).reg_param == expected
    assert ModelConfig().with_(regularizer=regularizer).reg_param == expected


def test_explicit_regularizer_strength_is_kept():
    assert ModelConfig(regularizer="kl", reg_param=0.5).reg_param == 0.5
    assert ModelConfig(regularizer="kl", reg_param=0.5).with_(width=64).reg_param == 0.5


def test_configured_kl_regularizer_is_active(tiny_model_config):
    model = Autoencoder(tiny_model_config.with_(regularizer="kl"))
    z = LatentGrid(torch.ones(1, 4, 4), _grid(2, 2), logvar=torch.zeros(1, 4, 4))
    _, reg_loss = model.regularize(z, training=True)
    assert float(reg_loss) > 0


def test_kl_head_emits_logvar(tiny_model_config):
    model = Autoencoder(tiny_model_config.with_(regularizer="kl", reg_param=0.01))
    packed = pack_image(Image(torch.rand(16, 16, 3)), 8, 4)
    z = model.encode(packed.tokens, packed.grid)
    assert z.logvar is not None and z.logvar.shape == z.latents.shape


def test_decode_rejects_wrong_channels(tiny_model_config):
    model = Autoencoder(tiny_model_config)
    with pytest.raises(ShapeError):
        model.decode(LatentGrid(torch.zeros(1, 4, 7), _grid(2, 2)))


def test_linear_encoder_forward(tiny_model_config):
    model = Autoencoder(tiny_model_config.with_(enc_depth=0))
    packed = pack_image(Image(torch.rand(16, 16, 3)), 8, 4)
    recon, z, reg = model(packed.tokens, packed.grid)
    assert recon.shape == (1, 16, 16, 3)
    assert float(reg) == 0.0


def test_sliding_window_decode_runs(tiny_model_config):
    model = Autoencoder(tiny_model_config)
    grid = _grid(4, 4)
    z = LatentGrid(torch.randn(1, 16, 4), grid)
    assert model.decode(z, window=1).shape == (1, 32, 32, 3)


def test_identity_autoencoder_is_exact():
    model = IdentityAutoencoder(ModelConfig(kind="identity", patch=8))
    packed = pack_image(Image(torch.rand(24, 16, 3)), 8, 64)
    recon, _, _ = model(packed.tokens, packed.grid)
    assert torch.equal(recon[0], packed.canvas)
    assert count_parameters(ModelConfig(kind="identity")).total == 0


@pytest.mark.parametrize("gh,gw", [(1, 1), (1, 2), (2, 2), (2, 3), (3, 1)])
def test_encode_decode_gradcheck(tiny_model_config, gh, gw):
    model = Autoencoder(tiny_model_config.with_(patch=2, width=16, heads=2)).double()
    grid = fit_grid(gh * 2, gw * 2, 2, gh * gw)
    tokens = torch.rand(1, gh * gw, 12, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda t: model.encode(t, grid).latents, (tokens,), eps=1e-5, atol=1e-6, rtol=1e-4)

    z = torch.randn(1, gh * gw, 4, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda t: model.decode(LatentGrid(t, grid)), (z,), eps=1e-5, atol=1e-6, rtol=1e-4)
