import math

import mpmath
import pytest
import torch

from src.domain.autoencoder import Autoencoder, IdentityAutoencoder, ModelConfig
from src.domain.backbone import attention_pairs
from src.domain.errors import ShapeError
from src.domain.extractor import FrozenExtractor
from src.domain.losses import ssim_loss
from src.domain.metrics import (
    PSNR_CAP_DB,
    EvalReport,
    FeatureStats,
    LatencyRow,
    bench_latency,
    eval_reconstruction,
    frechet_distance,
    latency_exponents,
    merge_stats,
    pareto_frontier,
    psnr,
    reference_indices,
    scaling_exponent,
    ssim_metric,
    stats_from_features,
)


def _random_stats(d, n, seed):
    g = torch.Generator().manual_seed(seed)
    mix = torch.randn(d, d, generator=g, dtype=torch.float64)
    feats = torch.randn(n, d, generator=g, dtype=torch.float64) @ mix + torch.randn(d, generator=g, dtype=torch.float64)
    return stats_from_features(feats)


def test_psnr_known_value():
    x = torch.zeros(4, 4, 3)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-5)


def test_psnr_identical_is_capped():
    x = torch.rand(8, 8, 3)
    assert psnr(x, x) == PSNR_CAP_DB


def test_psnr_decreases_with_error():
    x = torch.rand(8, 8, 3)
    noise = torch.randn(8, 8, 3)
    values = [psnr(x, x + s * noise) for s in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_psnr_respects_mask():
    x = torch.zeros(4, 4, 3)
    y = x.clone()
    y[2:] = 1.0
    mask = torch.zeros(4, 4, 3, dtype=torch.bool)
    mask[:2] = True
    assert psnr(x, y, mask) == PSNR_CAP_DB
    with pytest.raises(ShapeError):
        psnr(x, y, torch.zeros_like(mask))


def test_ssim_metric_complements_loss():
    x = torch.rand(16, 16, 3)
    y = (x + 0.05 * torch.randn(16, 16, 3)).clamp(0, 1)
    assert ssim_metric(x, y) == pytest.approx(1.0 - float(ssim_loss(x.double(), y.double())), abs=1e-12)
    assert ssim_metric(x, x) == pytest.approx(1.0, abs=1e-9)


def test_frechet_of_identical_stats_is_zero():
    s = _random_stats(6, 50, 0)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-8)


def test_frechet_of_shifted_gaussians():
    a = FeatureStats(torch.zeros(1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64), 10)
    b = FeatureStats(torch.full((1,), 3.0, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64), 10)
    assert frechet_distance(a, b) == pytest.approx(9.0, abs=1e-12)


def test_frechet_matches_high_precision_oracle():
    a, b = _random_stats(4, 40, 1), _random_stats(4, 40, 2)
    with mpmath.workdps(40):
        sa = mpmath.matrix(a.cov.tolist())
        sb = mpmath.matrix(b.cov.tolist())
        cross = mpmath.sqrtm(sa * sb)
        trace = sum(sa[i, i] + sb[i, i] - 2 * cross[i, i] for i in range(4))
        diff = (a.mean - b.mean).tolist()
        expected = float(sum(mpmath.mpf(v) ** 2 for v in diff) + mpmath.re(trace))
    assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-6, abs=1e-6)


def test_frechet_is_symmetric():
    a, b = _random_stats(5, 30, 3), _random_stats(5, 30, 4)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-8)


def test_frechet_rejects_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(_random_stats(3, 10, 0), _random_stats(4, 10, 0))


def test_stats_need_two_samples():
    with pytest.raises(ValueError):
        stats_from_features(torch.zeros(1, 3))


def test_merge_stats_equals_pooled_computation():
    g = torch.Generator().manual_seed(7)
    feats = torch.randn(30, 5, generator=g, dtype=torch.float64) * 3 + 1
    merged = merge_stats(stats_from_features(feats[:12]), stats_from_features(feats[12:]))
    whole = stats_from_features(feats)
    assert merged.count == 30
    assert torch.allclose(merged.mean, whole.mean, atol=1e-12)
    assert torch.allclose(merged.cov, whole.cov, atol=1e-12)


def test_stats_are_permutation_invariant():
    g = torch.Generator().manual_seed(8)
    feats = torch.randn(20, 4, generator=g, dtype=torch.float64)
    a = stats_from_features(feats)
    b = stats_from_features(feats[torch.randperm(20, generator=g)])
    assert torch.allclose(a.mean, b.mean, atol=1e-12)
    assert torch.allclose(a.cov, b.cov, atol=1e-12)


def test_identity_autoencoder_reconstructs_perfectly(tiny_images):
    ae = IdentityAutoencoder(ModelConfig(kind="identity", patch=4))
    extractors = {"fdd": FrozenExtractor(seed=0, width=16, depth=2, heads=2, tile=16)}
    report = eval_reconstruction(ae, tiny_images, extractors, config_hash="abc", budget=64)

    assert report.psnr_db == PSNR_CAP_DB
    assert report.ssim == pytest.approx(1.0, abs=1e-9)
    assert report.frechet["fdd"] == pytest.approx(0.0, abs=1e-6)
    assert report.config_hash == "abc"


def test_eval_reports_are_identical_across_runs(tiny_model_config, tiny_images):
    def run():
        torch.manual_seed(0)
        ae = Autoencoder(tiny_model_config)
        extractors = {"fdd": FrozenExtractor(seed=0, width=16, depth=2, heads=2, tile=16),
                      "fid": FrozenExtractor(seed=1, width=16, depth=2, heads=2, tile=16)}
        return eval_reconstruction(ae, tiny_images, extractors, config_hash="abc", budget=16).model_dump()

    first = run()
    assert set(first["frechet"]) == {"fdd", "fid"}
    assert first == run()


def test_single_image_eval_skips_frechet(tiny_images):
    ae = IdentityAutoencoder(ModelConfig(kind="identity", patch=4))
    extractors = {"fdd": FrozenExtractor(seed=0, width=16, depth=2, heads=2, tile=16)}
    report = eval_reconstruction(ae, tiny_images[:1], extractors, config_hash="abc", budget=64)
    assert report.frechet == {}


def test_eval_report_rejects_non_finite():
    with pytest.raises(ValueError):
        EvalReport(psnr_db=math.nan, ssim=1.0, frechet={}, latent_std=0.1, config_hash="x")


def test_bench_reports_every_cell(tiny_model_config):
    ae = Autoencoder(tiny_model_config)
    rows = bench_latency(ae, [32, 64], ["full", "swa"], repeats=2, radius=1)

    assert [(r.resolution, r.mode) for r in rows] == [(32, "full"), (32, "swa"), (64, "full"), (64, "swa")]
    for row in rows:
        side = row.resolution // tiny_model_config.patch
        assert row.tokens == side * side
        assert row.status == "ok" and row.median > 0 and row.p90 >= row.median
        radius = 1 if row.mode == "swa" else None
        assert row.pairs == attention_pairs(side, side, radius)
    assert rows[3].pairs < rows[2].pairs


def test_bench_rejects_unknown_mode(tiny_model_config):
    with pytest.raises(ValueError):
        bench_latency(Autoencoder(tiny_model_config), [32], ["sparse"], repeats=1)


def test_scaling_exponent_of_power_law():
    tokens = [16, 64, 256, 1024]
    assert scaling_exponent(tokens, [t ** 2 * 0.001 for t in tokens]) == pytest.approx(2.0, abs=1e-9)


def test_latency_exponents_skip_oom_rows():
    rows = [
        LatencyRow(resolution=32, mode="full", median=1.0, p90=1.0, pairs=16, tokens=4),
        LatencyRow(resolution=64, mode="full", median=4.0, p90=4.0, pairs=256, tokens=16),
        LatencyRow(resolution=128, mode="full", median=None, p90=None, pairs=4096, tokens=64, status="oom"),
        LatencyRow(resolution=32, mode="swa", median=1.0, p90=1.0, pairs=16, tokens=4),
    ]
    exps = latency_exponents(rows)
    assert exps == {"full": pytest.approx(1.0)}


def test_reference_indices_cover_every_class():
    labels = [0, 0, 1, 1, 1, 2, 2, 0, 1, 2]
    chosen = reference_indices(labels, 5, torch.Generator().manual_seed(0))
    assert len(chosen) == len(set(chosen)) == 5
    assert {labels[i] for i in chosen} == {0, 1, 2}
    with pytest.raises(ValueError):
        reference_indices(labels, 2)
    with pytest.raises(ValueError):
        reference_indices(labels, 11)


def test_pareto_frontier():
    points = [(1.0, 5.0), (2.0, 2.0), (3.0, 3.0), (5.0, 1.0), (2.0, 2.0)]
    assert pareto_frontier(points) == [0, 1, 3, 4]
