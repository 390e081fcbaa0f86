import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from dfmrestore.evaluation import (
    CorrelationRecord,
    MetricsReport,
    check_arms,
    correlation_report,
    dfm_error_correlation,
    pearson,
)
from dfmrestore.metrics import psnr, ssim, to_luma, to_uint8
from dfmrestore.restoration import ModelConfig
from dfmrestore.training import TrainingConfig


def naive_psnr(a, b):
    total, count = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for c in range(a.shape[2]):
                d = float(a[i, j, c]) - float(b[i, j, c])
                total += d * d
                count += 1
    return 10 * math.log10(255.0**2 / (total / count))


def reference_ssim(a, b):
    return structural_similarity(
        to_luma(a), to_luma(b), gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=255
    )


# ------------------------------------------------------------------ PSNR


def test_psnr_constant_images():
    a = np.full((8, 8, 3), 100, np.uint8)
    b = np.full((8, 8, 3), 110, np.uint8)
    assert psnr(a, b) == pytest.approx(10 * math.log10(650.25), abs=1e-12)
    assert psnr(a, b) == pytest.approx(28.131, abs=5e-4)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).integers(0, 256, (6, 6, 3))
    assert psnr(a, a) == math.inf


def test_psnr_matches_naive_loop():
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 256, (2, 17, 13, 3))
    assert abs(psnr(a, b) - naive_psnr(a, b)) < 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_are_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 256, (2, 16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


# ------------------------------------------------------------------ SSIM


def fixed_images():
    rng = np.random.default_rng(42)
    yy, xx = np.mgrid[0:48, 0:64]
    smooth = np.stack([xx * 3, yy * 4, (xx + yy) * 2], -1).clip(0, 255)
    checker = ((xx // 4 + yy // 4) % 2 * 200 + 20)[..., None].repeat(3, -1)
    noise = rng.integers(0, 256, (48, 64, 3))
    rings = (127 + 120 * np.sin(np.hypot(xx - 32, yy - 24) / 3))[..., None].repeat(3, -1)
    blocks = np.kron(rng.integers(0, 256, (6, 8, 3)), np.ones((8, 8, 1)))
    return [smooth, checker, noise, rings, blocks]


@pytest.mark.parametrize("idx", range(5))
def test_ssim_matches_reference_implementation(idx):
    rng = np.random.default_rng(idx)
    a = fixed_images()[idx].astype(np.float64)
    b = np.clip(a + rng.normal(0, 12, a.shape), 0, 255).round()
    assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-4


def test_ssim_identical_is_one():
    a = fixed_images()[2]
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_image_is_low():
    a = fixed_images()[3]
    assert ssim(a, 255 - a) < 0.5


def test_ssim_window_too_large():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_to_uint8_rounds_and_clamps():
    assert to_uint8(np.array([-0.2, 0.5, 1.3, 0.2])).tolist() == [0, 128, 255, 51]


# ------------------------------------------------------------------ correlation


def test_self_correlation_is_one():
    e = np.random.default_rng(0).random((3, 32, 32))
    rec = dfm_error_correlation(e, e, patch=8)
    assert rec.r == pytest.approx(1.0) and not rec.degenerate
    assert rec.grid == (4, 4) and len(rec.pairs) == 16


def test_constant_error_is_degenerate():
    e = np.random.default_rng(0).random((3, 32, 32))
    rec = dfm_error_correlation(e, np.full((3, 32, 32), 0.3), patch=8)
    assert rec.r == 0.0 and rec.degenerate


def test_error_is_resized_to_map_resolution():
    e = np.random.default_rng(0).random((3, 16, 16))
    err = np.kron(e.mean(0), np.ones((2, 2)))
    rec = dfm_error_correlation(e, err, patch=4)
    assert rec.grid == (4, 4) and rec.r > 0.95


def test_patch_larger_than_map():
    with pytest.raises(ValueError):
        dfm_error_correlation(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), patch=9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pearson_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 20))
    perm = rng.permutation(20)
    assert pearson(a, b)[0] == pytest.approx(pearson(a[perm], b[perm])[0], abs=1e-12)
    r = pearson(a, b)[0]
    assert -1 <= r <= 1
    assert r == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_correlation_report_rows():
    e = np.random.default_rng(0).random((3, 16, 16))
    rep = correlation_report(dfm_error_correlation(e, e, patch=4))
    assert len(rep.rows) == 16
    assert set(rep.rows[0]) == {"patch_x", "patch_y", "dfm_mean", "err_mean"}


def test_correlation_record_range():
    with pytest.raises(ValueError):
        CorrelationRecord([], 1.5, False, 4, (0, 0))


# ------------------------------------------------------------------ reports


def test_report_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        MetricsReport(rows=[{"psnr_db": -1.0}])
    with pytest.raises(ValueError):
        MetricsReport(rows=[{"ssim": 1.5}])
    rep = MetricsReport(rows=[{"clip_id": "a", "psnr_db": 30.0, "ssim": 0.9}, {"clip_id": "b", "psnr_db": math.inf, "ssim": 1.0}])
    assert rep.mean("psnr_db") == 30.0
    text = rep.write_csv(tmp_path / "m.csv", ["clip_id", "psnr_db", "ssim"]).read_text().splitlines()
    assert text == ["clip_id,psnr_db,ssim", "a,30.000000,0.900000", "b,inf,1.000000"]


def test_ablation_arms_must_match():
    t = TrainingConfig(stage="2", iterations=10)
    m = ModelConfig(n_dmm=2, n_recon=1, channels=8)
    check_arms((t, m), (t, ModelConfig(n_dmm=2, n_recon=1, channels=8, dfm_enabled=False)))
    with pytest.raises(ValueError, match="model"):
        check_arms((t, m), (t, ModelConfig(n_dmm=3, n_recon=1, channels=8)))
    with pytest.raises(ValueError, match="training"):
        check_arms((t, m), (TrainingConfig(stage="2", iterations=11), m))
