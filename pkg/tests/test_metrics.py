import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ssim_textbook
from tvae.errors import ConfigError, DataError, ShapeError
from tvae.metrics import (
    PSNR_IDENTICAL,
    CopyLastPredictor,
    EvalConfig,
    EvalReport,
    ModelPredictor,
    OraclePredictor,
    boundary_regions,
    evaluate,
    lpips_plugin,
    pairwise_diversity,
    psnr,
    sample_predictions,
    ssim,
    table_csv,
    uncertainty_map,
)
from tvae.model import TVAE

images = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


# -- PSNR ----------------------------------------------------------------------


def test_psnr_identical_sentinel():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == PSNR_IDENTICAL == math.inf


def test_psnr_constant_offset_is_20db():
    a = np.zeros((32, 32))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9


@given(images, images)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


# -- SSIM ----------------------------------------------------------------------


def test_ssim_matches_textbook_loop(rng):
    for _ in range(5):
        a = rng.random((20, 24))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_textbook(a, b)) < 1e-6


def test_ssim_matches_skimage(rng):
    from skimage.metrics import structural_similarity

    a = rng.random((40, 40))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref_map = structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, full=True
    )[1]
    # skimage averages over a cropped map; compare against the valid-window interior
    valid = ref_map[5:-5, 5:-5]
    assert abs(ssim(a, b) - valid.mean()) < 1e-6


@settings(max_examples=30)
@given(images)
def test_ssim_identity(a):
    assert ssim(a, a) == 1.0


def test_ssim_inverted_image_is_low():
    a = np.random.default_rng(1).random((32, 32))
    assert ssim(a, 1 - a) < 0.5


@settings(max_examples=30)
@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 - 1e-9 <= s <= 1 + 1e-9


def test_ssim_stack_averages_slices(rng):
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[i], b[i]) for i in range(3)]))


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- sample statistics ---------------------------------------------------------


def test_uncertainty_map():
    samples = np.stack([np.full((4, 4), v) for v in (0.0, 0.05, 0.2, 0.9)])
    u = uncertainty_map(samples, 0.1)
    np.testing.assert_array_equal(u, np.full((4, 4), 0.5))
    with pytest.raises(DataError):
        uncertainty_map(samples[:1])


def test_pairwise_diversity():
    s = np.stack([np.zeros(4), np.ones(4)])
    assert pairwise_diversity(s) == pytest.approx(2.0)
    assert pairwise_diversity(np.stack([np.ones(4)] * 3)) == 0.0


def test_boundary_regions_ring():
    yy, xx = np.mgrid[:40, :40]
    r = np.hypot(yy - 20, xx - 20)
    img = ((r > 10) & (r < 14)).astype(float)
    ann, mar = boundary_regions(img)
    assert ann[20, 32] and not ann[20, 20]
    assert mar[20, 20] and not mar[0, 0]
    assert not (ann & mar).any()


# -- LPIPS plugin ------------------------------------------------------------------


def test_lpips_plugin_variants():
    a = np.zeros((4, 4))
    assert lpips_plugin(a, a, None) is None
    assert lpips_plugin(a, a, lambda x, y: 0.5) == 0.5

    def broken(x, y):
        raise RuntimeError("no weights")

    assert lpips_plugin(a, a, broken) is None


# -- harness ---------------------------------------------------------------------


@pytest.fixture
def test_set(small_dataset):
    return small_dataset[1]


def test_oracle_predictor_is_perfect(test_set):
    rep = evaluate(OraclePredictor(), test_set, EvalConfig(n_samples=2))
    assert rep.aggregate["ssim"] == 1.0
    assert rep.aggregate["psnr"] == math.inf
    if rep.lesion_voxels:
        assert rep.lesion_region_mse == 0.0
    assert rep.diversity == 0.0


def test_copy_last_report_structure(test_set):
    rep = evaluate(CopyLastPredictor(), test_set, EvalConfig(n_samples=1))
    assert len(rep.per_sequence) == len(test_set) * 4
    assert {"subject_id", "slice_index", "has_tumor", "psnr", "ssim"} <= set(rep.per_sequence[0])
    assert rep.averaging == "per-slice"
    assert rep.diversity is None and rep.boundary_stability is None
    assert 10 < rep.aggregate["psnr"] < 60
    assert rep.lpips_status == "absent"


def test_lpips_status_recorded(test_set):
    ok = evaluate(CopyLastPredictor(), test_set, EvalConfig(n_samples=1), lpips=lambda a, b: 0.5)
    assert ok.lpips_status == "ok" and ok.aggregate["lpips"] == 0.5

    def broken(a, b):
        raise RuntimeError

    bad = evaluate(CopyLastPredictor(), test_set, EvalConfig(n_samples=1), lpips=broken)
    assert bad.lpips_status == "unavailable" and "lpips" not in bad.aggregate


def test_prior_mean_is_deterministic(small_cfg, test_set):
    torch.manual_seed(0)
    model = TVAE(small_cfg)
    a = evaluate(ModelPredictor(model), test_set, EvalConfig(n_samples=2, seed=0))
    b = evaluate(ModelPredictor(model), test_set, EvalConfig(n_samples=2, seed=9))
    assert [e["psnr"] for e in a.per_sequence] == [e["psnr"] for e in b.per_sequence]


def test_best_of_n_dominates_single_sample(small_cfg, test_set):
    torch.manual_seed(0)
    model = TVAE(small_cfg)
    rep = evaluate(ModelPredictor(model), test_set, EvalConfig(n_samples=3, sample_mode="prior_sample"))
    for e in rep.per_sequence:
        assert e["psnr_best_of_n"] >= e["psnr"]
    assert rep.boundary_stability is not None
    assert set(rep.boundary_stability) == {"annulus_variance", "marrow_variance", "annulus_below_marrow"}


def test_sample_predictions_shape(small_cfg):
    torch.manual_seed(0)
    model = TVAE(small_cfg)
    ctx = torch.rand(3, 2, 1, 64, 64)
    s = sample_predictions(model, ctx, 4, seed=1)
    assert s.shape == (4, 2, 1, 64, 64)
    assert torch.equal(s, sample_predictions(model, ctx, 4, seed=1))
    u = uncertainty_map(s.numpy())
    assert u.min() >= 0 and u.max() <= 1


def test_report_serialization():
    rep = EvalReport(aggregate={"psnr": 30.0, "ssim": 0.9}, lesion_region_mse=0.01)
    assert '"averaging": "per-slice"' in rep.to_json()
    csv_text = rep.to_csv("T-VAE")
    assert csv_text.splitlines()[0] == "Model,PSNR↑,SSIM↑,LPIPS↓,LesionMSE↓"
    assert csv_text.splitlines()[1] == "T-VAE,30,0.9,,0.01"
    assert table_csv([]).count("\n") == 1


def test_evaluate_errors():
    with pytest.raises(DataError):
        evaluate(CopyLastPredictor(), [], EvalConfig())
    with pytest.raises(ConfigError):
        EvalConfig(sample_mode="mode")
    with pytest.raises(ConfigError):
        EvalConfig(n_samples=0)
