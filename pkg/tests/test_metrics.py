import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import linalg

from casdm.errors import ParameterError, ShapeError
from casdm.metrics import (
    PSNR_CAP,
    MetricsReport,
    RandomConvFeatures,
    SegCounts,
    frechet_feature_distance,
    frechet_from_features,
    max_ms_ssim_scales,
    ms_ssim,
    psnr,
    quality_report,
    render_quality_table,
    segmentation_scores,
)


def test_psnr_identity_is_cap():
    x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_closed_form():
    x = np.zeros((3, 4, 4))
    y = np.full((3, 4, 4), 0.2)
    assert psnr(x, y) == pytest.approx(10 * np.log10(4 / 0.04), abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(x, y[:2])


def _ssim_loop(x, y, data_range=2.0):
    """Single-window SSIM of an 11x11 patch by explicit sums."""
    size, sigma = 11, 1.5
    g = np.exp(-((np.arange(size) - 5) ** 2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    mx, my = (win * x).sum(), (win * y).sum()
    vx = (win * x * x).sum() - mx**2
    vy = (win * y * y).sum() - my**2
    cxy = (win * x * y).sum() - mx * my
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    return (2 * mx * my + c1) / (mx**2 + my**2 + c1) * (2 * cxy + c2) / (vx + vy + c2)


def test_single_scale_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (1, 11, 11))
    y = np.clip(x + rng.normal(0, 0.3, x.shape), -1, 1)
    assert ms_ssim(x, y, scales=1) == pytest.approx(_ssim_loop(x[0], y[0]), abs=1e-12)


def test_ms_ssim_identity_and_bounds():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (3, 32, 32))
    assert ms_ssim(x, x, scales=2) == pytest.approx(1.0, abs=1e-6)
    y = rng.uniform(-1, 1, (3, 32, 32))
    v = ms_ssim(x, y, scales=2)
    assert 0.0 <= v < 0.5
    noisy = np.clip(x + rng.normal(0, 0.05, x.shape), -1, 1)
    assert ms_ssim(x, noisy, 2) > ms_ssim(x, np.clip(x + rng.normal(0, 0.5, x.shape), -1, 1), 2)


def test_ms_ssim_scale_limits():
    assert max_ms_ssim_scales(32, 32) == 2
    assert max_ms_ssim_scales(176, 176) == 5
    with pytest.raises(ParameterError):
        ms_ssim(np.zeros((3, 32, 32)), np.zeros((3, 32, 32)), scales=3)


def test_ffd_self_distance_is_zero():
    feats = np.random.default_rng(2).normal(size=(50, 8))
    assert frechet_from_features(feats, feats) <= 1e-4
    images = torch.rand(20, 3, 16, 16) * 2 - 1
    assert frechet_feature_distance(images, images, RandomConvFeatures(0)) <= 1e-4


def test_ffd_one_dimensional_closed_form():
    rng = np.random.default_rng(3)
    a, b = rng.normal(1.0, 2.0, 40), rng.normal(-0.5, 0.7, 60)
    expect = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert frechet_from_features(a[:, None], b[:, None]) == pytest.approx(expect, abs=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_ffd_matches_scipy_sqrtm(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(90, 5)) @ rng.normal(size=(5, 5)) + 0.3
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    expect = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * linalg.sqrtm(ca @ cb).real)
    assert frechet_from_features(a, b) == pytest.approx(expect, rel=1e-8)


def test_ffd_symmetric_and_needs_two_samples():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(30, 4)), rng.normal(size=(25, 4)) + 1
    assert frechet_from_features(a, b) == pytest.approx(frechet_from_features(b, a), rel=1e-9)
    with pytest.raises(ParameterError):
        frechet_from_features(a[:1], b)


def test_random_features_are_seeded_and_frozen():
    x = torch.rand(4, 3, 16, 16)
    f0, f0b, f1 = RandomConvFeatures(0), RandomConvFeatures(0), RandomConvFeatures(1)
    assert torch.equal(f0(x), f0b(x)) and not torch.equal(f0(x), f1(x))
    assert f0(x).shape == (4, 128)
    assert not any(p.requires_grad for p in f0.parameters())


def test_half_overlap_squares_iou_is_one_third():
    gt = np.zeros((8, 8), dtype=int)
    pred = np.zeros((8, 8), dtype=int)
    gt[0:4, 0:4] = 1
    pred[0:4, 2:6] = 1
    iou, dice = segmentation_scores(pred, gt, classes=[1])
    assert iou[1] == 1 / 3
    assert dice[1] == 0.5


def _iou_loop(pred, gt, c):
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += (p == c) and (g == c)
        union += (p == c) or (g == c)
    return inter / union if union else None


@settings(max_examples=100, deadline=None)
@given(pair=arrays(np.int64, (2, 6, 6), elements=st.integers(0, 3)))
def test_segmentation_scores_match_loop_and_dice_identity(pair):
    pred, gt = pair
    iou, dice = segmentation_scores(pred, gt, num_classes=4)
    for c in range(4):
        ref = _iou_loop(pred, gt, c)
        if ref is None:
            assert c not in iou
            continue
        assert iou[c] == pytest.approx(ref, abs=1e-12)
        assert dice[c] == pytest.approx(2 * iou[c] / (1 + iou[c]), abs=1e-10)


def test_micro_accumulation_over_maps():
    rng = np.random.default_rng(7)
    preds, gts = rng.integers(0, 3, (4, 5, 5)), rng.integers(0, 3, (4, 5, 5))
    counts = SegCounts(3)
    for p, g in zip(preds, gts):
        counts.update(p, g)
    batch = segmentation_scores(preds, gts, num_classes=3)
    assert counts.scores() == batch


def test_report_roundtrip_and_table():
    r = MetricsReport("arm", 1.5, 0.5, 20.0, {3: 0.25}, {3: 0.4})
    back = MetricsReport.from_dict(json.loads(r.to_json()))
    assert back == r and back.miou == 0.25
    table = render_quality_table([r])
    assert table.splitlines()[0].startswith("| Method | FFD")
    assert "| arm | 1.500 | 0.5000 | 20.00 |" in table


def test_quality_report_self_comparison():
    imgs = torch.rand(6, 3, 32, 32) * 2 - 1
    rep = quality_report(imgs, imgs.clone(), "self")
    assert rep.ffd <= 1e-4 and rep.mean_ms_ssim == pytest.approx(1.0, abs=1e-6) and rep.mean_psnr == PSNR_CAP


def test_class_color_agreement():
    from casdm.metrics import class_color_agreement

    ref = np.array([[0, 0, 0], [255, 0, 0]])
    labels = np.zeros((1, 2, 2), dtype=int)
    labels[0, 0] = 1
    img = np.full((1, 3, 2, 2), -1.0)
    img[0, 0, 0, :] = 1.0
    assert class_color_agreement(img, labels, ref) == (1.0, {})
    frac, conf = class_color_agreement(-img, labels, ref)
    assert frac == 0.0 and conf == {(0, 1): 1, (1, 0): 1}
