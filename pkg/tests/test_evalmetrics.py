import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from animlab.evalmetrics import (
    MetricReport,
    boundary_discontinuity,
    evaluate_clip,
    flicker,
    l1,
    psnr,
    ssim,
    write_report,
)

rng = np.random.default_rng(0)


def test_l1_examples():
    a = rng.uniform(-1, 1, (2, 3, 8, 8))
    assert l1(a, a) == 0.0
    assert l1(a, a + 0.5) == pytest.approx(0.5)


def test_l1_half_mask():
    a = np.zeros((1, 3, 4, 4))
    mask = np.zeros((4, 4), bool)
    mask[:, :2] = True
    b = a + 0.5 * mask
    assert l1(a, b, mask) == pytest.approx(0.5)
    assert l1(a, b) == pytest.approx(0.25)


def test_l1_errors():
    with pytest.raises(ValueError):
        l1(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        l1(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 4)), np.ones((3, 3)))


def test_psnr_examples():
    a = rng.uniform(-1, 1, (3, 16, 16))
    assert psnr(a, a) == math.inf
    binary = (rng.random((3, 16, 16)) > 0.5).astype(float)
    assert psnr(binary, 1 - binary, value_range=(0, 1)) == pytest.approx(0.0, abs=1e-12)
    assert psnr(np.full((3, 8, 8), 0.5), np.full((3, 8, 8), 0.6), value_range=(0, 1)) == pytest.approx(20.0)
    # the same pair expressed in [-1, 1] units
    assert psnr(np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.2)) == pytest.approx(20.0)


def test_ssim_identical_is_one():
    a = rng.uniform(-1, 1, (2, 3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("size", [11, 16, 32])
def test_ssim_matches_skimage(size):
    a = rng.uniform(0, 1, (size, size))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ssim(a, b, value_range=(0, 1)) == pytest.approx(ref, abs=1e-10)


def test_ssim_averages_planes_like_skimage_channels():
    a = rng.uniform(0, 1, (3, 20, 20))
    b = rng.uniform(0, 1, (3, 20, 20))
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=0)
    assert ssim(a, b, value_range=(0, 1)) == pytest.approx(ref, abs=1e-10)


def test_ssim_needs_window_sized_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_ssim_bounds_on_random_pairs():
    r = np.random.default_rng(5)
    for _ in range(1000):
        a, b = r.uniform(-1, 1, (2, 11, 11))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_are_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, (2, 2, 3, 12, 12))
    assert l1(a, b) == l1(b, a)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_flicker_examples():
    assert flicker(np.ones((4, 3, 2, 2))) == 0.0
    alternating = np.stack([np.full((3, 2, 2), float(i % 2)) for i in range(6)])
    assert flicker(alternating) == pytest.approx(1.0)
    ramp = np.stack([np.full((3, 2, 2), i / 4) for i in range(5)])
    assert flicker(ramp) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        flicker(np.zeros((1, 3, 2, 2)))


def test_boundary_discontinuity_selects_pairs():
    v = np.stack([np.full((3, 2, 2), float(i) ** 2) for i in range(5)])
    assert boundary_discontinuity(v, [0]) == 1.0
    assert boundary_discontinuity(v, [1, 3]) == pytest.approx((3 + 7) / 2)


def test_report_csv_and_table(tmp_path):
    gt = rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32)
    pose = np.zeros((4, 6, 16, 16), np.float32)
    pose[:, 1, 4:8, 4:8] = 1
    report = MetricReport()
    report.add("a", evaluate_clip(gt, gt, pose))
    report.add("b", evaluate_clip(np.clip(gt + 0.1, -1, 1), gt, pose))
    write_report(report, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "clip,l1,l1_fg,psnr,ssim,flicker"
    assert lines[-1].startswith("mean,") and len(lines) == 4
    assert "mean" in report.table()
    assert report.rows[0]["l1_fg"] == 0.0 and report.rows[1]["l1_fg"] > 0
