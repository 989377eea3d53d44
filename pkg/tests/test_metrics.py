import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradleak.metrics import C1, MetricReport, asr, format_float, mse, psnr, ssim

from helpers import loop_mse, loop_psnr, loop_ssim

unit = st.floats(0, 1)
image = hnp.arrays(np.float64, (2, 5, 5), elements=unit)


def test_mse_examples():
    x = np.random.default_rng(0).random((3, 4, 4))
    assert mse(x, x) == 0.0
    assert mse([0, 1], [1, 0]) == 1.0
    assert mse(np.zeros((2, 2)), np.full((2, 2), 0.5)) == 0.25


def test_ssim_examples():
    x = np.random.default_rng(1).random((3, 6, 6))
    assert ssim(x, x) == 1.0
    assert ssim(np.zeros((1, 4, 4)), np.ones((1, 4, 4))) == pytest.approx(C1 / (1 + C1), abs=1e-15)
    z = np.random.default_rng(2).normal(0, 1, (1, 8, 8))
    z -= z.mean()
    assert ssim(z, -z) < 0


def test_psnr_examples():
    a = np.zeros(100)
    b = a.copy()
    b[:] = 0.1  # mse 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    assert psnr([0.0], [1.0]) == 0.0
    assert psnr(a, a) == math.inf and format_float(psnr(a, a)) == "inf"


def test_metric_oracles_on_random_pairs():
    r = np.random.default_rng(77)
    for _ in range(100):
        a, b = r.random((4, 4)), r.random((4, 4))
        assert abs(mse(a, b) - loop_mse(a, b)) < 1e-9
        assert abs(ssim(a, b) - loop_ssim(a, b)) < 1e-9
        assert abs(psnr(a, b) - loop_psnr(a, b)) < 1e-9


def test_multichannel_ssim_averages_channels():
    r = np.random.default_rng(4)
    a, b = r.random((3, 5, 5)), r.random((3, 5, 5))
    per = [ssim(a[c], b[c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)
    assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=1e-9)


def test_windowed_ssim_oracle():
    r = np.random.default_rng(5)
    a, b = r.random((1, 6, 6)), r.random((1, 6, 6))
    w = 3
    scores = [loop_ssim(a[:, i:i + w, j:j + w], b[:, i:i + w, j:j + w])
              for i in range(4) for j in range(4)]
    assert ssim(a, b, "windowed", w) == pytest.approx(np.mean(scores), abs=1e-12)


@given(image, image)
def test_windowed_full_size_equals_global(a, b):
    assert abs(ssim(a, b, "windowed", 5) - ssim(a, b)) < 1e-9


@given(image, image)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-9
    assert -1 <= s <= 1
    assert -1 <= ssim(a, b, "windowed", 3) <= 1


@given(image, image)
def test_mse_zero_iff_equal(a, b):
    assert (mse(a, b) == 0) == bool(np.array_equal(a, b))


@given(st.floats(0, 0.5), st.floats(0, 0.5))
def test_psnr_strictly_decreasing_in_mse(s, t):
    if s == t or min(s, t) == 0:
        return
    z = np.zeros(4)
    lo, hi = sorted((s, t))
    assert psnr(z, np.full(4, lo)) > psnr(z, np.full(4, hi))


def test_errors():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ssim(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), "windowed", 5)
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), "gaussian")
    with pytest.raises(ValueError):
        asr([])
    with pytest.raises(ValueError):
        asr([0.5], 0.0)


def test_asr_examples():
    assert asr([1.0] * 7) == 1.0
    assert asr([0.1, 0.89999]) == 0.0
    values = [0.95] * 49 + [0.5] * 51
    assert asr(values, 0.9) == 0.49
    assert asr([0.9]) == 1.0


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(0.01, 1), st.floats(0.01, 1))
def test_asr_non_increasing_in_threshold(values, t1, t2):
    lo, hi = sorted((t1, t2))
    assert asr(values, hi) <= asr(values, lo)


def test_metric_report():
    rep = MetricReport(threshold=0.9)
    x = np.random.default_rng(8).random((1, 4, 4))
    rep.add("a", x, x)
    rep.add("b", x, 1 - x)
    assert rep.asr == 0.5
    rows = rep.to_csv_rows()
    assert rows[0]["psnr"] == "inf" and rows[0]["success"] == "true"
    assert rows[1]["success"] == "false"
    assert all(p.success == (p.ssim >= rep.threshold) for p in rep.per_image)


def test_format_float_nine_digits():
    assert format_float(1 / 3) == "0.333333333"
    assert format_float(123456789.123) == "123456789"
    assert format_float(-math.inf) == "-inf"
