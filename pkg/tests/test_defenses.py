import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradleak.defenses import (DefenseConfig, apply_defense, derive_seed, gaussian_noise,
                               gaussian_perturb, laplace_noise, laplace_perturb, level_to_scale,
                               topk_compress, uniform_open)
from gradleak.nn import GradientUpdate

N = 100_000


def _update(*arrays):
    return GradientUpdate(tuple((f"t{i}", np.asarray(a, dtype=np.float32))
                                for i, a in enumerate(arrays)))


def _zeros(n):
    return _update(np.zeros(n))


def test_uniform_source_is_open_interval():
    u = uniform_open(3, N)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 3 * np.sqrt(1 / 12 / N)


def test_laplace_inverse_cdf_formula():
    u = uniform_open(11, 10) - 0.5
    expected = -0.3 * np.sign(u) * np.log(1 - 2 * np.abs(u))
    assert np.allclose(laplace_noise(11, 10, 0.3), expected, rtol=1e-12, atol=0)


def test_laplace_statistics():
    b = 0.01
    d = laplace_perturb(_zeros(N), b, seed=5).flat().astype(np.float64)
    assert abs(d.mean()) <= 3 * b * np.sqrt(2) / np.sqrt(N)
    assert abs(d.var() / (2 * b * b) - 1) < 0.05


def test_gaussian_statistics():
    s = 0.02
    d = gaussian_perturb(_zeros(N), s, seed=5).flat().astype(np.float64)
    assert abs(d.mean()) <= 3 * s / np.sqrt(N)
    assert abs(d.var() / (s * s) - 1) < 0.05
    # fourth moment separates it from Laplace (kurtosis 3 vs 6)
    assert abs(np.mean(d ** 4) / d.var() ** 2 - 3) < 0.15


def test_zero_scale_is_bit_identical():
    u = _update(np.random.default_rng(0).normal(size=(3, 4)))
    assert laplace_perturb(u, 0.0, 1) is u
    assert gaussian_perturb(u, 0.0, 1) is u


def test_seed_determinism():
    u = _update(np.ones((5, 7)), np.arange(3))
    a = laplace_perturb(u, 0.1, 42)
    b = laplace_perturb(u, 0.1, 42)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors, b.tensors))
    assert np.array_equal(gaussian_noise(9, 101, 1.0), gaussian_noise(9, 101, 1.0))
    assert not np.array_equal(gaussian_noise(9, 100, 1.0), gaussian_noise(10, 100, 1.0))
    assert not np.array_equal(laplace_noise(9, 100, 1.0), laplace_noise(10, 100, 1.0))


def test_noise_additivity():
    u = _update(np.random.default_rng(1).normal(size=(4, 4)), np.ones(6))
    d = laplace_perturb(u, 0.05, 17).flat().astype(np.float64) - u.flat().astype(np.float64)
    assert np.allclose(d, laplace_noise(17, 22, 0.05), atol=1e-7)
    d = gaussian_perturb(u, 0.05, 17).flat().astype(np.float64) - u.flat().astype(np.float64)
    assert np.allclose(d, gaussian_noise(17, 22, 0.05), atol=1e-7)


def test_negative_scales_rejected():
    with pytest.raises(ValueError):
        laplace_perturb(_zeros(2), -1, 0)
    with pytest.raises(ValueError):
        gaussian_perturb(_zeros(2), -1, 0)


def test_topk_examples():
    out = topk_compress(_update([3, -5, 1]), 2 / 3)
    assert out["t0"].tolist() == [3, -5, 0]
    u = _update(np.random.default_rng(2).normal(size=(3, 3)))
    assert np.array_equal(topk_compress(u, 1.0)["t0"], u["t0"])
    assert np.count_nonzero(topk_compress(_zeros(10), 0.3)["t0"]) == 0


def test_topk_ties_keep_lower_index():
    assert topk_compress(_update([2, -2, 2, 1]), 0.5)["t0"].tolist() == [2, -2, 0, 0]
    assert topk_compress(_update([1, 1, 1]), 0.1)["t0"].tolist() == [1, 0, 0]


@given(hnp.arrays(np.float32, st.integers(1, 40), elements=st.floats(-5, 5, width=32)),
       st.floats(0.01, 1))
def test_topk_count_and_dominance(x, frac):
    out = topk_compress(_update(x), frac)["t0"]
    k = min(x.size, int(np.ceil(frac * x.size)))
    nz = np.count_nonzero(x)
    if nz >= k:
        assert np.count_nonzero(out) == k
    kept = out != 0
    assert np.array_equal(out[kept], x[kept])
    if kept.any() and (~kept).any():
        assert np.abs(x[kept]).min() >= np.abs(x[~kept]).max()


def test_topk_is_per_tensor():
    out = topk_compress(_update([10, 20], [0.1, 0.2, 0.3, 0.4]), 0.5)
    assert out["t0"].tolist() == [0, 20]
    assert np.allclose(out["t1"], [0, 0, 0.3, 0.4])
    with pytest.raises(ValueError):
        topk_compress(_zeros(3), 0.0)
    with pytest.raises(ValueError):
        topk_compress(_zeros(3), 1.5)


def test_level_to_scale():
    assert level_to_scale(100) == pytest.approx(0.01, abs=1e-15)
    assert level_to_scale(400) == pytest.approx(0.04, abs=1e-15)
    assert all(level_to_scale(a) < level_to_scale(a + 1) for a in range(1, 500))
    for bad in (0, -100):
        with pytest.raises(ValueError):
            level_to_scale(bad)


def test_defense_config():
    assert DefenseConfig("laplace", level=200).noise_scale == pytest.approx(0.02)
    assert DefenseConfig("laplace", scale=0.001).label() == "laplace:0.001"
    assert DefenseConfig("topk", keep_fraction=0.25).label() == "topk:0.25"
    assert DefenseConfig().noise_scale == 0.0
    for kw in (dict(kind="dp"), dict(kind="laplace"), dict(kind="laplace", scale=0.1, level=3),
               dict(kind="gaussian", scale=-1.0), dict(kind="topk", keep_fraction=0)):
        with pytest.raises(ValueError):
            DefenseConfig(**kw)


def test_apply_defense_dispatch():
    u = _update(np.arange(6.0))
    assert apply_defense(u, None) is u
    assert apply_defense(u, DefenseConfig()) is u
    lap = apply_defense(u, DefenseConfig("laplace", scale=0.1, seed=4))
    assert np.array_equal(lap.flat(), laplace_perturb(u, 0.1, 4).flat())
    g = apply_defense(u, DefenseConfig("gaussian", scale=0.1, seed=4), seed=8)
    assert np.array_equal(g.flat(), gaussian_perturb(u, 0.1, 8).flat())
    t = apply_defense(u, DefenseConfig("topk", keep_fraction=0.5))
    assert t.flat().tolist() == [0, 0, 0, 3, 4, 5]


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seeds = {derive_seed(0, c, r) for c in range(10) for r in range(10)}
    assert len(seeds) == 100
