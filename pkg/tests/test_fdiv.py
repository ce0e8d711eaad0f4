import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tomrl.fdiv import (CHI_SQUARED, KL, conjugate, conjugate_prime, divergence, divergence_from_ratios,
                        f_value, get_divergence)

DIVS = [CHI_SQUARED, KL]


def test_generator_values():
    """f(1) = 0 for both kinds; chi-squared f(3) = 4; KL uses 0 log 0 = 0."""
    assert f_value(CHI_SQUARED, 1.0) == 0.0
    assert f_value(CHI_SQUARED, 3.0) == 4.0
    assert f_value(KL, 1.0) == 0.0
    assert f_value(KL, 0.0) == 0.0
    with pytest.raises(ValueError):
        f_value(KL, -0.1)


def test_conjugate_values_against_grid_search():
    """Closed-form conjugates match a brute-force sup over a fine x-grid."""
    x = np.linspace(0.0, 20.0, 400_001)
    for div, y, expect in [(CHI_SQUARED, 0.0, 0.0), (CHI_SQUARED, 2.0, 3.0), (KL, 1.0, 1.0)]:
        brute = np.max(x * y - f_value(div, x))
        assert abs(conjugate(div, y) - expect) < 1e-12
        assert abs(brute - expect) < 1e-6


def test_conjugate_prime_values():
    """Zero advantage gives unit ratio; chi-squared clamps at zero."""
    assert conjugate_prime(CHI_SQUARED, 0.0) == 1.0
    assert conjugate_prime(CHI_SQUARED, -4.0) == 0.0
    assert conjugate_prime(KL, 1.0) == 1.0


def test_divergence_from_ratios_examples():
    """Identical distributions give 0; a two-atom chi-squared example gives 0.25."""
    assert divergence_from_ratios(CHI_SQUARED, np.ones(4), np.full(4, 0.25)) == 0.0
    p, q = np.array([0.75, 0.25]), np.array([0.5, 0.5])
    assert abs(divergence_from_ratios(CHI_SQUARED, p / q, q) - 0.25) < 1e-15
    with pytest.raises(ValueError):
        divergence_from_ratios(CHI_SQUARED, np.ones(2), np.ones(3) / 3)


def test_names_and_aliases():
    assert get_divergence("chi2") == CHI_SQUARED
    assert get_divergence("kl") == KL
    with pytest.raises(ValueError):
        get_divergence("js")


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.kind)
def test_fenchel_young(div):
    """x*y <= f(x) + f*(y) on 1e4 random pairs."""
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 10, 10_000)
    y = rng.uniform(-10, 10, 10_000)
    assert np.all(x * y <= f_value(div, x) + conjugate(div, y) + 1e-9)


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.kind)
def test_conjugate_prime_is_argmax(div):
    """x* = f*'(y) attains the supremum defining f*(y)."""
    y = np.random.default_rng(1).uniform(-6, 4, 2000)
    xs = conjugate_prime(div, y)
    assert np.all(xs >= 0)
    assert np.max(np.abs(xs * y - f_value(div, xs) - conjugate(div, y))) < 1e-9


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.kind)
def test_conjugate_prime_finite_difference(div):
    """Central differences of f* match f*' to 1e-6 away from the chi-squared kink at -2."""
    y = np.random.default_rng(2).uniform(-6, 6, 5000)
    y = y[np.abs(y + 2) > 1e-3]
    h = 1e-6
    fd = (conjugate(div, y + h) - conjugate(div, y - h)) / (2 * h)
    assert np.max(np.abs(fd - conjugate_prime(div, y)) / np.maximum(1, np.abs(fd))) < 1e-6


@pytest.mark.parametrize("div", DIVS, ids=lambda d: d.kind)
def test_midpoint_convexity(div):
    """f and f* satisfy the midpoint convexity inequality."""
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 10, (2, 5000))
    assert np.all(f_value(div, (a + b) / 2) <= (f_value(div, a) + f_value(div, b)) / 2 + 1e-12)
    a, b = rng.uniform(-8, 8, (2, 5000))
    assert np.all(conjugate(div, (a + b) / 2) <= (conjugate(div, a) + conjugate(div, b)) / 2 + 1e-12)


def test_chi_squared_dominates_kl():
    """D_chi2(p||q) >= D_KL(p||q) on random discrete pairs."""
    rng = np.random.default_rng(4)
    for _ in range(2000):
        n = rng.integers(2, 9)
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert divergence(CHI_SQUARED, p, q) >= divergence(KL, p, q) - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_divergence_grows_along_mixture_path(n, seed, t):
    """Moving p further from q along the mixture path never decreases D_f(p||q)."""
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    for div in DIVS:
        near = divergence(div, q + t * 0.5 * (p - q), q)
        far = divergence(div, q + (0.5 + t * 0.5) * (p - q), q)
        assert far >= near - 1e-12
