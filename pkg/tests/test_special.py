import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from partialbayes.special import (
    ChiSquare,
    Discrete,
    DomainError,
    ScaledInvChiSquare,
    StandardNormal,
    digamma,
    make_rng,
    sample,
    scaled_chisq_logpdf,
    spawn_streams,
    std_normal_cdf,
    std_normal_quantile,
    t_survival,
    trigamma,
    trigamma_inverse,
)

mpmath.mp.dps = 40


def mp_quantile(p):
    # independent high-precision inversion of the normal cdf
    return float(mpmath.findroot(lambda x: mpmath.ncdf(x) - p, 0))


def test_normal_cdf_examples():
    assert std_normal_cdf(0.0) == 0.5
    assert abs(std_normal_cdf(1.959964) - 0.975) < 1e-6
    assert std_normal_cdf(-np.inf) == 0.0
    assert math.isnan(std_normal_cdf(np.nan))


@pytest.mark.parametrize("x", [-30.0, -8.0, -1.3, 0.2, 2.5, 7.0])
def test_normal_cdf_against_mpmath(x):
    assert abs(std_normal_cdf(x) - float(mpmath.ncdf(x))) <= 1e-12


@given(st.floats(-40, 40))
def test_normal_cdf_symmetry(x):
    assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) <= 1e-12


def test_normal_quantile_examples():
    assert std_normal_quantile(0.5) == 0.0
    assert abs(std_normal_quantile(0.975) - mp_quantile(0.975)) < 1e-10
    assert abs(std_normal_quantile(0.975) - 1.959964) < 1e-6
    assert std_normal_quantile(0.025) == pytest.approx(-std_normal_quantile(0.975), abs=1e-12)


@given(st.floats(1e-12, 1 - 1e-12))
def test_normal_quantile_inverts_cdf(p):
    assert abs(std_normal_cdf(std_normal_quantile(p)) - p) <= 1e-10


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_normal_quantile_domain(p):
    with pytest.raises(DomainError):
        std_normal_quantile(p)


def test_t_survival_examples():
    assert t_survival(0.0, 3.7) == 0.5
    closed = 0.5 - math.sqrt(2) / 4  # t_2 survival: 1/2 - t / (2 sqrt(2 + t^2))
    assert abs(t_survival(math.sqrt(2), 2) - closed) < 1e-14
    assert abs(t_survival(-math.sqrt(2), 2) - (1 - closed)) < 1e-14


@pytest.mark.parametrize("df", [0.0, -1.0])
def test_t_survival_domain(df):
    with pytest.raises(DomainError):
        t_survival(1.0, df)


@pytest.mark.parametrize("t,df", [(0.7, 2.5), (3.1, 7.96), (-1.4, 0.8), (12.0, 33.3), (25.0, 4.2)])
def test_t_survival_noninteger_df_against_mpmath(t, df):
    x = df / (df + t * t)
    tail = 0.5 * mpmath.betainc(df / 2, 0.5, 0, x, regularized=True)
    expected = float(tail) if t > 0 else 1 - float(tail)
    assert t_survival(t, df) == pytest.approx(expected, rel=1e-10)


@given(st.floats(-50, 50), st.floats(0.1, 1e4))
def test_t_survival_symmetry(t, df):
    assert abs(t_survival(t, df) + t_survival(-t, df) - 1.0) <= 1e-10


def test_t_survival_normal_limit():
    t = np.linspace(-5, 5, 101)
    assert np.max(np.abs(t_survival(t, 1e6) - (1 - std_normal_cdf(t)))) <= 1e-5


def test_scaled_chisq_logpdf_examples():
    assert scaled_chisq_logpdf(1.0, 1.0, 2) == pytest.approx(-1.0, abs=1e-14)
    v = scaled_chisq_logpdf(1e-300, 1.0, 2)
    assert np.isfinite(v)
    assert v == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("sigma2", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("nu", [2, 3, 4, 16, 64])
def test_scaled_chisq_density_normalizes(sigma2, nu):
    f = lambda s: math.exp(scaled_chisq_logpdf(s, sigma2, nu))
    mode = max(sigma2 * (nu - 2) / nu, 0.0)
    total = integrate.quad(f, 0, mode + 1e-3 * sigma2)[0] + integrate.quad(f, mode + 1e-3 * sigma2, np.inf, limit=200)[0]
    assert abs(total - 1.0) <= 1e-8


def test_scaled_chisq_logpdf_matches_mpmath():
    for s2, sigma2, nu in [(0.3, 2.0, 3), (5.0, 0.7, 11), (1e-4, 1e-3, 64)]:
        h = mpmath.mpf(nu) / 2
        val = (h * mpmath.log(h) - mpmath.loggamma(h) - h * mpmath.log(sigma2)
               + (h - 1) * mpmath.log(s2) - h * s2 / mpmath.mpf(sigma2))
        assert scaled_chisq_logpdf(s2, sigma2, nu) == pytest.approx(float(val), rel=1e-12)


@pytest.mark.parametrize("s2,sigma2", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_scaled_chisq_domain(s2, sigma2):
    with pytest.raises(DomainError):
        scaled_chisq_logpdf(s2, sigma2, 4)


def test_digamma_trigamma_series_oracles():
    N = 200000
    k = np.arange(1, N + 1, dtype=float)
    zeta2 = np.sum(1.0 / k[::-1] ** 2) + 1.0 / N  # tail of sum 1/k^2 ~ 1/N
    assert trigamma(1.0) == pytest.approx(zeta2, abs=1e-9)
    assert trigamma(1.0) == pytest.approx(math.pi ** 2 / 6, rel=1e-14)
    # digamma(1) = -gamma = lim (1/1 + ... + 1/N) - log N, corrected by 1/(2N)
    euler = np.sum(1.0 / k[::-1]) - math.log(N) - 0.5 / N
    assert digamma(1.0) == pytest.approx(-euler, abs=1e-9)
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-14)


def test_trigamma_inverse_roundtrip_example():
    assert trigamma_inverse(trigamma(3.7)) == pytest.approx(3.7, abs=1e-7)


@given(st.floats(1e-3, 1e6))
def test_trigamma_inverse_property(y):
    x = trigamma_inverse(y)
    assert trigamma(x) == pytest.approx(y, rel=1e-8)


def test_trigamma_inverse_vectorized():
    y = np.array([0.01, 0.5, 2.0, 50.0])
    assert np.allclose(trigamma(trigamma_inverse(y)), y, rtol=1e-8)


@pytest.mark.parametrize("f", [digamma, trigamma, trigamma_inverse])
def test_special_domain(f):
    with pytest.raises(DomainError):
        f(0.0)


def test_sample_point_mass():
    rng = make_rng(3)
    assert np.all(sample(rng, Discrete((1.0,), (1.0,)), 1000) == 1.0)
    assert sample(rng, Discrete((1.0,), (1.0,))) == 1.0


def test_sample_chisq_mean():
    assert abs(sample(make_rng(11), ChiSquare(4), 10**6).mean() - 4.0) <= 0.02


def test_sample_scaled_inv_chisq_mean():
    draws = sample(make_rng(12), ScaledInvChiSquare(6, 1.0), 10**6)
    assert abs(draws.mean() - 1.5) <= 0.01


def test_sample_determinism_and_streams():
    a = sample(make_rng(5), StandardNormal(), 100)
    b = sample(make_rng(5), StandardNormal(), 100)
    assert np.array_equal(a, b)
    s1, s2 = spawn_streams(5, 2)
    assert not np.array_equal(sample(s1, StandardNormal(), 10), sample(s2, StandardNormal(), 10))
    t1, _ = spawn_streams(5, 2)
    assert np.array_equal(sample(t1, StandardNormal(), 10), sample(spawn_streams(5, 2)[0], StandardNormal(), 10))


def test_sample_invalid_laws():
    with pytest.raises(DomainError):
        ChiSquare(0)
    with pytest.raises(DomainError):
        ScaledInvChiSquare(-1, 1)
    with pytest.raises(DomainError):
        Discrete((1.0, 2.0), (0.5, 0.6))
    with pytest.raises(DomainError):
        sample(make_rng(0), "gamma")
