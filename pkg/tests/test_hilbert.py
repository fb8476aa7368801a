import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mfspde.hilbert import (
    BilinearSample,
    DomainError,
    ShapeError,
    Spectrum,
    conv_variance,
    frac_power_apply,
    r0_check,
    semigroup_apply,
    stoch_conv_sample,
    trace_pair,
)


def test_semigroup_examples():
    s = Spectrum(np.array([1.0, 2.0]))
    assert np.allclose(semigroup_apply(s, math.log(2), np.ones(2)), [0.5, 0.25], rtol=0, atol=1e-15)
    v = np.array([0.3, -1.2])
    assert np.array_equal(semigroup_apply(s, 0.0, v), v)
    with pytest.raises(DomainError):
        semigroup_apply(Spectrum(np.array([1.0])), -0.1, np.ones(1))


@given(
    st.lists(st.floats(0, 50), min_size=1, max_size=6),
    st.floats(0, 3),
    st.floats(0, 3),
)
def test_semigroup_property_and_contraction(lam, t, u):
    s = Spectrum(np.array(lam), kappa=1.0)
    v = np.linspace(-1, 1, len(lam)) + 0.3
    a = semigroup_apply(s, t, semigroup_apply(s, u, v))
    b = semigroup_apply(s, t + u, v)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-300)
    assert np.linalg.norm(b) <= np.linalg.norm(v) * (1 + 1e-15)
    # diagonal operators commute (up to one rounding per product)
    g = 0.37
    lhs = frac_power_apply(s, g, semigroup_apply(s, t, v))
    assert np.allclose(lhs, semigroup_apply(s, t, frac_power_apply(s, g, v)), rtol=1e-15, atol=0)


def test_frac_power_examples():
    assert np.allclose(frac_power_apply(Spectrum(np.array([1.0, 4.0])), 1.0, np.ones(2)), [1, 4])
    assert frac_power_apply(Spectrum(np.array([3.0]), kappa=1.0), 0.5, np.array([2.0]))[0] == pytest.approx(4.0)
    v = np.array([0.5, 2.0])
    assert np.array_equal(frac_power_apply(Spectrum(np.array([1.0, 4.0])), 0.0, v), v)
    with pytest.raises(DomainError):
        frac_power_apply(Spectrum(np.array([1.0])), 1.5, np.ones(1))


def test_spectrum_invariants():
    with pytest.raises(DomainError):
        Spectrum(np.array([-1.0]))
    with pytest.raises(DomainError):
        Spectrum(np.array([0.0]), kappa=0.0)
    s = Spectrum.dirichlet(3)
    assert np.allclose(s.eigenvalues, np.pi**2 * np.array([1, 4, 9]))
    with pytest.raises(ShapeError):
        semigroup_apply(s, 1.0, np.ones(2))


def test_trace_pair_examples():
    d = 4
    inner = BilinearSample(np.eye(d)[:, :, None])
    assert trace_pair(inner, np.eye(d))[0] == pytest.approx(d)
    inner2 = BilinearSample(np.eye(2)[:, :, None])
    assert trace_pair(inner2, np.diag([2.0, 3.0]))[0] == pytest.approx(5.0)
    w = np.array([0.6, 0.8, 0.0])
    phi = BilinearSample.from_outer(np.ones(1), w, w)
    assert trace_pair(phi, np.eye(3))[0] == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        trace_pair(phi, np.eye(2))


def test_trace_pair_brute_force(rng):
    T = rng.standard_normal((3, 3, 2))
    S = rng.standard_normal((3, 3))
    phi = BilinearSample(T)
    brute = sum(phi(np.eye(3)[k], S @ np.eye(3)[k]) for k in range(3))
    assert np.allclose(trace_pair(phi, S), brute)
    # a diagonal operator may be passed as its diagonal
    assert np.allclose(trace_pair(phi, np.diag(S)), trace_pair(phi, np.diag(np.diag(S))))


def test_conv_variance_examples():
    v0 = conv_variance(Spectrum(np.array([0.0]), kappa=1.0), np.ones(1), np.ones(1), 0.5)
    assert v0[0] == pytest.approx(0.5, abs=1e-15)
    v1 = conv_variance(Spectrum(np.array([1.0])), np.array([2.0]), np.ones(1), 1.0)
    assert v1[0] == pytest.approx(4 * (1 - math.exp(-2)) / 2, rel=1e-14)
    assert v1[0] == pytest.approx(1.72933, abs=1e-5)
    tiny = conv_variance(Spectrum(np.array([1.0])), np.ones(1), np.ones(1), 1e-300)
    assert 0 <= tiny[0] < 1e-299
    with pytest.raises(DomainError):
        conv_variance(Spectrum(np.array([1.0])), np.ones(1), np.ones(1), 0.0)
    with pytest.raises(DomainError):
        conv_variance(Spectrum(np.array([1.0])), np.ones(1), -np.ones(1), 0.1)


@pytest.mark.parametrize("lam", [1e-9, 0.3, 5.0, 400.0])
def test_conv_variance_vs_quadrature(lam):
    s = Spectrum(np.array([lam]))
    dt = 0.2
    oracle = quad(lambda r: math.exp(-2 * lam * r), 0, dt, epsabs=1e-15, epsrel=1e-13)[0]
    assert conv_variance(s, np.ones(1), np.ones(1), dt)[0] == pytest.approx(oracle, rel=1e-10)


def test_stoch_conv_sample_variance():
    s = Spectrum(np.array([0.0, 1.0, 30.0]), kappa=1.0)
    B, Q, dt = np.array([1.0, 2.0, 0.5]), np.array([1.0, 0.5, 2.0]), 0.3
    x = stoch_conv_sample(s, B, Q, dt, np.random.default_rng(0), size=100_000)
    v = conv_variance(s, B, Q, dt)
    se = v * math.sqrt(2 / (len(x) - 1))
    assert np.all(np.abs(x.var(axis=0, ddof=1) - v) < 5 * se)


def test_r0_check_dirichlet():
    s = Spectrum.dirichlet(16)
    i = np.arange(1, 17)
    rep = r0_check(s, 1.0 / i)
    # per-mode terms decay like i^(4 gamma - 4); summable iff gamma < 3/4
    assert rep.gamma == pytest.approx(0.7)
    assert 0.45 <= rep.delta <= 0.5
    assert rep.gamma_integral == pytest.approx(rep.gamma_integral_closed, rel=1e-8)
    # white noise on the truncation: terms ~ i^(4 gamma - 2), summable iff gamma < 1/4
    assert r0_check(s, np.ones(16)).gamma == pytest.approx(0.2)
