import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeodelab.ode import ODEConfig, integrate, pmse_from_order_params, rhs_factored, factor_spikes
from aeodelab.ode import _pack_factored
from aeodelab.reduced import (
    AlignedState,
    aligned_order_parameters,
    aligned_readout,
    bracket_terms,
    fixed_point_alpha_v,
    integrate_reduced,
    pmse_aligned_exact,
    pmse_reduced,
    powerlaw_fit,
    reduced_rhs,
    reduced_rhs_sqrt_decoder,
)


def test_fixed_point_examples():
    assert fixed_point_alpha_v("erf", 1.0, 1.0) == pytest.approx(math.sqrt(math.pi))
    assert fixed_point_alpha_v("linear", 2.0, 5.0) == pytest.approx(0.5)
    a = 1e-4
    assert fixed_point_alpha_v("erf", a, 1.0) * a == pytest.approx(math.sqrt(math.pi / 2), rel=1e-6)
    with pytest.raises(ValueError):
        fixed_point_alpha_v("erf", 0.0, 1.0)
    with pytest.raises(ValueError):
        fixed_point_alpha_v("relu", 1.0, 1.0)


@given(st.floats(0.01, 10), st.floats(0.1, 5))
def test_bracket_vanishes_at_fixed_point(aw, rho):
    av = fixed_point_alpha_v("erf", aw, rho)
    s = AlignedState([aw], [av], [rho])
    assert pmse_reduced(s, 0.7) == pytest.approx(0.7, abs=1e-9 * rho)


@settings(max_examples=200)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 5), st.sampled_from(["erf", "linear"]))
def test_brackets_nonnegative_and_even(aw, av, rho, act):
    s = AlignedState([aw], [av], [rho], act)
    f = bracket_terms(s)[0]
    assert f >= -1e-9 * (1 + abs(av * aw) * rho)
    g = bracket_terms(AlignedState([-aw], [-av], [rho], act))[0]
    assert f == pytest.approx(g, abs=1e-12)


def test_exact_pmse_nonnegative_terms():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = AlignedState(rng.normal(0, 3, 3), rng.normal(0, 3, 3), rng.uniform(0.1, 5, 3))
        assert pmse_aligned_exact(s, 0.0) >= -1e-12


def test_decoder_grows_from_zero():
    s = AlignedState([0.5, 1.0], [0.0, 0.0], [2.0, 1.0])
    dav, daw = reduced_rhs(s)
    assert np.all(dav > 0)
    assert np.all(daw == 0)


@pytest.mark.parametrize("act", ["erf", "linear"])
def test_reduced_flow_is_full_flow_on_manifold(act):
    s = AlignedState([0.7, 1.3, 0.4], [0.9, 0.2, 1.5], [3.0, 2.0, 1.0], act)
    ops = aligned_order_parameters(s, tail=0.5)
    w, u = factor_spikes(ops)
    dy = rhs_factored(_pack_factored(w, u, ops), ops, ODEConfig(activation=act))
    K = s.K
    dw = dy[: K * K].reshape(K, K)
    du = dy[K * K : 2 * K * K].reshape(K, K)
    dav, daw = reduced_rhs(s)
    sign_w = np.sign(np.diag(w))
    sign_u = np.sign(np.diag(u))
    assert np.allclose(np.diag(dw) * sign_w, daw, atol=1e-10)
    assert np.allclose(np.diag(du) * sign_u, dav, atol=1e-10)
    off = ~np.eye(K, dtype=bool)
    assert np.allclose(dw[off], 0, atol=1e-10) and np.allclose(du[off], 0, atol=1e-10)
    assert pmse_aligned_exact(s, 0.5) == pytest.approx(pmse_from_order_params(ops, act), rel=1e-12)


def test_reduced_trajectory_matches_engine():
    s0 = AlignedState([0.8, 0.6], [0.3, 0.5], [2.0, 1.0])
    times = [1.0, 10.0, 50.0]
    red = integrate_reduced(s0, times, tail=0.3)
    full = integrate(aligned_order_parameters(s0, 0.3), ODEConfig(ds=0.01), times)
    for i, st_ in enumerate(full):
        aw, av = aligned_readout(st_)
        assert np.allclose(aw, red.alpha_w[i], atol=1e-4)
        assert np.allclose(av, red.alpha_v[i], atol=1e-4)
        assert red.pmse[i] == pytest.approx(pmse_from_order_params(st_, "erf"), abs=1e-4)


def test_powerlaw_fit_synthetic():
    s = np.logspace(2, 6, 40)
    aw = 3.0 * s ** (-1 / 6)
    av = 0.2 * s ** (1 / 6)
    w, v = powerlaw_fit(s, aw, av, (1e2, 1e6))
    assert w == pytest.approx(-1 / 6, abs=1e-6)
    assert v == pytest.approx(1 / 6, abs=1e-6)
    with pytest.raises(ValueError):
        powerlaw_fit(s, aw, av, (1e3, 5e4))
    with pytest.raises(ValueError):
        powerlaw_fit(s[:2], aw[:2], av[:2], (1e2, 1e6))


@pytest.mark.slow
def test_long_time_exponent():
    s0 = AlignedState([1.0], [1.0], [1.0])
    times = np.logspace(0, 7, 71)
    tr = integrate_reduced(s0, times)
    w, v = powerlaw_fit(tr.s, tr.alpha_w, tr.alpha_v, (1e5, 1e7))
    assert w == pytest.approx(-1 / 6, abs=0.01)
    assert v == pytest.approx(1 / 6, abs=0.01)
    late = tr.pmse[tr.s >= 1e3]
    assert np.all(np.diff(late) <= 1e-12)


def test_sqrt_decoder_drift_gives_other_exponent():
    s0 = AlignedState([1.0], [1.0], [1.0])
    times = np.logspace(0, 6, 61)
    tr = integrate_reduced(s0, times, sqrt_decoder=True)
    _, v = powerlaw_fit(tr.s, tr.alpha_w, tr.alpha_v, (1e4, 1e6))
    assert v == pytest.approx(0.5, abs=0.05)
    _, _, clamped = reduced_rhs_sqrt_decoder(AlignedState([1.0], [100.0], [1.0]))
    assert clamped[0]


def test_aligned_state_validation():
    with pytest.raises(ValueError):
        AlignedState([1.0, 2.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        AlignedState([1.0], [1.0], [0.0])
    with pytest.raises(ValueError):
        reduced_rhs(AlignedState([1.0], [1.0], [1.0], "relu"))
