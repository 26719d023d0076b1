import math

import numpy as np
import pytest

from aeodelab.autoencoder import (
    AutoencoderState,
    SpikedSource,
    TrainConfig,
    measure_order_parameters,
    pmse_gaussian,
    train,
)
from aeodelab.gaussian_integrals import i2
from aeodelab.ode import (
    IntegrationError,
    ODEConfig,
    assemble_moments,
    factor_spikes,
    field_expectations,
    init_from_finite_D,
    integrate,
    pmse_from_order_params,
    rhs,
    rhs_bulk,
    rhs_factored,
    rhs_spike,
    rhs_T0,
    zero_state,
)
from aeodelab.ode import _pack_factored
from aeodelab.order_params import OrderParameterState
from aeodelab.spectra import SpikedCovarianceModel, pca_reconstruction_error, spectral_model_of


def _state(K=3, M=3, seed=0, scale=1.0):
    """Measured state of a random network: rank-one spikes and a consistent bulk."""
    D = 400
    m = SpikedCovarianceModel.build(D, [3.0, 2.0, 1.0][:M], sigma=1.0, seed=seed)
    st = AutoencoderState.random(K, D, "erf", seed=seed + 1, std=scale)
    return measure_order_parameters(st, spectral_model_of(m), SpikedSource(m))


def test_assemble_examples():
    z = zero_state(2, [1.0, 2.0], 3.0)
    Q, R, T = assemble_moments(z)
    assert not Q.any() and not R.any() and not T.any()
    z.q[0] = np.eye(2)
    z.rho_tilde = np.array([2.0, 0.0])
    Q, _, _ = assemble_moments(z)
    assert np.array_equal(Q, 2 * np.eye(2))


def test_measured_moments_match_finite_d():
    D = 1000
    m = SpikedCovarianceModel.build(D, [3.0, 2.0, 1.0], sigma=1.0, seed=2)
    st = AutoencoderState.random(3, D, seed=4)
    Q, _, _ = assemble_moments(measure_order_parameters(st, spectral_model_of(m)))
    exact = st.W @ m.covariance() @ st.W.T / D
    assert np.max(np.abs(Q - exact)) < 10 / math.sqrt(D) * np.abs(exact).max()


def test_decoder_seeded_by_alignment():
    ops = _state()
    ops.r[:] = 0
    ops.t[:] = 0
    ops.R_bulk[:] = 0
    ops.T_bulk[:] = 0
    cfg = ODEConfig(eta=0.8)
    fe = field_expectations(ops, "erf")
    dq, dr, dt = rhs_spike(ops, cfg)
    assert np.allclose(dt, 0)
    expect = 0.8 * ops.rho_tilde[:, None, None] * fe.Eg[None, :, None] * ops.q
    assert np.allclose(dr, expect)


def test_bulk_rhs_examples():
    ops = _state()
    ops.R_bulk[:] = 0
    ops.T_bulk[:] = 0
    dQ, dR, dT = rhs_bulk(ops, ODEConfig())
    assert not dQ.any() and not dR.any() and not dT.any()
    ops = _state()
    dQ, _, _ = rhs_bulk(ops, ODEConfig(kappa=0.0))
    assert not dQ.any()


def test_bulk_exponential_decay():
    ops = zero_state(1, [2.0], 3.0)
    ops.Q_bulk[:] = 1.8
    ops.T_bulk[:] = 0.3
    Q = 1.8
    rate = 2 * float(i2("erf", Q, Q, Q))
    times = [0.5, 1.0, 2.0]
    for st, s in zip(integrate(ops, ODEConfig(ds=0.01), times), times):
        assert st.T_bulk[0, 0] == pytest.approx(0.3 * math.exp(-rate * s), abs=1e-6)
        assert st.Q_bulk[0, 0] == 1.8


def test_T0_rhs_examples():
    ops = _state()
    ops.T0[:] = 0
    ops.r[:] = 0
    ops.R_bulk[:] = 0
    assert np.allclose(rhs_T0(ops, ODEConfig()), 0)
    # linear K=1 fixed point at Q1 T0 = R1
    lin = zero_state(1, [2.0], 3.0)
    lin.q[0] = [[0.7]]
    lin.r[0] = [[0.4]]
    Q, R, _ = lin.moments()
    lin.T0[:] = R / Q
    assert np.allclose(rhs_T0(lin, ODEConfig(activation="linear")), 0)


def test_zero_state_is_fixed():
    z = zero_state(3, [3.0, 2.0, 1.0], 7.0)
    for st in integrate(z, ODEConfig(), [1.0, 5.0]):
        assert not st.to_vector().any()
        assert pmse_from_order_params(st, "erf") == 7.0


def test_halving_ds_changes_little():
    ops = _state()
    a = integrate(ops, ODEConfig(ds=0.02), [5.0])[0]
    b = integrate(ops, ODEConfig(ds=0.01), [5.0])[0]
    assert abs(pmse_from_order_params(a, "erf") - pmse_from_order_params(b, "erf")) < 1e-6


def test_pmse_examples():
    z = zero_state(2, [1.0], 2.5)
    assert pmse_from_order_params(z, "erf") == 2.5
    D = 1000
    sp = spectral_model_of(SpikedCovarianceModel.build(D, [2.0, 1.0], sigma=1.0))
    lin = zero_state(1, sp.rho_tilde, sp.trace / D)
    for aw in (0.5, 1.0, 3.0):
        av = 1 / aw
        lin.q[0] = [[aw * aw]]
        lin.r[0] = [[av * aw]]
        lin.t[0] = [[av * av]]
        lin.T0[:] = av * av
        assert pmse_from_order_params(lin, "linear") == pytest.approx(pca_reconstruction_error(sp, 1), abs=1e-12)


@pytest.mark.parametrize("act", ["linear", "erf", "relu"])
def test_pmse_matches_exact_finite_d(act):
    D = 300
    m = SpikedCovarianceModel.build(D, [2.0, 1.0], sigma=0.5, seed=3)
    st = AutoencoderState.random(3, D, act, seed=6, std=0.7)
    ops = measure_order_parameters(st, spectral_model_of(m), SpikedSource(m))
    assert pmse_from_order_params(ops, act) == pytest.approx(pmse_gaussian(st, m), rel=1e-10)


def test_factored_rhs_is_density_rhs():
    ops = _state()
    w, u = factor_spikes(ops)
    cfg = ODEConfig(kappa=0.1)
    dy = rhs_factored(_pack_factored(w, u, ops), ops, cfg)
    M, K = ops.M, ops.K
    dw = dy[: M * K].reshape(M, K)
    du = dy[M * K : 2 * M * K].reshape(M, K)
    dq, dr, dt = rhs_spike(ops, cfg)
    outer = lambda a, b: a[:, :, None] * b[:, None, :]  # noqa: E731
    assert np.allclose(outer(dw, w) + outer(w, dw), dq)
    assert np.allclose(outer(du, w) + outer(u, dw), dr)
    assert np.allclose(outer(du, u) + outer(u, du), dt)
    full = rhs(ops, cfg)
    assert np.allclose(dy[2 * M * K :], full[3 * M * K * K :])


def test_factor_rejects_rank_two():
    ops = _state()
    ops.q[0] = np.eye(3)
    assert factor_spikes(ops) is None


def test_density_and_factored_paths_agree_early():
    ops = _state()
    a = integrate(ops, ODEConfig(), [1.0])[0]
    ops2 = ops.copy()
    ops2.q[0, 0, 0] += 1e-3  # no longer rank one, so the density form runs
    assert factor_spikes(ops2) is None
    b = integrate(ops2, ODEConfig(), [1.0])[0]
    assert abs(pmse_from_order_params(a, "erf") - pmse_from_order_params(b, "erf")) < 1e-2


def test_symmetry_preserved():
    for st in integrate(_state(), ODEConfig(), [2.0, 10.0]):
        for arr in (st.q, st.t):
            assert np.allclose(arr, np.swapaxes(arr, 1, 2), atol=1e-10)
        assert np.allclose(st.T0, st.T0.T, atol=1e-10)


def test_permutation_equivariance():
    ops = _state()
    perm = np.array([2, 0, 1])
    p = ops.copy()
    ix = np.ix_(perm, perm)
    p.q, p.r, p.t = (a[:, perm][:, :, perm] for a in (ops.q, ops.r, ops.t))
    p.Q_bulk, p.R_bulk, p.T_bulk, p.T0 = (a[ix] for a in (ops.Q_bulk, ops.R_bulk, ops.T_bulk, ops.T0))
    a = integrate(ops, ODEConfig(), [3.0])[0]
    b = integrate(p, ODEConfig(), [3.0])[0]
    assert np.allclose(a.q[:, perm][:, :, perm], b.q, atol=1e-12)
    assert np.allclose(a.T0[ix], b.T0, atol=1e-12)


def test_pure_decay():
    ops = _state()
    kappa = 0.3
    st = integrate(ops, ODEConfig(eta=0.0, kappa=kappa), [2.0])[0]
    f = math.exp(-2 * kappa * 2.0)
    for a, b in zip(st.to_vector(), ops.to_vector()):
        assert a == pytest.approx(b * f, abs=1e-8)


def test_truncated_theory_aligns_units():
    ops = _state(scale=1e-3)
    st = integrate(ops, ODEConfig(truncated=True, ds=0.05), [200.0])[0]
    diag = np.array([[st.q[m, k, k] for m in range(3)] for k in range(3)])
    share = diag.max(axis=1) / diag.sum(axis=1)
    assert np.all(share > 0.99)
    assert np.array_equal(diag.argmax(axis=1), [0, 1, 2])


def test_init_from_finite_d():
    sp = spectral_model_of(SpikedCovarianceModel.build(500, [3.0, 2.0, 1.0], sigma=1.0))
    a = init_from_finite_D(500, 3, sp, seed=4, std=0.5)
    b = init_from_finite_D(500, 3, sp, seed=4, std=0.5)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert np.allclose(np.diag(a.T0), 0.25, rtol=0.2)
    with pytest.raises(ValueError):
        init_from_finite_D(50, 3, sp)


def test_integration_error_on_bad_state():
    ops = _state()
    ops.T0[0, 0] = -5.0
    with pytest.raises(IntegrationError):
        integrate(ops, ODEConfig(), [0.1])


@pytest.mark.slow
def test_slopes_match_simulation():
    """Replica-averaged finite-D change over a short interval equals the ODE change."""
    D, reps, ds = 1000, 200, 0.5
    m = SpikedCovarianceModel.build(D, [3.0, 2.0, 1.0], sigma=1.0, seed=0)
    sp = spectral_model_of(m)
    src = SpikedSource(m)
    base = AutoencoderState.random(3, D, "erf", seed=1)
    ops0 = measure_order_parameters(base, sp, src)
    ode = integrate(ops0, ODEConfig(ds=0.01), [ds])[0].to_vector() - ops0.to_vector()
    deltas = []
    for r in range(reps):
        st = base.copy()
        train(st, m, TrainConfig(steps=int(ds * D), seed=100 + r), log_steps=[int(ds * D)])
        deltas.append(measure_order_parameters(st, sp, src).to_vector() - ops0.to_vector())
    deltas = np.array(deltas)
    mean = deltas.mean(0)
    se = deltas.std(0, ddof=1) / math.sqrt(reps)
    moving = np.abs(ode) > 1e-3
    z = np.abs(mean - ode)[moving] / se[moving]
    # 3 standard errors on average with a small allowance for the O(1/D) finite-size bias
    assert np.sqrt(np.mean(z**2)) < 3
    assert np.max(np.abs(mean - ode)) < 0.05 * np.abs(ode).max()


def test_order_parameter_vector_round_trip():
    ops = _state()
    back = ops.with_vector(ops.to_vector())
    assert np.array_equal(back.to_vector(), ops.to_vector())
    assert isinstance(back, OrderParameterState)
    assert "q1_00" in ops.flat_columns() and "T0_12" in ops.flat_columns()
