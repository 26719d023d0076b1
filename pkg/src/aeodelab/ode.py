"""Closed order-parameter dynamics of the autoencoder in the high-dimensional limit.

Every drift term is an expectation over the jointly Gaussian local fields
(lambda, nu), whose covariance is assembled from the state.  Expectations of
an input direction x_tau times a function of the fields are reduced by
Gaussian regression on the fields that the function depends on, which turns
them into the pair and triple integrals of :mod:`gaussian_integrals`.

The encoder-error coefficient e_k = (sum_a T0[k, a] g_a - nu_k) g'_k enters
the encoder drift through

    E[x_tau e_k] = sum_a Cov(x_tau, lambda_a) A_lam[k, a] + Cov(x_tau, nu_k) A_nu[k]

and A_lam, A_nu are computed once per right-hand-side evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian_integrals import Activation, i2, i3, i21, i22, mean_gprime
from .order_params import OrderParameterState
from .spectra import SpectralModel

__all__ = [
    "OrderParameterState",
    "ODEConfig",
    "IntegrationError",
    "assemble_moments",
    "field_expectations",
    "rhs_spike",
    "rhs_bulk",
    "rhs_T0",
    "rhs",
    "pmse_from_order_params",
    "integrate",
    "factor_spikes",
    "rhs_factored",
    "init_from_finite_D",
    "zero_state",
]

_DEGENERATE = 1e-10


class IntegrationError(FloatingPointError):
    pass


@dataclass
class ODEConfig:
    eta: float = 1.0
    kappa: float = 0.0
    activation: Activation = Activation.ERF
    truncated: bool = False
    ds: float = 1e-2
    # ds may grow in proportion to s (ds_eff = max(ds, ds_rel * s)); 0 keeps it fixed
    ds_rel: float = 0.0
    ds_max: float = 0.2
    psd_tol: float = 1e-8

    def __post_init__(self):
        self.activation = Activation.parse(self.activation)
        if not self.ds > 0:
            raise ValueError("ds must be positive")


def assemble_moments(ops: OrderParameterState):
    """(Q1, R1, T1) = Cov(lambda, lambda), Cov(nu, lambda), Cov(nu, nu)."""
    return ops.moments()


@dataclass
class FieldExpectations:
    Eg: np.ndarray  # E[g'(lambda_k)], (K,)
    I2: np.ndarray  # E[g(lambda_k) g(lambda_a)], (K, K)
    I2t: np.ndarray  # I2 with a > k masked out in truncated mode
    J2: np.ndarray  # J2[k, l] = E[nu_l g(lambda_k)]
    A_lam: np.ndarray  # (K, K)
    A_nu: np.ndarray  # (K,)


def field_expectations(ops: OrderParameterState, act: Activation, truncated: bool = False) -> FieldExpectations:
    act = Activation.parse(act)
    Q, R, T = ops.moments()
    T0 = ops.T0
    K = Q.shape[0]
    d = np.diag(Q).copy()
    if np.any(d < -1e-12):
        raise IntegrationError("negative field variance")
    d = np.maximum(d, 0.0)
    Eg = mean_gprime(act, d)
    I2 = i2(act, d[:, None], Q, d[None, :], check=False)
    J2 = Eg[:, None] * R.T
    mask = np.tril(np.ones((K, K))) if truncated else np.ones((K, K))
    I2t = I2 * mask
    T0m = T0 * mask

    # E[lambda g'(lambda_k) g(lambda_a)] regressed on (lambda_k, lambda_a)
    dk, da = d[:, None] * np.ones((1, K)), np.ones((K, 1)) * d[None, :]
    C1 = np.empty((K, K, 3, 3))
    C1[..., 0, 0] = C1[..., 0, 1] = C1[..., 1, 0] = C1[..., 1, 1] = dk
    C1[..., 0, 2] = C1[..., 2, 0] = C1[..., 1, 2] = C1[..., 2, 1] = Q
    C1[..., 2, 2] = da
    C2 = np.empty((K, K, 3, 3))
    C2[..., 0, 0] = dk
    C2[..., 0, 1] = C2[..., 1, 0] = C2[..., 0, 2] = C2[..., 2, 0] = Q
    C2[..., 1, 1] = C2[..., 1, 2] = C2[..., 2, 1] = C2[..., 2, 2] = da
    b1 = i3(act, C1, check=False)
    b2 = i3(act, C2, check=False)
    det = dk * da - Q**2
    scale = np.maximum(dk * da, 1e-300)
    regular = (det > _DEGENERATE * scale) & ~np.eye(K, dtype=bool)
    safe_det = np.where(regular, det, 1.0)
    safe_dk = np.where(dk > 0, dk, 1.0)
    beta1 = np.where(regular, (da * b1 - Q * b2) / safe_det, np.where(dk > 0, b1 / safe_dk, 0.0))
    beta2 = np.where(regular, (dk * b2 - Q * b1) / safe_det, 0.0)

    # E[x (g'(lambda_k) nu_k)] regressed on (lambda_k, nu_k)
    r, t = np.diag(R), np.diag(T)
    c1 = i21(act, d, r)
    c2 = i22(act, d, r, t)
    detg = d * t - r**2
    regular_g = detg > _DEGENERATE * np.maximum(d * t, 1e-300)
    safe_detg = np.where(regular_g, detg, 1.0)
    safe_d = np.where(d > 0, d, 1.0)
    gamma1 = np.where(regular_g, (t * c1 - r * c2) / safe_detg, np.where(d > 0, c1 / safe_d, 0.0))
    gamma2 = np.where(regular_g, (d * c2 - r * c1) / safe_detg, 0.0)

    A_lam = T0m * beta2
    np.fill_diagonal(A_lam, (T0m * beta1).sum(axis=1) - gamma1)
    A_nu = -gamma2
    return FieldExpectations(Eg, I2, I2t, J2, A_lam, A_nu)


def rhs_spike(ops: OrderParameterState, cfg: ODEConfig, fe: FieldExpectations | None = None):
    """d/ds of the spike densities (q, r, t), each shaped (M, K, K)."""
    fe = fe or field_expectations(ops, cfg.activation, cfg.truncated)
    eta, kappa = cfg.eta, cfg.kappa
    rho = ops.rho_tilde[:, None, None]
    Eg = fe.Eg
    A_lam, A_nu = fe.A_lam, np.diag(fe.A_nu)
    q, r, t = ops.q, ops.r, ops.t
    G = A_lam @ q + A_nu @ r
    dq = -eta * rho * (G + np.swapaxes(G, 1, 2)) - 2 * kappa * q
    dr = (
        eta * (rho * Eg[:, None] * q - fe.I2t @ r)
        - eta * rho * (r @ A_lam.T + t @ A_nu.T)
        - 2 * kappa * r
    )
    H = eta * (rho * Eg[:, None] * np.swapaxes(r, 1, 2) - fe.I2t @ t)
    dt = H + np.swapaxes(H, 1, 2) - 2 * kappa * t
    return dq, dr, dt


def rhs_bulk(ops: OrderParameterState, cfg: ODEConfig, fe: FieldExpectations | None = None):
    """d/ds of the bulk overlaps (Q_bulk, R_bulk, T_bulk)."""
    fe = fe or field_expectations(ops, cfg.activation, cfg.truncated)
    eta, kappa = cfg.eta, cfg.kappa
    dQ = -2 * kappa * ops.Q_bulk
    dR = -eta * fe.I2t @ ops.R_bulk - 2 * kappa * ops.R_bulk
    H = -eta * fe.I2t @ ops.T_bulk
    dT = H + H.T - 2 * kappa * ops.T_bulk
    return dQ, dR, dT


def rhs_T0(ops: OrderParameterState, cfg: ODEConfig, fe: FieldExpectations | None = None):
    """d/ds of the decoder Gram matrix T0 = V V^T / D."""
    fe = fe or field_expectations(ops, cfg.activation, cfg.truncated)
    H = -cfg.eta * (fe.I2t @ ops.T0 - fe.J2)
    return H + H.T - 2 * cfg.kappa * ops.T0


def rhs(ops: OrderParameterState, cfg: ODEConfig) -> np.ndarray:
    """Full right-hand side as a flat vector matching ``ops.to_vector()``."""
    fe = field_expectations(ops, cfg.activation, cfg.truncated)
    dq, dr, dt = rhs_spike(ops, cfg, fe)
    dQ, dR, dT = rhs_bulk(ops, cfg, fe)
    dT0 = rhs_T0(ops, cfg, fe)
    return np.concatenate([a.ravel() for a in (dq, dr, dt, dQ, dR, dT, dT0)])


def pmse_from_order_params(ops: OrderParameterState, act, trace_per_dim: float | None = None) -> float:
    """(1/D) Tr Omega - 2 sum_k E[nu_k g_k] + sum_kl T0[k, l] E[g_k g_l]."""
    act = Activation.parse(act)
    Q, R, _ = ops.moments()
    d = np.maximum(np.diag(Q), 0.0)
    I2 = i2(act, d[:, None], Q, d[None, :], check=False)
    J = np.diag(R) * mean_gprime(act, d)
    tr = ops.trace_per_dim if trace_per_dim is None else trace_per_dim
    return float(tr - 2.0 * J.sum() + (ops.T0 * I2).sum())


def _check_state(ops: OrderParameterState, tol: float, s: float) -> None:
    y = ops.to_vector()
    if not np.all(np.isfinite(y)):
        raise IntegrationError(f"non-finite order parameters at s={s:.6g}; try a smaller ds")
    Q, R, T = ops.moments()
    big = np.block([[Q, R.T], [R, T]])
    scale = max(1.0, float(np.abs(np.diag(big)).max()))
    if np.linalg.eigvalsh(0.5 * (big + big.T)).min() < -tol * scale:
        raise IntegrationError(f"field covariance lost positive semi-definiteness at s={s:.6g}; try a smaller ds")
    if np.linalg.eigvalsh(0.5 * (ops.T0 + ops.T0.T)).min() < -tol * max(1.0, float(np.abs(np.diag(ops.T0)).max())):
        raise IntegrationError(f"T0 lost positive semi-definiteness at s={s:.6g}; try a smaller ds")


def factor_spikes(ops: OrderParameterState, tol: float = 1e-6):
    """Projected weights (w_m, u_m) with q_m = w w^T, r_m = u w^T, t_m = u u^T.

    Returns None when some spike density is not rank one within ``tol``.
    The overall sign of each pair is arbitrary and does not affect q, r, t.
    """
    M, K = ops.M, ops.K
    w = np.zeros((M, K))
    u = np.zeros((M, K))
    for m in range(M):
        q, r, t = ops.q[m], ops.r[m], ops.t[m]
        vals, vecs = np.linalg.eigh(0.5 * (q + q.T))
        top = max(vals[-1], 0.0)
        if top > 0:
            w[m] = vecs[:, -1] * math.sqrt(top)
            u[m] = r @ w[m] / top
        else:
            vals_t, vecs_t = np.linalg.eigh(0.5 * (t + t.T))
            u[m] = vecs_t[:, -1] * math.sqrt(max(vals_t[-1], 0.0))
        scale = max(1.0, np.abs(q).max(), np.abs(t).max(), np.abs(r).max())
        err = max(
            np.abs(np.outer(w[m], w[m]) - q).max(),
            np.abs(np.outer(u[m], w[m]) - r).max(),
            np.abs(np.outer(u[m], u[m]) - t).max(),
        )
        if err > tol * scale:
            return None
    return w, u


def _pack_factored(w, u, ops: OrderParameterState) -> np.ndarray:
    return np.concatenate([w.ravel(), u.ravel()] + [a.ravel() for a in (ops.Q_bulk, ops.R_bulk, ops.T_bulk, ops.T0)])


def _unpack_factored(y: np.ndarray, template: OrderParameterState, s: float) -> OrderParameterState:
    M, K = template.M, template.K
    w = y[: M * K].reshape(M, K)
    u = y[M * K : 2 * M * K].reshape(M, K)
    rest = y[2 * M * K :].reshape(4, K, K)
    q = w[:, :, None] * w[:, None, :]
    r = u[:, :, None] * w[:, None, :]
    t = u[:, :, None] * u[:, None, :]
    return OrderParameterState(
        q, r, t, rest[0].copy(), rest[1].copy(), rest[2].copy(), rest[3].copy(),
        template.rho_tilde, template.trace_per_dim, s,
    )


def rhs_factored(y: np.ndarray, template: OrderParameterState, cfg: ODEConfig) -> np.ndarray:
    """Right-hand side in the projected-weight form used by :func:`integrate`."""
    ops = _unpack_factored(y, template, template.s)
    M, K = ops.M, ops.K
    w = y[: M * K].reshape(M, K)
    u = y[M * K : 2 * M * K].reshape(M, K)
    fe = field_expectations(ops, cfg.activation, cfg.truncated)
    eta, kappa = cfg.eta, cfg.kappa
    rho = ops.rho_tilde[:, None]
    dw = -eta * rho * (w @ fe.A_lam.T + u * fe.A_nu) - kappa * w
    du = -eta * (u @ fe.I2t.T - rho * fe.Eg * w) - kappa * u
    dQ, dR, dT = rhs_bulk(ops, cfg, fe)
    dT0 = rhs_T0(ops, cfg, fe)
    return np.concatenate([dw.ravel(), du.ravel(), dQ.ravel(), dR.ravel(), dT.ravel(), dT0.ravel()])


def integrate(initial: OrderParameterState, cfg: ODEConfig, times, *, record=None, check_every: int = 100):
    """RK4 from ``initial.s`` through every time in ``times``.

    The last step before each requested time is shortened so recorded states
    land exactly on it.  Returns the states at ``times``; ``record(state)`` is
    called on each.

    Rank-one spike densities (every state measured from a network) are
    advanced through their projected weights.  The density form admits
    spurious growing modes that break the rank-one structure, and those
    get excited by truncation error; the projected form does not have them.  Other states fall back to the density form.
    """
    times = np.asarray(sorted(set(float(t) for t in times)), dtype=float)
    if times.size and times[0] < initial.s:
        raise ValueError("requested times precede the initial state")
    factors = factor_spikes(initial)
    template = initial
    if factors is not None:
        y = _pack_factored(*factors, initial)

        def f(vec):
            return rhs_factored(vec, template, cfg)

        def unpack(vec, s):
            return _unpack_factored(vec, template, s)

    else:
        y = initial.to_vector().copy()

        def f(vec):
            return rhs(template.with_vector(vec), cfg)

        def unpack(vec, s):
            return template.with_vector(vec.copy(), s)

    s = float(initial.s)
    out = []
    nstep = 0
    for target in times:
        while s < target - 1e-12 * max(1.0, target):
            h = min(max(cfg.ds, min(cfg.ds_rel * s, cfg.ds_max)), target - s)
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            s += h
            nstep += 1
            if nstep % check_every == 0:
                _check_state(unpack(y, s), cfg.psd_tol, s)
        s = float(target)
        state = unpack(y, s)
        _check_state(state, cfg.psd_tol, s)
        out.append(state)
        if record is not None:
            record(state)
    return out


def zero_state(K: int, rho_tilde, trace_per_dim: float) -> OrderParameterState:
    rho = np.atleast_1d(np.asarray(rho_tilde, dtype=float))
    M = rho.size
    z3 = np.zeros((M, K, K))
    z2 = np.zeros((K, K))
    return OrderParameterState(z3, z3.copy(), z3.copy(), z2, z2.copy(), z2.copy(), z2.copy(), rho, trace_per_dim)


def init_from_finite_D(
    D_init: int,
    K: int,
    spectrum: SpectralModel,
    seed=0,
    *,
    std: float = 1.0,
    decoder_std: float | None = None,
    tied: bool = False,
) -> OrderParameterState:
    """Order parameters of a randomly initialised network at dimension ``D_init``.

    The spectrum's outlier eigenvalues and bulk level are carried over in
    rescaled form, so a spectrum at any D can seed a network at ``D_init``.
    """
    from .autoencoder import AutoencoderState, measure_order_parameters
    from .spectra import SpikedCovarianceModel, spectral_model_of

    if D_init < 100:
        raise ValueError("D_init must be at least 100")
    if spectrum.dim == D_init:
        spec = spectrum
    else:
        rho = spectrum.rho_tilde - spectrum.bulk_level / spectrum.dim
        model = SpikedCovarianceModel.build(D_init, rho, spectrum.bulk_level, seed=seed)
        spec = spectral_model_of(model)
    state = AutoencoderState.random(K, D_init, seed=seed, std=std, decoder_std=decoder_std, tied=tied)
    return measure_order_parameters(state, spec)
