"""Long-time dynamics on the PCA-aligned manifold.

With K = M and weights proportional to the outlier eigenvectors,

    w^k = alpha_w^k Gamma^k / sqrt(D),   v^k = alpha_v^k Gamma^k,

the order parameters are diagonal and every mode evolves on its own.  With
Q = rho alpha_w^2 the variance of lambda^k the drifts are

    d alpha_v / ds = eta (rho alpha_w E[g'] - alpha_v E[g^2])
    d alpha_w / ds = eta rho alpha_v E[g'] / (1 + Q) (1 - alpha_v alpha_w sqrt(2 (1 + Q) / (pi (1 + 2Q))))   (erf)
    d alpha_w / ds = eta rho alpha_v (1 - alpha_v alpha_w)   (linear)

which is the full order-parameter flow restricted to the manifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .gaussian_integrals import Activation, i2, mean_gprime

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass
class AlignedState:
    alpha_w: np.ndarray
    alpha_v: np.ndarray
    rho_tilde: np.ndarray
    activation: Activation = Activation.ERF

    def __post_init__(self):
        self.activation = Activation.parse(self.activation)
        self.alpha_w = np.atleast_1d(np.asarray(self.alpha_w, dtype=float))
        self.alpha_v = np.atleast_1d(np.asarray(self.alpha_v, dtype=float))
        self.rho_tilde = np.atleast_1d(np.asarray(self.rho_tilde, dtype=float))
        if not (self.alpha_w.shape == self.alpha_v.shape == self.rho_tilde.shape):
            raise ValueError("alpha_w, alpha_v and rho_tilde need the same length")
        if np.any(self.rho_tilde <= 0):
            raise ValueError("rho_tilde must be positive")
        if not (np.all(np.isfinite(self.alpha_w)) and np.all(np.isfinite(self.alpha_v))):
            raise ValueError("non-finite scale constants")

    @property
    def K(self) -> int:
        return self.rho_tilde.size


def _check_supported(act: Activation) -> None:
    if act not in (Activation.ERF, Activation.LINEAR):
        raise ValueError(f"aligned-manifold equations cover erf and linear only, got {act.value}")


def reduced_rhs(state: AlignedState, eta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(d alpha_v / ds, d alpha_w / ds) of every mode."""
    act = state.activation
    _check_supported(act)
    aw, av, rho = state.alpha_w, state.alpha_v, state.rho_tilde
    Q = rho * aw**2
    egp = mean_gprime(act, Q)
    eg2 = i2(act, Q, Q, Q, check=False)
    dav = eta * (rho * aw * egp - av * eg2)
    if act is Activation.LINEAR:
        daw = eta * rho * av * (1.0 - av * aw)
    else:
        daw = eta * rho * av * egp / (1.0 + Q) * (1.0 - av * aw * _SQRT_2_OVER_PI * np.sqrt((1.0 + Q) / (1.0 + 2.0 * Q)))
    return dav, daw


def reduced_rhs_sqrt_decoder(state: AlignedState, eta: float = 1.0):
    """Erf drifts with a square-root decoder term, the square root clamped at zero.

    Returns (d alpha_v, d alpha_w, clamped) where ``clamped`` flags modes whose
    radicand 2 pi (1 + Q) - 2 alpha_v alpha_w went negative.  Kept for
    comparison only: its decoder drift does not follow from the full flow and
    drives alpha_w ~ s^(-1/2) instead of s^(-1/6).
    """
    if state.activation is not Activation.ERF:
        raise ValueError("square-root decoder drift exists for erf only")
    aw, av, rho = state.alpha_w, state.alpha_v, state.rho_tilde
    Q = rho * aw**2
    radicand = 2.0 * math.pi * (1.0 + Q) - 2.0 * av * aw
    clamped = radicand < 0
    dav = eta * rho * aw / (math.pi * (1.0 + Q)) * np.sqrt(np.maximum(radicand, 0.0))
    daw = eta * rho * av * np.sqrt(2.0 / (math.pi * (1.0 + Q) ** 3)) * (
        1.0 - np.sqrt(2.0 * (1.0 + Q) / (math.pi * (1.0 + 2.0 * Q))) * av * aw
    )
    return dav, daw, clamped


@dataclass
class AlignedTrajectory:
    s: np.ndarray
    alpha_w: np.ndarray  # (n, K)
    alpha_v: np.ndarray
    pmse: np.ndarray

    def rows(self) -> list[dict[str, float]]:
        out = []
        for i, s in enumerate(self.s):
            row = {"s": float(s), "pmse": float(self.pmse[i])}
            for k in range(self.alpha_w.shape[1]):
                row[f"alpha_w_{k}"] = float(self.alpha_w[i, k])
                row[f"alpha_v_{k}"] = float(self.alpha_v[i, k])
            out.append(row)
        return out


def integrate_reduced(
    initial: AlignedState,
    times,
    *,
    eta: float = 1.0,
    tail: float = 0.0,
    sqrt_decoder: bool = False,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> AlignedTrajectory:
    """Integrate the aligned-manifold flow from s = 0 through ``times``.

    The PMSE column uses the exact aligned error plus ``tail``.
    """
    times = np.asarray(times, dtype=float)
    K = initial.K
    act, rho = initial.activation, initial.rho_tilde

    def f(_, y):
        st = AlignedState(y[:K], y[K:], rho, act)
        if sqrt_decoder:
            dav, daw, _ = reduced_rhs_sqrt_decoder(st, eta)
        else:
            dav, daw = reduced_rhs(st, eta)
        return np.concatenate([daw, dav])

    y0 = np.concatenate([initial.alpha_w, initial.alpha_v])
    sol = solve_ivp(f, (0.0, float(times[-1])), y0, t_eval=times, method="LSODA", rtol=rtol, atol=atol)
    if not sol.success:
        raise FloatingPointError(f"aligned-manifold integration failed: {sol.message}")
    aw, av = sol.y[:K].T, sol.y[K:].T
    pm = np.array([pmse_aligned_exact(AlignedState(a, b, rho, act), tail) for a, b in zip(aw, av)])
    return AlignedTrajectory(sol.t, aw, av, pm)


def fixed_point_alpha_v(act, alpha_w, rho_tilde) -> np.ndarray:
    """Decoder scale at which the closed-form bracket f_k vanishes."""
    act = Activation.parse(act)
    _check_supported(act)
    alpha_w = np.asarray(alpha_w, dtype=float)
    if np.any(alpha_w == 0):
        raise ValueError("alpha_w must be nonzero")
    if act is Activation.LINEAR:
        return 1.0 / alpha_w
    return np.sqrt(0.5 * math.pi * (1.0 + rho_tilde * alpha_w**2)) / alpha_w


def bracket_terms(state: AlignedState) -> np.ndarray:
    """Closed-form f_k, which takes E[g^2] = (2/pi) Q / (1 + Q) for erf."""
    act = state.activation
    _check_supported(act)
    aw, av, rho = state.alpha_w, state.alpha_v, state.rho_tilde
    Q = rho * aw**2
    if act is Activation.LINEAR:
        return av**2 * Q - 2.0 * aw * av * rho + rho
    return (2.0 / math.pi) * av**2 * Q / (1.0 + Q) - 2.0 * np.sqrt(2.0 / (math.pi * (1.0 + Q))) * aw * av * rho + rho


def pmse_reduced(state: AlignedState, tail: float) -> float:
    """sum_k f_k + tail with the closed-form brackets."""
    return float(bracket_terms(state).sum() + tail)


def pmse_aligned_exact(state: AlignedState, tail: float) -> float:
    """PMSE of the aligned network from the exact erf/linear second moment."""
    act = state.activation
    _check_supported(act)
    aw, av, rho = state.alpha_w, state.alpha_v, state.rho_tilde
    Q = rho * aw**2
    eg2 = i2(act, Q, Q, Q, check=False)
    f = rho + av**2 * eg2 - 2.0 * av * aw * rho * mean_gprime(act, Q)
    return float(f.sum() + tail)


def powerlaw_fit(s, alpha_w, alpha_v, window: tuple[float, float], eta: float = 1.0) -> tuple[float, float]:
    """Least-squares slopes of log|alpha_w| and log|alpha_v| against log(eta s) inside ``window``."""
    lo, hi = window
    if not (0 < lo < hi) or hi / lo < 100.0:
        raise ValueError("fit window must span at least two decades")
    s = np.asarray(s, dtype=float)
    aw = np.linalg.norm(np.asarray(alpha_w, dtype=float).reshape(s.size, -1), axis=1)
    av = np.linalg.norm(np.asarray(alpha_v, dtype=float).reshape(s.size, -1), axis=1)
    sel = (s >= lo) & (s <= hi)
    if sel.sum() < 3:
        raise ValueError("fewer than three trajectory points inside the fit window")
    x = np.log(eta * s[sel])
    slope_w = np.polyfit(x, np.log(aw[sel]), 1)[0]
    slope_v = np.polyfit(x, np.log(av[sel]), 1)[0]
    return float(slope_w), float(slope_v)


def aligned_order_parameters(state: AlignedState, tail: float = 0.0):
    """Full-engine state on the aligned manifold (K = M, no bulk overlap)."""
    from .order_params import OrderParameterState

    K = state.K
    q = np.zeros((K, K, K))
    r = np.zeros_like(q)
    t = np.zeros_like(q)
    for k in range(K):
        q[k, k, k] = state.alpha_w[k] ** 2
        r[k, k, k] = state.alpha_v[k] * state.alpha_w[k]
        t[k, k, k] = state.alpha_v[k] ** 2
    z = np.zeros((K, K))
    T0 = np.diag(state.alpha_v**2)
    return OrderParameterState(q, r, t, z, z.copy(), z.copy(), T0, state.rho_tilde.copy(), float(state.rho_tilde.sum() + tail))


def aligned_readout(ops) -> tuple[np.ndarray, np.ndarray]:
    """(alpha_w, alpha_v) from the diagonal spike densities of a full-engine state."""
    K = ops.K
    idx = np.arange(K)
    aw = np.sqrt(np.maximum(ops.q[idx, idx, idx], 0.0))
    rr = ops.r[idx, idx, idx]
    av = np.where(aw > 0, rr / np.where(aw > 0, aw, 1.0), np.sqrt(np.maximum(ops.t[idx, idx, idx], 0.0)))
    return aw, av
