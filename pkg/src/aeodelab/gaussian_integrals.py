"""Gaussian expectations over local fields for linear, erf and ReLU units.

All closed forms take covariance entries of zero-mean jointly Gaussian
variables and broadcast over numpy arrays.  Notation:

    i2(c11, c12, c22)   E[g(x1) g(x2)]
    j2(c12, c22)        E[x1 g(x2)]
    i3(C)               E[g'(x1) x2 g(x3)]
    i21(c11, c12)       E[g'(x1) x1 x2]
    i22(c11, c12, c22)  E[g'(x1) x2^2]

The erf unit is g(x) = erf(x / sqrt(2)).  Its pair kernel carries the
arcsine; the form without it is only the first-order expansion in c12.
The ReLU pair kernel is the first-order arc-cosine kernel.  Every formula
here is certified against :func:`quadrature_oracle`.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

PSD_TOL = 1e-12
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Activation(str, enum.Enum):
    LINEAR = "linear"
    ERF = "erf"
    RELU = "relu"

    @classmethod
    def parse(cls, value: "Activation | str") -> "Activation":
        if isinstance(value, Activation):
            return value
        aliases = {"erf_scaled": "erf", "sigmoid": "erf", "sigmoidal": "erf"}
        key = aliases.get(str(value).lower(), str(value).lower())
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(a.value for a in cls)
            raise ValueError(f"unknown activation {value!r}; expected one of {valid}") from None


class NonPSDError(ValueError):
    """Raised when a moment matrix is not positive semi-definite."""


# ---------------------------------------------------------------------------
# activation functions themselves


def activation(act: Activation | str) -> Callable[[np.ndarray], np.ndarray]:
    act = Activation.parse(act)
    if act is Activation.LINEAR:
        return lambda x: np.asarray(x, dtype=float)
    if act is Activation.ERF:
        return lambda x: erf(np.asarray(x) / math.sqrt(2.0))
    return lambda x: np.maximum(np.asarray(x, dtype=float), 0.0)


def activation_derivative(act: Activation | str) -> Callable[[np.ndarray], np.ndarray]:
    act = Activation.parse(act)
    if act is Activation.LINEAR:
        return lambda x: np.ones_like(np.asarray(x, dtype=float))
    if act is Activation.ERF:
        return lambda x: _SQRT_2_OVER_PI * np.exp(-0.5 * np.asarray(x) ** 2)
    return lambda x: (np.asarray(x) > 0).astype(float)


# ---------------------------------------------------------------------------
# validation


def check_pair(c11, c12, c22) -> None:
    c11, c12, c22 = np.asarray(c11), np.asarray(c12), np.asarray(c22)
    scale = np.maximum(1.0, np.maximum(np.abs(c11), np.abs(c22)))
    if np.any(c11 < -PSD_TOL * scale) or np.any(c22 < -PSD_TOL * scale):
        raise NonPSDError("negative variance in moment pair")
    if np.any(c11 * c22 - c12**2 < -PSD_TOL * scale**2):
        raise NonPSDError("moment pair is not positive semi-definite")


def check_matrix(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"moment matrix must be square, got shape {C.shape}")
    if not np.allclose(C, C.T, atol=1e-12, rtol=0):
        raise NonPSDError("moment matrix is not symmetric")
    scale = max(1.0, float(np.max(np.abs(np.diag(C)))))
    if np.linalg.eigvalsh(C).min() < -PSD_TOL * scale:
        raise NonPSDError("moment matrix is not positive semi-definite")
    return C


def _safe_div(num, den):
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


# ---------------------------------------------------------------------------
# closed forms


def i2(act, c11, c12, c22, *, check: bool = True):
    """E[g(x1) g(x2)]."""
    act = Activation.parse(act)
    if check:
        check_pair(c11, c12, c22)
    c11, c12, c22 = (np.asarray(c, dtype=float) for c in (c11, c12, c22))
    if act is Activation.LINEAR:
        return c12 * 1.0
    if act is Activation.ERF:
        arg = c12 / np.sqrt((1.0 + c11) * (1.0 + c22))
        return (2.0 / math.pi) * np.arcsin(np.clip(arg, -1.0, 1.0))
    det = np.sqrt(np.maximum(c11 * c22 - c12**2, 0.0))
    norm = np.sqrt(c11 * c22)
    theta = np.arccos(np.clip(_safe_div(c12, norm), -1.0, 1.0))
    return (det + c12 * (math.pi - theta)) / (2.0 * math.pi)


def mean_gprime(act, q):
    """E[g'(x)] for x ~ N(0, q); equals E[x g(x)] / q by Stein's identity."""
    act = Activation.parse(act)
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("variance must be nonnegative")
    if act is Activation.LINEAR:
        return np.ones_like(q)
    if act is Activation.ERF:
        return _SQRT_2_OVER_PI / np.sqrt(1.0 + q)
    return np.full_like(q, 0.5)


def ratio_elamg_over_q(act, q):
    """E[lambda g(lambda)] / q for lambda ~ N(0, q), finite at q = 0."""
    return mean_gprime(act, q)


def j2(act, c12, c22):
    """E[x1 g(x2)] = c12 E[g'(x2)]."""
    return np.asarray(c12, dtype=float) * mean_gprime(act, c22)


def i3(act, C, *, check: bool = True):
    """E[g'(x1) x2 g(x3)] for a 3x3 covariance C (or a stack of them)."""
    act = Activation.parse(act)
    C = np.asarray(C, dtype=float)
    if check and C.ndim == 2:
        check_matrix(C)
    c11, c12, c13 = C[..., 0, 0], C[..., 0, 1], C[..., 0, 2]
    c23, c33 = C[..., 1, 2], C[..., 2, 2]
    if act is Activation.LINEAR:
        return c23 * 1.0
    if act is Activation.ERF:
        lam3 = (1.0 + c11) * (1.0 + c33) - c13**2
        if np.any(lam3 <= 0):
            raise ZeroDivisionError("singular erf i3 denominator")
        return (2.0 / math.pi) / np.sqrt(lam3) * (c23 * (1.0 + c11) - c12 * c13) / (1.0 + c11)
    # Stein on x2: c12 E[delta(x1) relu(x3)] + c23 E[H(x1) H(x3)]
    det13 = np.sqrt(np.maximum(c11 * c33 - c13**2, 0.0))
    gate = _safe_div(c12 * det13, 2.0 * math.pi * c11)
    corr = np.clip(_safe_div(c13, np.sqrt(c11 * c33)), -1.0, 1.0)
    both_on = 0.25 + np.arcsin(corr) / (2.0 * math.pi)
    return gate + c23 * both_on


def i21(act, c11, c12):
    """E[g'(x1) x1 x2]."""
    act = Activation.parse(act)
    c11, c12 = np.asarray(c11, dtype=float), np.asarray(c12, dtype=float)
    if act is Activation.LINEAR:
        return c12 * 1.0
    if act is Activation.ERF:
        return _SQRT_2_OVER_PI * c12 / (1.0 + c11) ** 1.5
    return 0.5 * c12


def i22(act, c11, c12, c22):
    """E[g'(x1) x2^2]."""
    act = Activation.parse(act)
    c11, c12, c22 = (np.asarray(c, dtype=float) for c in (c11, c12, c22))
    if act is Activation.LINEAR:
        return c22 * 1.0
    if act is Activation.ERF:
        return _SQRT_2_OVER_PI * (c11 * c22 - c12**2 + c22) / (1.0 + c11) ** 1.5
    return 0.5 * c22


# ---------------------------------------------------------------------------
# rejected pair kernels, kept so tests can show they disagree with the oracle


def erf_i2_without_arcsine(c11, c12, c22):
    """First-order-in-c12 erf pair kernel; gives 1/pi at unit entries instead of 1/3."""
    return (2.0 / math.pi) * np.asarray(c12) / np.sqrt((1.0 + np.asarray(c11)) * (1.0 + np.asarray(c22)))


def relu_i2_additive_arctan(c11, c12, c22):
    """ReLU pair kernel with a 1/(8 pi) prefactor and an additive arctan term.

    Gives 1/(4 pi) for independent unit variances, where the truth is 1/(2 pi).
    """
    c11, c12, c22 = (np.asarray(c, dtype=float) for c in (c11, c12, c22))
    det = np.sqrt(c11 * c22 - c12**2)
    return (2.0 * det + c12 * math.pi + 2.0 * c12 + np.arctan(c12 / det)) / (8.0 * math.pi)


# ---------------------------------------------------------------------------
# numerical oracle

_GH_NODES = 80
_GL_NODES = 64
_CUTOFF = 12.0


def _hermite_rule(n: int):
    z, w = np.polynomial.hermite_e.hermegauss(n)
    return z, w / math.sqrt(2.0 * math.pi)


def quadrature_oracle(
    factors: Sequence[Callable[[np.ndarray], np.ndarray]],
    C: np.ndarray,
    kinks: Sequence[bool] | None = None,
    *,
    nodes: int = _GH_NODES,
) -> float:
    """E[prod_i factors[i](x_i)] for x ~ N(0, C) by iterated quadrature.

    The covariance is whitened with a Cholesky factor (zero pivots are
    allowed for PSD-singular input), so x = L z with z standard normal, and
    the z-coordinates are integrated one at a time.  Levels without a kink
    use Gauss-Hermite; a factor flagged in ``kinks`` is non-smooth (or
    steep) at x_i = 0, and every level touching x_i is split where the
    partial sum of x_i vanishes into Gauss-Legendre pieces on [-12, 12].
    """
    C = check_matrix(C)
    n = C.shape[0]
    if len(factors) != n:
        raise ValueError("need one factor per variable")
    kinks = list(kinks) if kinks is not None else [False] * n
    # kinked factors first: their breakpoints then land on early, exact levels
    order = sorted(range(n), key=lambda i: not kinks[i])
    factors = [factors[i] for i in order]
    kinks = [kinks[i] for i in order]
    C = C[np.ix_(order, order)]
    L = _psd_cholesky(C)
    scale = np.abs(L).max() if L.size else 1.0
    active = np.abs(L) > 1e-14 * max(scale, 1e-300)
    last = [max((j for j in range(n) if active[i, j]), default=-1) for i in range(n)]

    gh = _hermite_rule(nodes)
    gl_u, gl_w = np.polynomial.legendre.leggauss(_GL_NODES)

    def level(j: int, zprev: np.ndarray) -> np.ndarray:
        # zprev: (batch, j) fixed outer coordinates
        batch = zprev.shape[0]
        if j == n:
            x = zprev @ L.T
            out = np.ones(batch)
            for i, f in enumerate(factors):
                out = out * f(x[:, i])
            return out
        breaks_per_row = []
        for i in range(n):
            # a kink whose remaining variance is small is nearly a kink at this level too
            if kinks[i] and last[i] >= j and active[i, j]:
                offset = zprev @ L[i, :j] if j else np.zeros(batch)
                breaks_per_row.append(-offset / L[i, j])
        if not breaks_per_row:
            zs, ws = gh
            zz = np.repeat(zprev, len(zs), axis=0)
            znew = np.tile(zs, batch)[:, None]
            vals = level(j + 1, np.hstack([zz, znew]))
            return (vals.reshape(batch, len(zs)) * ws).sum(axis=1)
        # one Gauss-Legendre rule per piece, mapped row-wise between sorted breaks
        pts = np.clip(np.sort(np.stack(breaks_per_row, axis=1), axis=1), -_CUTOFF, _CUTOFF)
        edges = np.hstack([np.full((batch, 1), -_CUTOFF), pts, np.full((batch, 1), _CUTOFF)])
        lo, hi = edges[:, :-1], edges[:, 1:]
        half = 0.5 * (hi - lo)
        zs = lo[:, :, None] + half[:, :, None] * (gl_u + 1.0)
        ws = half[:, :, None] * gl_w * np.exp(-0.5 * zs**2) / math.sqrt(2.0 * math.pi)
        per_row = zs.shape[1] * zs.shape[2]
        zs = zs.reshape(batch, per_row)
        ws = ws.reshape(batch, per_row)
        zz = np.repeat(zprev, per_row, axis=0)
        vals = level(j + 1, np.hstack([zz, zs.reshape(-1, 1)]))
        return (vals.reshape(batch, per_row) * ws).sum(axis=1)

    return float(level(0, np.zeros((1, 0)))[0])


def _psd_cholesky(C: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = C, tolerating zero pivots."""
    n = C.shape[0]
    L = np.zeros_like(C)
    scale = max(1.0, float(np.max(np.abs(np.diag(C)))))
    for j in range(n):
        d = C[j, j] - L[j, :j] @ L[j, :j]
        if d <= 1e-13 * scale:
            continue
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            L[i, j] = (C[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return L


def oracle_expectation(kind: str, act, C: np.ndarray) -> float:
    """Oracle value of one named integral (``i2``, ``j2``, ``i3``, ``i21``, ``i22``)."""
    act = Activation.parse(act)
    g = activation(act)
    dg = activation_derivative(act)
    # erf of a wide input is close to a step, so it is split like a kink
    kink = act is not Activation.LINEAR
    ident = lambda x: x  # noqa: E731
    square = lambda x: x * x  # noqa: E731
    C = np.asarray(C, dtype=float)
    if kind == "i2":
        return quadrature_oracle([g, g], C, [kink, kink])
    if kind == "j2":
        return quadrature_oracle([ident, g], C, [False, kink])
    if kind == "i3":
        return quadrature_oracle([dg, ident, g], C, [kink, False, kink])
    if kind == "i21":
        return quadrature_oracle([lambda x: dg(x) * x, ident], C, [kink, False])
    if kind == "i22":
        return quadrature_oracle([dg, square], C, [kink, False])
    raise ValueError(f"unknown integral {kind!r}")


def closed_form(kind: str, act, C: np.ndarray) -> float:
    """Closed-form counterpart of :func:`oracle_expectation`."""
    C = np.asarray(C, dtype=float)
    if kind == "i2":
        return float(i2(act, C[0, 0], C[0, 1], C[1, 1]))
    if kind == "j2":
        return float(j2(act, C[0, 1], C[1, 1]))
    if kind == "i3":
        return float(i3(act, C))
    if kind == "i21":
        return float(i21(act, C[0, 0], C[0, 1]))
    if kind == "i22":
        return float(i22(act, C[0, 0], C[0, 1], C[1, 1]))
    raise ValueError(f"unknown integral {kind!r}")
