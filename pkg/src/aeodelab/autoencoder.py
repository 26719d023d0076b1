"""Finite-D shallow autoencoder trained by one-pass SGD.

    lambda = W x / sqrt(D) + b,   nu = V x / D,   x_hat = V^T g(lambda)

With rescaled learning rates (eta_W = eta / D, eta_V = eta) one unit of
training time s corresponds to D samples.  The inner loop is compiled with
numba and processes a whole block of samples per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .gaussian_integrals import Activation, activation, activation_derivative, i2, j2
from .order_params import OrderParameterState
from .spectra import (
    CovarianceSampler,
    LatentLaw,
    SpectralModel,
    SpikedCovarianceModel,
    sample_batch,
)

_ACT_CODE = {Activation.LINEAR: 0, Activation.ERF: 1, Activation.RELU: 2}


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite weights after step {step}")
        self.step = step


@dataclass
class AutoencoderState:
    """Encoder W and decoder V (both K x D).  Tied networks share one array."""

    W: np.ndarray
    V: np.ndarray
    activation: Activation = Activation.ERF
    b: np.ndarray | None = None
    tied: bool = False
    scaled_fields: bool = True  # lambda = w.x / sqrt(D); False gives lambda = w.x

    def __post_init__(self):
        self.activation = Activation.parse(self.activation)
        self.W = np.ascontiguousarray(self.W, dtype=float)
        if self.tied:
            self.V = self.W
        else:
            self.V = np.ascontiguousarray(self.V, dtype=float)
            if self.V.shape != self.W.shape:
                raise ValueError("encoder and decoder shapes differ")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=float).copy()

    @classmethod
    def random(
        cls,
        K: int,
        D: int,
        activation="erf",
        *,
        seed=0,
        std: float = 1.0,
        decoder_std: float | None = None,
        tied: bool = False,
        bias: bool = False,
        scaled_fields: bool = True,
    ) -> "AutoencoderState":
        rng = np.random.default_rng(seed)
        W = std * rng.standard_normal((K, D))
        V = W if tied else (std if decoder_std is None else decoder_std) * rng.standard_normal((K, D))
        return cls(W, V, activation, np.zeros(K) if bias else None, tied, scaled_fields)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    @property
    def field_scale(self) -> float:
        return 1.0 / math.sqrt(self.D) if self.scaled_fields else 1.0

    def copy(self) -> "AutoencoderState":
        return AutoencoderState(
            self.W.copy(),
            None if self.tied else self.V.copy(),
            self.activation,
            None if self.b is None else self.b.copy(),
            self.tied,
            self.scaled_fields,
        )


@dataclass
class TrainConfig:
    eta: float = 1.0
    kappa: float = 0.0
    rescale_lr: bool = True
    lr_schedule: str = "constant"  # or "inverse_time": eta / (1 + t / lr_decay_steps)
    lr_decay_steps: float = 1.0e4
    steps: int = 10_000
    seed: int = 0
    truncated: bool = False
    train_bias: bool = False
    bias_rate: float | None = None  # defaults to the decoder rate eta_V
    log_factor: float = 1.2
    n_eval: int = 0  # Monte-Carlo samples per PMSE point; 0 means exact Gaussian PMSE

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.lr_schedule not in ("constant", "inverse_time"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def forward(state: AutoencoderState, x: np.ndarray):
    """Return (x_hat, lambda, nu) for one input or a batch of row inputs."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != state.D:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {state.D}")
    lam = state.field_scale * (x @ state.W.T)
    if state.b is not None:
        lam = lam + state.b
    nu = x @ state.V.T / state.D
    x_hat = activation(state.activation)(lam) @ state.V
    return x_hat, lam, nu


def sample_loss(state: AutoencoderState, x: np.ndarray, truncate_at: int | None = None) -> float:
    """Half squared reconstruction error, optionally using only units 0..truncate_at."""
    _, lam, _ = forward(state, x)
    g = activation(state.activation)(lam)
    if truncate_at is not None:
        g = g.copy()
        g[truncate_at + 1 :] = 0.0
    d = g @ state.V - x
    return 0.5 * float(d @ d)


# ---------------------------------------------------------------------------
# step sizes


def _rates(state: AutoencoderState, cfg: TrainConfig) -> tuple[float, float, float, float]:
    """Multipliers (a_w, a_v, a_b, decay) applied to the raw per-sample gradients."""
    D = state.D
    if cfg.rescale_lr:
        eta_w, eta_v = cfg.eta / D, cfg.eta
        a_w, a_v = eta_w / D, eta_v / D
        decay = cfg.kappa / D
    else:
        a_w = a_v = cfg.eta
        decay = cfg.eta * cfg.kappa
    rate_b = cfg.bias_rate if cfg.bias_rate is not None else (cfg.eta if cfg.rescale_lr else cfg.eta * D)
    a_b = rate_b / D
    return a_w, a_v, a_b, decay


# ---------------------------------------------------------------------------
# compiled inner loop


@numba.njit(cache=True, nogil=True, inline="always")
def _g(code, x):
    if code == 0:
        return x
    if code == 1:
        return math.erf(x * 0.7071067811865476)
    return x if x > 0.0 else 0.0


@numba.njit(cache=True, nogil=True, inline="always")
def _gp(code, x):
    if code == 0:
        return 1.0
    if code == 1:
        return 0.7978845608028654 * math.exp(-0.5 * x * x)
    return 1.0 if x > 0.0 else 0.0


@numba.njit(cache=True, nogil=True)
def _sgd_block(W, V, b, X, code, scale, a_w, a_v, a_b, decay, tied, truncated, train_bias, step0, decay_steps):
    """Apply one SGD step per row of X in order.  Returns the index of the first
    row after which a weight became non-finite, or -1."""
    K, D = W.shape
    lam = np.empty(K)
    gv = np.empty(K)
    gpv = np.empty(K)
    c = np.empty(K)
    delta = np.empty(D)
    part = np.empty(D)
    n = X.shape[0]
    for s in range(n):
        x = X[s]
        lr = 1.0
        if decay_steps > 0.0:
            lr = 1.0 / (1.0 + (step0 + s) / decay_steps)
        for k in range(K):
            acc = 0.0
            for i in range(D):
                acc += W[k, i] * x[i]
            lam[k] = scale * acc + b[k]
            gv[k] = _g(code, lam[k])
            gpv[k] = _gp(code, lam[k])
        if truncated:
            # row k sees the residual of units 0..k only
            for i in range(D):
                part[i] = -x[i]
            for k in range(K):
                acc = 0.0
                for i in range(D):
                    part[i] += V[k, i] * gv[k]
                for i in range(D):
                    acc += V[k, i] * part[i]
                c[k] = acc
                fv = lr * a_v * gv[k]
                fw = lr * a_w * acc * gpv[k] * scale
                keep = 1.0 - lr * decay
                for i in range(D):
                    V[k, i] = keep * V[k, i] - fv * part[i]
                    W[k, i] = keep * W[k, i] - fw * x[i]
                if train_bias:
                    b[k] -= lr * a_b * acc * gpv[k]
        else:
            for i in range(D):
                acc = -x[i]
                for k in range(K):
                    acc += V[k, i] * gv[k]
                delta[i] = acc
            for k in range(K):
                acc = 0.0
                for i in range(D):
                    acc += V[k, i] * delta[i]
                c[k] = acc
            keep = 1.0 - lr * decay
            for k in range(K):
                fv = lr * a_v * gv[k]
                fw = lr * a_w * c[k] * gpv[k] * scale
                if tied:
                    for i in range(D):
                        W[k, i] = keep * W[k, i] - fw * x[i] - fv * delta[i]
                else:
                    for i in range(D):
                        V[k, i] = keep * V[k, i] - fv * delta[i]
                        W[k, i] = keep * W[k, i] - fw * x[i]
                if train_bias:
                    b[k] -= lr * a_b * c[k] * gpv[k]
        if not (math.isfinite(lam[0]) and math.isfinite(c[0])):
            return s
    for k in range(K):
        for i in range(D):
            if not (math.isfinite(W[k, i]) and math.isfinite(V[k, i])):
                return n - 1
    return -1


def _run_block(state: AutoencoderState, X: np.ndarray, cfg: TrainConfig, step0: int) -> None:
    if cfg.truncated and state.tied:
        raise ValueError("truncated SGD needs an untied decoder")
    if cfg.train_bias and state.b is None:
        state.b = np.zeros(state.K)
    a_w, a_v, a_b, decay = _rates(state, cfg)
    b = state.b if state.b is not None else np.zeros(state.K)
    decay_steps = cfg.lr_decay_steps if cfg.lr_schedule == "inverse_time" else 0.0
    bad = _sgd_block(
        state.W,
        state.V,
        b,
        np.ascontiguousarray(X, dtype=float),
        _ACT_CODE[state.activation],
        state.field_scale,
        a_w,
        a_v,
        a_b,
        decay,
        state.tied,
        cfg.truncated,
        cfg.train_bias,
        float(step0),
        float(decay_steps),
    )
    if bad >= 0:
        raise DivergenceError(step0 + bad)


def sgd_step_vanilla(state: AutoencoderState, x: np.ndarray, cfg: TrainConfig, step: int = 0) -> AutoencoderState:
    """One plain SGD step on a copy of ``state``."""
    new = state.copy()
    _run_block(new, np.asarray(x, dtype=float)[None, :], _with(cfg, truncated=False), step)
    return new


def sgd_step_truncated(state: AutoencoderState, x: np.ndarray, cfg: TrainConfig, step: int = 0) -> AutoencoderState:
    """One SGD step where unit k only sees the residual left by units 0..k."""
    if state.tied:
        raise ValueError("truncated SGD needs an untied decoder")
    new = state.copy()
    _run_block(new, np.asarray(x, dtype=float)[None, :], _with(cfg, truncated=True), step)
    return new


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    d = dict(cfg.__dict__)
    d.update(changes)
    return TrainConfig(**d)


def loss_gradients(state: AutoencoderState, x: np.ndarray, truncated: bool = False):
    """Gradients (dL/dW, dL/dV, dL/db) of the per-sample loss, in numpy.

    With ``truncated`` the rows are the gradients of each unit's own
    truncated objective, which is what truncated SGD follows.
    """
    _, lam, _ = forward(state, x)
    g = activation(state.activation)(lam)
    gp = activation_derivative(state.activation)(lam)
    if truncated:
        resid = np.cumsum(g[:, None] * state.V, axis=0) - x
    else:
        resid = np.broadcast_to(g @ state.V - x, state.V.shape)
    c = np.einsum("ki,ki->k", state.V, resid)
    gV = g[:, None] * resid
    gW = (c * gp)[:, None] * state.field_scale * x[None, :]
    gb = c * gp
    return gW, gV, gb


# ---------------------------------------------------------------------------
# input sources


class Source:
    """Anything that hands out blocks of inputs."""

    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class SpikedSource(Source):
    def __init__(self, model: SpikedCovarianceModel):
        self.model = model
        self.dim = model.dim

    def sample(self, n, rng):
        return sample_batch(self.model, n, rng)

    def is_gaussian(self) -> bool:
        return self.model.latent_law is LatentLaw.GAUSSIAN

    def cov_apply(self, M: np.ndarray) -> np.ndarray:
        """Omega @ M for a D x n matrix, using the low-rank structure."""
        A = self.model.spike_basis
        return A @ (self.model.rho_tilde[:, None] * (A.T @ M)) + self.model.sigma * M

    def trace_per_dim(self) -> float:
        return float(self.model.rho_tilde.sum() * self.model.dim + self.model.sigma * self.model.dim) / self.model.dim


class GaussianSource(Source):
    """Gaussian inputs with a dense covariance."""

    def __init__(self, cov: np.ndarray):
        self.cov = np.asarray(cov, dtype=float)
        self.sampler = CovarianceSampler(self.cov)
        self.dim = self.cov.shape[0]

    def sample(self, n, rng):
        return self.sampler.sample(n, rng)

    def is_gaussian(self) -> bool:
        return True

    def cov_apply(self, M):
        return self.cov @ M

    def trace_per_dim(self) -> float:
        return float(np.trace(self.cov)) / self.dim


class DatasetSource(Source):
    """Rows of a centred data matrix drawn uniformly with replacement."""

    def __init__(self, X: np.ndarray, center: bool = True):
        X = np.asarray(X, dtype=float)
        self.X = X - X.mean(axis=0) if center else X
        self.dim = X.shape[1]

    def sample(self, n, rng):
        return self.X[rng.integers(0, self.X.shape[0], size=n)]

    def is_gaussian(self) -> bool:
        return False

    def covariance(self) -> np.ndarray:
        return self.X.T @ self.X / self.X.shape[0]


def as_source(data) -> Source:
    if isinstance(data, Source):
        return data
    if isinstance(data, SpikedCovarianceModel):
        return SpikedSource(data)
    raise TypeError(f"cannot draw inputs from {type(data).__name__}")


# ---------------------------------------------------------------------------
# evaluation


def pmse_estimate(state: AutoencoderState, data, n_eval: int = 10_000, rng=None) -> tuple[float, float]:
    """Monte-Carlo PMSE (1/D)|x - x_hat|^2 with its standard error."""
    if n_eval < 2:
        raise ValueError("n_eval must be at least 2")
    rng = np.random.default_rng(rng)
    if isinstance(data, np.ndarray):
        X = data[:n_eval]
    else:
        X = as_source(data).sample(n_eval, rng)
    errs = []
    for lo in range(0, X.shape[0], 4096):
        xb = X[lo : lo + 4096]
        x_hat, _, _ = forward(state, xb)
        errs.append(((x_hat - xb) ** 2).mean(axis=1))
    e = np.concatenate(errs)
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))


def field_moments(state: AutoencoderState, source) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact (Q1, R1, T1) = covariances of (lambda, lambda), (nu, lambda), (nu, nu)."""
    source = as_source(source)
    D = state.D
    s = state.field_scale
    OW = source.cov_apply(state.W.T)
    OV = OW if state.tied else source.cov_apply(state.V.T)
    Q1 = s * s * state.W @ OW
    R1 = s * state.V @ OW / D
    T1 = state.V @ OV / D**2
    return Q1, R1, T1


def pmse_gaussian(state: AutoencoderState, source) -> float:
    """Population error for zero-mean Gaussian inputs and no bias, from the field moments."""
    source = as_source(source)
    Q1, R1, _ = field_moments(state, source)
    T0 = state.V @ state.V.T / state.D
    d = np.diag(Q1)
    I2 = i2(state.activation, d[:, None], Q1, d[None, :], check=False)
    J2 = j2(state.activation, np.diag(R1), d)
    return float(source.trace_per_dim() - 2.0 * J2.sum() + (T0 * I2).sum())


def measure_order_parameters(state: AutoencoderState, spectrum: SpectralModel, source=None) -> OrderParameterState:
    """Spike densities from projections on the outlier eigenvectors; bulk by subtraction.

    The full moments come from ``source`` when given (exact covariance), else
    from the spectrum assuming a flat bulk.
    """
    D = state.D
    if spectrum.dim != D:
        raise ValueError(f"spectrum has dimension {spectrum.dim}, network has {D}")
    G = spectrum.eigenvectors  # (M, D), squared norm D
    wm = (G @ state.W.T / math.sqrt(D)) * (state.field_scale * math.sqrt(D))  # (M, K)
    vm = G @ state.V.T / math.sqrt(D)
    q = wm[:, :, None] * wm[:, None, :]
    r = vm[:, :, None] * wm[:, None, :] / math.sqrt(D)
    t = vm[:, :, None] * vm[:, None, :] / D
    rho = spectrum.rho_tilde
    if source is None:
        # Omega = sum_m (rho_m - beta) Gamma_m Gamma_m^T / D + beta I with a flat bulk beta
        beta = spectrum.bulk_level
        sc = state.field_scale
        Qb = beta * (sc * sc * state.W @ state.W.T - q.sum(0) / D)
        Rb = beta * (sc * state.V @ state.W.T / D - r.sum(0) / D)
        Tb = beta * (state.V @ state.V.T / D**2 - t.sum(0) / D)
    else:
        Q1, R1, T1 = field_moments(state, source)
        Qb = Q1 - (rho[:, None, None] * q).sum(0)
        Rb = R1 - (rho[:, None, None] * r).sum(0)
        Tb = T1 - (rho[:, None, None] * t).sum(0)
    T0 = state.V @ state.V.T / D
    return OrderParameterState(q, r, t, Qb, Rb, Tb, T0, rho.copy(), spectrum.trace / D)


def subspace_metrics(state: AutoencoderState, spectrum: SpectralModel, k_top: int | None = None):
    """Per-row |cos| between w^k and Gamma_k, and |P_W - P_Gamma|_F."""
    k_top = state.K if k_top is None else k_top
    if k_top > spectrum.num_outliers:
        raise ValueError("k_top exceeds the number of known outliers")
    W = state.W
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm encoder row")
    G = spectrum.eigenvectors[:k_top]
    Gn = G / np.linalg.norm(G, axis=1, keepdims=True)
    n = min(k_top, state.K)
    overlaps = np.abs(np.einsum("ki,ki->k", W[:n], Gn[:n])) / norms[:n]
    Qw, _ = np.linalg.qr(W.T)
    Pw = Qw @ Qw.T
    Pg = Gn.T @ Gn
    return overlaps, float(np.linalg.norm(Pw - Pg))


# ---------------------------------------------------------------------------
# training loop


def geometric_steps(total: int, factor: float = 1.2, first: int = 1) -> np.ndarray:
    """0, then step counts growing by ``factor`` up to and including ``total``."""
    pts = [0]
    v = float(first)
    while v < total:
        pts.append(int(round(v)))
        v = max(v * factor, v + 1)
    pts.append(total)
    return np.unique(np.array(pts, dtype=np.int64))


_BLOCK = 4096


def train(
    state: AutoencoderState,
    data,
    cfg: TrainConfig,
    *,
    spectrum: SpectralModel | None = None,
    log_steps=None,
    measure=None,
):
    """Run ``cfg.steps`` one-pass SGD steps in place and return a :class:`Trace`.

    PMSE is evaluated exactly from the field moments when the inputs are
    Gaussian and there is no bias; otherwise by Monte Carlo on fresh samples.
    ``measure(state)`` may return extra columns for every logged row.
    """
    from .traces import Trace

    source = as_source(data)
    if source.dim != state.D:
        raise ValueError(f"inputs have dimension {source.dim}, network expects {state.D}")
    if cfg.truncated and state.tied:
        raise ValueError("truncated SGD needs an untied decoder")
    if cfg.train_bias and state.b is None:
        state.b = np.zeros(state.K)
    data_seq, eval_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng = np.random.default_rng(data_seq)
    eval_rng = np.random.default_rng(eval_seq)
    steps = geometric_steps(cfg.steps, cfg.log_factor) if log_steps is None else np.unique(np.asarray(log_steps))
    steps = steps[steps <= cfg.steps]
    exact = getattr(source, "is_gaussian", lambda: False)() and state.b is None and hasattr(source, "cov_apply")
    n_eval = cfg.n_eval if cfg.n_eval else (0 if exact else 2000)
    trace = Trace()
    D = state.D

    def log(step):
        row = {"s": step / D}
        if n_eval == 0:
            row["pmse"], row["pmse_stderr"] = pmse_gaussian(state, source), 0.0
        else:
            row["pmse"], row["pmse_stderr"] = pmse_estimate(state, source, n_eval, eval_rng)
        if spectrum is not None:
            src = source if hasattr(source, "cov_apply") else None
            row.update(measure_order_parameters(state, spectrum, src).flat_columns())
        if measure is not None:
            row.update(measure(state))
        trace.append(row)

    done = 0
    for target in steps:
        while done < target:
            n = int(min(_BLOCK, target - done))
            _run_block(state, source.sample(n, data_rng), cfg, done)
            done += n
        log(int(target))
    return trace
