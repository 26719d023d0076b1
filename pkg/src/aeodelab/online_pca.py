"""Streaming PCA baselines: Hebbian, Oja and Sanger rules, and offline PCA.

All rules use the output y^k = w^k . x / sqrt(D) and a step (eta / sqrt(D)).
With this scaling Oja and Sanger are stationary at eigenvectors of squared
norm sqrt(D), which is what ``eigen_fixed_point`` returns.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .spectra import SpectralModel, pca_reconstruction_error


class Rule(str, enum.Enum):
    HEBBIAN = "hebbian"
    HEBBIAN_DECAY = "hebbian_decay"
    OJA = "oja"
    SANGER = "sanger"


_RULE_CODE = {Rule.HEBBIAN: 0, Rule.HEBBIAN_DECAY: 0, Rule.OJA: 1, Rule.SANGER: 1}


@dataclass(frozen=True)
class LearningRate:
    """Constant eta0, or eta0 / (1 + t / t0) for the inverse-time schedule."""

    eta0: float
    schedule: str = "constant"
    t0: float = 1.0e4

    def __post_init__(self):
        if self.schedule not in ("constant", "inverse_time"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")

    def at(self, t: float) -> float:
        if self.schedule == "constant":
            return self.eta0
        return self.eta0 / (1.0 + t / self.t0)


@dataclass
class PcaLearnerState:
    weights: np.ndarray  # (K, D)
    rule: Rule
    lr: LearningRate
    kappa: float = 0.0
    t: int = 0

    def __post_init__(self):
        self.rule = Rule(self.rule)
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite weights")
        if self.rule is not Rule.SANGER and self.weights.shape[0] != 1:
            raise ValueError(f"{self.rule.value} learns a single vector (K=1)")
        if self.rule is Rule.HEBBIAN and self.kappa != 0:
            raise ValueError("plain hebbian has no decay; use hebbian_decay")

    @classmethod
    def random(cls, K: int, D: int, rule, lr: LearningRate, *, kappa: float = 0.0, seed=0, std: float = 1.0):
        w = std * np.random.default_rng(seed).standard_normal((K, D))
        return cls(w, rule, lr, kappa)


def _single(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 2:
        if w.shape[0] != 1:
            raise ValueError("rule is defined for a single vector (K=1)")
        w = w[0]
    return w


def hebbian_step(w, x, eta: float, kappa: float = 0.0) -> np.ndarray:
    """w + (eta/sqrt(D)) (y x - kappa w)."""
    w = _single(w)
    sq = math.sqrt(w.size)
    y = w @ x / sq
    return w + (eta / sq) * (y * x - kappa * w)


def oja_step(w, x, eta: float) -> np.ndarray:
    """w + (eta/sqrt(D)) (y x - y^2 w)."""
    w = _single(w)
    sq = math.sqrt(w.size)
    y = w @ x / sq
    return w + (eta / sq) * (y * x - y * y * w)


def sanger_step(W, x, eta: float) -> np.ndarray:
    """w^k + (eta/sqrt(D)) y^k (x - sum_{l<=k} y^l w^l) for every row k."""
    W = np.array(W, dtype=float, ndmin=2)
    sq = math.sqrt(W.shape[1])
    y = W @ x / sq
    partial = np.cumsum(y[:, None] * W, axis=0)
    return W + (eta / sq) * y[:, None] * (x[None, :] - partial)


def normalized_hebbian_step(w, x, eta: float, p: int = 2) -> np.ndarray:
    """Hebbian step followed by rescaling back to the incoming p-norm."""
    w = _single(w)
    sq = math.sqrt(w.size)
    y = w @ x / sq
    nxt = w + (eta / sq) * y * x
    return nxt * (np.linalg.norm(w, p) / np.linalg.norm(nxt, p))


def eigen_fixed_point(vectors: np.ndarray) -> np.ndarray:
    """Rows rescaled to squared norm sqrt(D), the stationary norm of Oja and Sanger."""
    V = np.array(vectors, dtype=float, ndmin=2)
    D = V.shape[1]
    return V / np.linalg.norm(V, axis=1, keepdims=True) * D**0.25


@numba.njit(cache=True, nogil=True)
def _rule_block(W, X, code, kappa, eta0, inverse_time, t0, step0):
    K, D = W.shape
    sq = math.sqrt(D)
    y = np.empty(K)
    partial = np.empty(D)
    for n in range(X.shape[0]):
        x = X[n]
        eta = eta0 / (1.0 + (step0 + n) / t0) if inverse_time else eta0
        c = eta / sq
        for k in range(K):
            acc = 0.0
            for i in range(D):
                acc += W[k, i] * x[i]
            y[k] = acc / sq
        if code == 0:
            for i in range(D):
                W[0, i] += c * (y[0] * x[i] - kappa * W[0, i])
        else:
            # rows updated from the first down so partial sums use old rows
            for i in range(D):
                partial[i] = 0.0
            for k in range(K):
                for i in range(D):
                    partial[i] += y[k] * W[k, i]
                for i in range(D):
                    W[k, i] += c * y[k] * (x[i] - partial[i])
        for k in range(K):
            if not math.isfinite(W[k, 0] + y[k]):
                return n
    return -1


def run_rule(state: PcaLearnerState, X: np.ndarray) -> None:
    """Apply the state's rule to every row of ``X`` in order, in place."""
    X = np.ascontiguousarray(X, dtype=float)
    bad = _rule_block(
        state.weights,
        X,
        _RULE_CODE[state.rule],
        float(state.kappa),
        float(state.lr.eta0),
        state.lr.schedule == "inverse_time",
        float(state.lr.t0),
        state.t,
    )
    if bad >= 0:
        raise FloatingPointError(f"non-finite weights after step {state.t + bad}")
    state.t += X.shape[0]


def overlaps(W: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """|cos| between row k of W and row k of ``vectors``."""
    W = np.array(W, dtype=float, ndmin=2)
    G = np.array(vectors, dtype=float, ndmin=2)[: W.shape[0]]
    num = np.abs(np.einsum("ki,ki->k", W[: G.shape[0]], G))
    return num / (np.linalg.norm(W[: G.shape[0]], axis=1) * np.linalg.norm(G, axis=1))


def subspace_reconstruction_error(W: np.ndarray, cov_apply, trace_per_dim: float) -> float:
    """(Tr Omega - Tr P Omega P) / D for the orthogonal projector P onto span W."""
    Qm, _ = np.linalg.qr(np.array(W, dtype=float, ndmin=2).T)
    captured = np.einsum("ik,ik->", Qm, cov_apply(Qm))
    return trace_per_dim - captured / Qm.shape[0]


def train_rule(state: PcaLearnerState, source, steps: int, *, spectrum: SpectralModel, seed=0, log_steps=None):
    """Run ``steps`` updates on fresh samples and return a Trace of overlaps and error."""
    from .autoencoder import as_source, geometric_steps
    from .traces import Trace

    source = as_source(source)
    rng = np.random.default_rng(seed)
    log_steps = geometric_steps(steps, 1.5) if log_steps is None else np.unique(np.asarray(log_steps))
    D = state.weights.shape[1]
    cov_apply = getattr(source, "cov_apply", None)
    trace = Trace()
    done = state.t

    def log():
        ov = overlaps(state.weights, spectrum.eigenvectors)
        row = {"s": state.t / D}
        for k, o in enumerate(ov):
            row[f"overlap_{k}"] = float(o)
        if cov_apply is not None:
            row["recon_error"] = subspace_reconstruction_error(state.weights, cov_apply, source.trace_per_dim())
        row["norm_0"] = float(np.linalg.norm(state.weights[0]))
        trace.append(row)

    for target in log_steps[log_steps <= steps]:
        while done < target:
            n = int(min(4096, target - done))
            run_rule(state, source.sample(n, rng))
            done += n
        log()
    return trace


def offline_pca(data, K: int, *, covariance: bool = False) -> tuple[np.ndarray, float]:
    """Top-K eigenvectors (rows, squared norm D) and the rank-K reconstruction error.

    ``data`` is a SpectralModel, a P x D sample matrix, or with
    ``covariance=True`` a D x D covariance matrix.
    """
    if isinstance(data, SpectralModel):
        if K > data.dim:
            raise ValueError("K exceeds the dimension")
        if K > data.num_outliers:
            raise ValueError(f"only {data.num_outliers} eigenvectors are represented in the spectrum")
        return data.eigenvectors[:K].copy(), pca_reconstruction_error(data, K)
    A = np.asarray(data, dtype=float)
    if covariance:
        C = A
        rank = np.linalg.matrix_rank(C)
    else:
        if A.ndim != 2:
            raise ValueError("samples must be a P x D matrix")
        A = A - A.mean(axis=0)
        C = A.T @ A / A.shape[0]
        rank = min(A.shape)
    D = C.shape[0]
    if K > rank:
        raise ValueError(f"K={K} exceeds the rank {rank}")
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    W = vecs[:, :K].T * math.sqrt(D)
    return W, float(np.clip(vals[K:], 0.0, None).sum() / D)
