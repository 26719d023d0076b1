"""Macroscopic state shared by the simulator (measured) and the ODE engine (integrated).

Per outlier m with eigenvector Gamma_m (squared norm D) and projections
w_m = W Gamma_m / sqrt(D), v_m = V Gamma_m / sqrt(D):

    q_m = w_m w_m^T      r_m = v_m w_m^T / sqrt(D)      t_m = v_m v_m^T / D

so that Q1 = sum_m rho_m q_m + Q_bulk with rho_m the outlier eigenvalue / D,
and likewise for R1 = Cov(nu, lambda) and T1 = Cov(nu, nu).  T0 = V V^T / D.
R is indexed decoder-first: R1[k, l] = E[nu^k lambda^l].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OrderParameterState:
    q: np.ndarray  # (M, K, K)
    r: np.ndarray
    t: np.ndarray
    Q_bulk: np.ndarray  # (K, K)
    R_bulk: np.ndarray
    T_bulk: np.ndarray
    T0: np.ndarray
    rho_tilde: np.ndarray  # (M,)
    trace_per_dim: float  # (1/D) Tr Omega
    s: float = 0.0
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return self.T0.shape[0]

    @property
    def M(self) -> int:
        return self.rho_tilde.size

    def moments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Assembled (Q1, R1, T1)."""
        rho = self.rho_tilde[:, None, None]
        Q1 = (rho * self.q).sum(axis=0) + self.Q_bulk
        R1 = (rho * self.r).sum(axis=0) + self.R_bulk
        T1 = (rho * self.t).sum(axis=0) + self.T_bulk
        return Q1, R1, T1

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for a in (self.q, self.r, self.t, self.Q_bulk, self.R_bulk, self.T_bulk, self.T0)]
        )

    def with_vector(self, y: np.ndarray, s: float | None = None) -> "OrderParameterState":
        M, K = self.M, self.K
        sizes = [M * K * K] * 3 + [K * K] * 4
        parts = np.split(np.asarray(y, dtype=float), np.cumsum(sizes)[:-1])
        q, r, t = (p.reshape(M, K, K) for p in parts[:3])
        Qb, Rb, Tb, T0 = (p.reshape(K, K) for p in parts[3:])
        return OrderParameterState(
            q, r, t, Qb, Rb, Tb, T0, self.rho_tilde, self.trace_per_dim, self.s if s is None else s
        )

    def copy(self) -> "OrderParameterState":
        return self.with_vector(self.to_vector().copy())

    def flat_columns(self) -> dict[str, float]:
        """Named scalars for trace files: q1_00, r2_01, Qb_00, T0_01, ..."""
        out = {}
        K = self.K
        for m in range(self.M):
            for name, arr in (("q", self.q), ("r", self.r), ("t", self.t)):
                for k in range(K):
                    for l in range(K):
                        out[f"{name}{m + 1}_{k}{l}"] = float(arr[m, k, l])
        for name, arr in (("Qb", self.Q_bulk), ("Rb", self.R_bulk), ("Tb", self.T_bulk), ("T0", self.T0)):
            for k in range(K):
                for l in range(K):
                    out[f"{name}_{k}{l}"] = float(arr[k, l])
        return out
