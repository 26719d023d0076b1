"""Input distributions: spiked covariance generator, spectra, datasets, PCA baselines.

Eigenvectors are stored with squared norm D (not 1), so the projection of a
weight vector on an eigenvector is w . Gamma / sqrt(D) and stays O(1).
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class LatentLaw(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    RADEMACHER = "rademacher"


class DatasetError(ValueError):
    pass


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def gaussian_basis(dim: int, num_spikes: int, rng) -> np.ndarray:
    """Orthonormalised Gaussian columns rescaled to squared norm ``dim``."""
    if num_spikes > dim:
        raise ValueError("more spikes than dimensions")
    g = _as_rng(rng).normal(size=(dim, num_spikes))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q * math.sqrt(dim)


def sinusoidal_basis(dim: int, num_spikes: int) -> np.ndarray:
    """Discrete sine waves of frequency 1..M, rescaled to squared norm ``dim``."""
    if num_spikes > dim:
        raise ValueError("more spikes than dimensions")
    i = np.arange(1, dim + 1)[:, None]
    m = np.arange(1, num_spikes + 1)[None, :]
    waves = np.sin(math.pi * i * m / (dim + 1))
    return waves * math.sqrt(2.0 * dim / (dim + 1))


@dataclass(frozen=True)
class SpikedCovarianceModel:
    """x = A c + sqrt(sigma) xi with Cov(c) = diag(rho_tilde) and |a_m|^2 = D.

    The population covariance has outliers D rho_tilde_m + sigma along a_m and a
    flat bulk at sigma.
    """

    spike_basis: np.ndarray
    rho_tilde: np.ndarray
    sigma: float = 1.0
    latent_law: LatentLaw = LatentLaw.GAUSSIAN

    def __post_init__(self):
        A = np.asarray(self.spike_basis, dtype=float)
        rho = np.atleast_1d(np.asarray(self.rho_tilde, dtype=float))
        object.__setattr__(self, "spike_basis", A)
        object.__setattr__(self, "rho_tilde", rho)
        object.__setattr__(self, "latent_law", LatentLaw(self.latent_law))
        if A.ndim != 2 or A.shape[1] != rho.size:
            raise ValueError("spike basis must be D x M with one column per spike strength")
        if np.any(rho <= 0) or np.any(np.diff(rho) > 0):
            raise ValueError("spike strengths must be positive and sorted descending")
        if self.sigma < 0:
            raise ValueError("noise variance must be nonnegative")
        gram = A.T @ A
        D = A.shape[0]
        if not np.allclose(gram, D * np.eye(rho.size), atol=1e-8 * D):
            raise ValueError("spike basis columns must be orthogonal with squared norm D")

    @classmethod
    def build(
        cls,
        dim: int,
        rho_tilde,
        sigma: float = 1.0,
        *,
        basis: str = "gaussian",
        latent_law: str = "gaussian",
        seed=0,
    ) -> "SpikedCovarianceModel":
        rho = np.atleast_1d(np.asarray(rho_tilde, dtype=float))
        if basis == "gaussian":
            A = gaussian_basis(dim, rho.size, seed)
        elif basis == "sinusoidal":
            A = sinusoidal_basis(dim, rho.size)
        else:
            raise ValueError(f"unknown spike basis {basis!r}")
        return cls(A, rho, sigma, LatentLaw(latent_law))

    @property
    def dim(self) -> int:
        return self.spike_basis.shape[0]

    @property
    def num_spikes(self) -> int:
        return self.rho_tilde.size

    def covariance(self) -> np.ndarray:
        A = self.spike_basis
        return (A * self.rho_tilde) @ A.T + self.sigma * np.eye(self.dim)

    def with_latent_law(self, law) -> "SpikedCovarianceModel":
        return SpikedCovarianceModel(self.spike_basis, self.rho_tilde, self.sigma, LatentLaw(law))


def _latents(law: LatentLaw, var: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if law is LatentLaw.GAUSSIAN:
        z = rng.standard_normal((n, var.size))
    elif law is LatentLaw.LAPLACE:
        z = rng.laplace(scale=1.0 / math.sqrt(2.0), size=(n, var.size))
    else:
        z = rng.integers(0, 2, size=(n, var.size)) * 2.0 - 1.0
    return z * np.sqrt(var)


def sample_batch(model: SpikedCovarianceModel, n: int, rng) -> np.ndarray:
    """n independent inputs as rows of an n x D matrix."""
    rng = _as_rng(rng)
    c = _latents(model.latent_law, model.rho_tilde, n, rng)
    x = c @ model.spike_basis.T
    if model.sigma > 0:
        x += math.sqrt(model.sigma) * rng.standard_normal((n, model.dim))
    return x


def sample_input(model: SpikedCovarianceModel, rng) -> np.ndarray:
    return sample_batch(model, 1, rng)[0]


@dataclass
class SpectralModel:
    """Outlier eigenpairs of a covariance plus a summary of the remaining bulk.

    ``eigenvectors`` has one row per outlier, each with squared norm D.
    ``bulk_eigenvalues`` holds the non-outlier eigenvalues (descending) when
    they are known individually; otherwise the bulk is taken as flat.
    """

    dim: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    bulk_trace: float
    bulk_eigenvalues: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.eigenvalues = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        self.eigenvectors = np.atleast_2d(np.asarray(self.eigenvectors, dtype=float))
        if self.eigenvectors.shape != (self.eigenvalues.size, self.dim):
            raise ValueError("need one D-vector per outlier eigenvalue")

    @property
    def num_outliers(self) -> int:
        return self.eigenvalues.size

    @property
    def rho_tilde(self) -> np.ndarray:
        """Outlier eigenvalues divided by D: the weights of the spike densities."""
        return self.eigenvalues / self.dim

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum() + self.bulk_trace)

    @property
    def bulk_level(self) -> float:
        """Mean bulk eigenvalue."""
        n = self.dim - self.num_outliers
        return self.bulk_trace / n if n > 0 else 0.0

    def full_spectrum(self) -> np.ndarray:
        """All D eigenvalues, outliers first then bulk, each part descending."""
        if self.bulk_eigenvalues is not None:
            bulk = np.sort(np.asarray(self.bulk_eigenvalues, dtype=float))[::-1]
        else:
            bulk = np.full(self.dim - self.num_outliers, self.bulk_level)
        return np.concatenate([np.sort(self.eigenvalues)[::-1], bulk])

    def bulk_density(self, bins: int = 50):
        """Histogram (counts, edges) of the bulk eigenvalues."""
        return np.histogram(self.full_spectrum()[self.num_outliers :], bins=bins)

    def to_csv(self, path) -> None:
        """One eigenpair per row: eigenvalue, then the D components."""
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema=1 dim={self.dim} bulk_trace={self.bulk_trace!r}\n")
            w = csv.writer(fh)
            for lam, vec in zip(self.eigenvalues, self.eigenvectors):
                w.writerow([repr(float(lam))] + [repr(float(v)) for v in vec])

    @classmethod
    def from_csv(cls, path) -> "SpectralModel":
        with open(path) as fh:
            first = fh.readline()
            meta = dict(kv.split("=", 1) for kv in first.lstrip("#").split() if "=" in kv)
            rows = [list(map(float, r)) for r in csv.reader(fh) if r]
        dim = int(meta["dim"])
        data = np.array(rows, dtype=float).reshape(len(rows), dim + 1)
        return cls(dim, data[:, 0], data[:, 1:], float(meta.get("bulk_trace", 0.0)))


def spectral_model_of(model: SpikedCovarianceModel) -> SpectralModel:
    D, M = model.dim, model.num_spikes
    return SpectralModel(
        dim=D,
        eigenvalues=D * model.rho_tilde + model.sigma,
        eigenvectors=model.spike_basis.T.copy(),
        bulk_trace=model.sigma * (D - M),
        bulk_eigenvalues=np.full(D - M, float(model.sigma)),
    )


def empirical_spectrum(samples: np.ndarray, num_outliers: int) -> SpectralModel:
    """Centre the samples and split the eigendecomposition of their covariance."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a P x D sample matrix with P >= 2")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite values")
    P, D = X.shape
    if not 0 < num_outliers < min(P, D):
        raise ValueError(f"num_outliers must be in [1, {min(P, D) - 1}]")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (P - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    vals = np.maximum(vals, 0.0)
    return SpectralModel(
        dim=D,
        eigenvalues=vals[:num_outliers],
        eigenvectors=vecs[:, :num_outliers].T * math.sqrt(D),
        bulk_trace=float(vals[num_outliers:].sum()),
        bulk_eigenvalues=vals[num_outliers:].copy(),
    )


def pca_reconstruction_error(spectrum: SpectralModel, rank: int) -> float:
    """(1/D) times the sum of all eigenvalues beyond the leading ``rank``."""
    if rank < 0 or rank > spectrum.dim:
        raise ValueError(f"rank must be in [0, {spectrum.dim}]")
    return float(spectrum.full_spectrum()[rank:].sum() / spectrum.dim)


# ---------------------------------------------------------------------------
# datasets

_RAW_HEADER = struct.Struct("<QQ")


def ingest_dataset(path, fmt: str | None = None) -> np.ndarray:
    """Read a P x D matrix from headerless csv or raw little-endian float64."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "raw_f64le")
    if fmt == "csv":
        rows = []
        width = None
        with open(path, newline="") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or all(not f.strip() for f in row):
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise DatasetError(f"row {i}: expected {width} fields, got {len(row)}")
                try:
                    rows.append([float(f) for f in row])
                except ValueError as exc:
                    raise DatasetError(f"row {i}: {exc}") from None
        X = np.array(rows, dtype=float)
    elif fmt == "raw_f64le":
        buf = path.read_bytes()
        if len(buf) < _RAW_HEADER.size:
            raise DatasetError("file shorter than the 16-byte header")
        P, D = _RAW_HEADER.unpack_from(buf)
        payload = len(buf) - _RAW_HEADER.size
        if payload != 8 * P * D:
            raise DatasetError(f"header says {P}x{D} ({8 * P * D} bytes) but payload has {payload} bytes")
        X = np.frombuffer(buf, dtype="<f8", offset=_RAW_HEADER.size).reshape(P, D).astype(float)
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    bad = ~np.isfinite(X)
    if bad.any():
        raise DatasetError(f"row {int(np.argwhere(bad)[0, 0])}: non-finite value")
    return X


def write_dataset(path, X: np.ndarray, fmt: str | None = None) -> None:
    path = Path(path)
    X = np.asarray(X, dtype=float)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "raw_f64le")
    if fmt == "csv":
        np.savetxt(path, X, delimiter=",", fmt="%.17g")
    elif fmt == "raw_f64le":
        with open(path, "wb") as fh:
            fh.write(_RAW_HEADER.pack(*X.shape))
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")


class CovarianceSampler:
    """Zero-mean Gaussian inputs with a given covariance (optionally plus a mean)."""

    def __init__(self, cov: np.ndarray, mean: np.ndarray | None = None):
        cov = np.asarray(cov, dtype=float)
        vals, vecs = np.linalg.eigh(cov)
        self.root = vecs * np.sqrt(np.maximum(vals, 0.0))
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.dim = cov.shape[0]

    @classmethod
    def matching(cls, samples: np.ndarray, center: bool = True) -> "CovarianceSampler":
        X = np.asarray(samples, dtype=float)
        mu = X.mean(axis=0)
        Xc = X - mu
        return cls(Xc.T @ Xc / (X.shape[0] - 1), None if center else mu)

    def sample(self, n: int, rng) -> np.ndarray:
        x = _as_rng(rng).standard_normal((n, self.dim)) @ self.root.T
        if self.mean is not None:
            x += self.mean
        return x
