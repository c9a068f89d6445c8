"""Observable dictionaries: learnable random Fourier features and fixed baselines.

A dictionary maps states in R^d to feature vectors in R^M; feature matrices
stack one feature row per state. The RFF map is

    phi_m(x) = sqrt(2/M) * cos(x . omega_m + b_m),

whose inner products Monte-Carlo-approximate an RBF kernel when the
frequencies are Gaussian. Fixed baselines (Gaussian bumps on a grid of
centers, monomials up to a total degree) cover the classical EDMD setups,
and `kernel_gram` supplies the Gram matrices used by kernel EDMD.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

FORMAT_VERSION = 1


@dataclass
class RffDictionary:
    """Trainable cosine feature map: frequencies (M, d) and phases (M,)."""

    omegas: np.ndarray
    biases: np.ndarray
    bandwidth: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.omegas = np.asarray(self.omegas, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.omegas.ndim != 2 or self.biases.shape != (self.omegas.shape[0],):
            raise ValueError("omegas must be (M, d) and biases (M,)")
        if not (np.all(np.isfinite(self.omegas)) and np.all(np.isfinite(self.biases))):
            raise ValueError("dictionary parameters must be finite")

    @property
    def n_features(self) -> int:
        return self.omegas.shape[0]

    @property
    def dim(self) -> int:
        return self.omegas.shape[1]

    def copy(self) -> "RffDictionary":
        return RffDictionary(self.omegas.copy(), self.biases.copy(), self.bandwidth, self.seed)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return rff_eval(self, X)


@dataclass
class GaussianGridDictionary:
    """Gaussian bumps exp(-|x - c|^2 / (2 sigma^2)) on fixed centers (C, d)."""

    centers: np.ndarray
    sigma: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.ndim != 2:
            raise ValueError("centers must be (C, d)")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def n_features(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return fixed_eval(self, X)


@dataclass
class MonomialDictionary:
    """All monomials of total degree <= degree, graded-lex column order.

    For d = 2, degree 2 the columns are 1, x, y, x^2, x*y, y^2. The constant
    column (degree 0) is always present.
    """

    degree: int
    dim: int
    exponents: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        self.exponents = np.array(monomial_exponents(self.degree, self.dim), dtype=int)

    @property
    def n_features(self) -> int:
        return len(self.exponents)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return fixed_eval(self, X)


FixedDictionary = GaussianGridDictionary | MonomialDictionary
Dictionary = RffDictionary | GaussianGridDictionary | MonomialDictionary


def monomial_exponents(degree: int, dim: int) -> list[tuple[int, ...]]:
    """Exponent tuples sorted by total degree, then descending lexicographically."""
    out = []
    for total in range(degree + 1):
        level = [e for e in itertools.product(range(total, -1, -1), repeat=dim)
                 if sum(e) == total]
        out.extend(sorted(level, reverse=True))
    return out


def rff_init(n_features: int, dim: int, bandwidth: float = 1.0, seed=None) -> RffDictionary:
    """Draw a fresh RFF dictionary.

    Frequencies are i.i.d. Normal(0, bandwidth^-2 I), the spectral measure of
    the RBF kernel with that bandwidth; phases are Uniform[0, 2*pi).
    Reproducible from ``seed``.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    rng = np.random.default_rng(seed)
    omegas = rng.normal(0.0, 1.0 / bandwidth, size=(n_features, dim))
    biases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return RffDictionary(omegas, biases, bandwidth=bandwidth, seed=seed)


def rff_eval(dictionary: RffDictionary, X: np.ndarray) -> np.ndarray:
    """Feature matrix (N, M) with entries sqrt(2/M) * cos(x_i . omega_m + b_m)."""
    X = _check_states(X, dictionary.dim)
    m = dictionary.n_features
    return np.sqrt(2.0 / m) * np.cos(X @ dictionary.omegas.T + dictionary.biases)


def rff_eval_with_sin(dictionary: RffDictionary, X: np.ndarray):
    """Features plus their phase derivative -sqrt(2/M) sin(.), sharing one GEMM.

    The second matrix is exactly what `rff_grad` needs, so training loops can
    evaluate once and backpropagate without recomputing the trig argument.
    """
    X = _check_states(X, dictionary.dim)
    scale = np.sqrt(2.0 / dictionary.n_features)
    z = X @ dictionary.omegas.T + dictionary.biases
    return scale * np.cos(z), -scale * np.sin(z)


def rff_grad(dictionary: RffDictionary, X: np.ndarray, upstream: np.ndarray,
             sin_matrix: np.ndarray | None = None):
    """Backpropagate ``upstream = d(loss)/d(features)`` to the RFF parameters.

    Returns ``(grad_omegas, grad_biases)`` of shapes (M, d) and (M,): the
    entrywise derivative is -sqrt(2/M) * sin(x_i . omega_m + b_m) for the
    phase, times x_i for the frequency row. Pass the second output of
    `rff_eval_with_sin` as ``sin_matrix`` to skip recomputing it.
    """
    X = _check_states(X, dictionary.dim)
    m = dictionary.n_features
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (X.shape[0], m):
        raise ValueError(f"upstream shape {upstream.shape} != {(X.shape[0], m)}")
    if sin_matrix is None:
        sin_matrix = -np.sqrt(2.0 / m) * np.sin(X @ dictionary.omegas.T + dictionary.biases)
    weighted = upstream * sin_matrix
    grad_biases = weighted.sum(axis=0)
    grad_omegas = weighted.T @ X
    return grad_omegas, grad_biases


def fixed_eval(dictionary: FixedDictionary, X: np.ndarray) -> np.ndarray:
    """Feature matrix of a fixed (non-trainable) dictionary."""
    X = _check_states(X, dictionary.dim)
    if isinstance(dictionary, GaussianGridDictionary):
        sq = cdist(X, dictionary.centers, "sqeuclidean")
        return np.exp(-sq / (2.0 * dictionary.sigma**2))
    if isinstance(dictionary, MonomialDictionary):
        cols = [np.prod(X**exp, axis=1) for exp in dictionary.exponents]
        return np.stack(cols, axis=1)
    raise TypeError(f"unsupported dictionary type {type(dictionary).__name__}")


def kernel_gram(kernel_sigma: float, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """RBF Gram matrix: entry (i, j) = exp(-|a_i - b_j|^2 / (2 sigma^2))."""
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * kernel_sigma**2))


def _check_states(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"states must be (N, {dim}), got {X.shape}")
    return X


# ---------------------------------------------------------------------------
# Serialization (human-diffable JSON)
# ---------------------------------------------------------------------------

def dictionary_to_dict(dictionary: Dictionary) -> dict:
    if isinstance(dictionary, RffDictionary):
        return {
            "format_version": FORMAT_VERSION,
            "type": "rff",
            "M": dictionary.n_features,
            "d": dictionary.dim,
            "omegas": dictionary.omegas.tolist(),
            "biases": dictionary.biases.tolist(),
            "sigma": dictionary.bandwidth,
            "seed": dictionary.seed,
        }
    if isinstance(dictionary, GaussianGridDictionary):
        return {
            "format_version": FORMAT_VERSION,
            "type": "gaussian_grid",
            "M": dictionary.n_features,
            "d": dictionary.dim,
            "centers": dictionary.centers.tolist(),
            "sigma": dictionary.sigma,
        }
    if isinstance(dictionary, MonomialDictionary):
        return {
            "format_version": FORMAT_VERSION,
            "type": "monomial",
            "M": dictionary.n_features,
            "d": dictionary.dim,
            "degree": dictionary.degree,
        }
    raise TypeError(f"unsupported dictionary type {type(dictionary).__name__}")


def dictionary_from_dict(payload: dict) -> Dictionary:
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dictionary format_version {version!r}")
    kind = payload["type"]
    if kind == "rff":
        return RffDictionary(np.array(payload["omegas"], dtype=float),
                             np.array(payload["biases"], dtype=float),
                             bandwidth=payload.get("sigma", 1.0),
                             seed=payload.get("seed"))
    if kind == "gaussian_grid":
        return GaussianGridDictionary(np.array(payload["centers"], dtype=float),
                                      sigma=payload["sigma"])
    if kind == "monomial":
        return MonomialDictionary(degree=payload["degree"], dim=payload["d"])
    raise ValueError(f"unknown dictionary type {kind!r}")


def save_dictionary(path, dictionary: Dictionary) -> None:
    with open(path, "w") as fh:
        json.dump(dictionary_to_dict(dictionary), fh, indent=1)
        fh.write("\n")


def load_dictionary(path) -> Dictionary:
    with open(path) as fh:
        return dictionary_from_dict(json.load(fh))
