"""Shared numeric primitives: model records, Gaussian CDF/quantile, constraint evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class PreconditionError(RuntimeError):
    """An operation was called while its precondition does not hold."""


class UnrecoverableSafetyError(RuntimeError):
    """No conservative input exists for the current state."""


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} has non-finite entries")
    return a


def _as_vector(v, name: str, size: int | None = None) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {v.shape}")
    if size is not None and v.shape[0] != size:
        raise ShapeError(f"{name} has length {v.shape[0]}, expected {size}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite entries")
    return v


def psd_sqrt(cov: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in [-tol, 0) are clamped to zero; anything more negative is rejected.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=tol, rtol=0.0):
        raise DomainError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.size and vals.min() < -tol:
        raise DomainError(f"covariance is not positive semidefinite (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True)
class LinearModel:
    """Known linear approximation x' ~ A x + B u + w of the plant."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        B = _as_matrix(B, "B")
        if A.shape[0] != A.shape[1]:
            raise ShapeError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ShapeError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class ConstraintSet:
    """Polytope {x : H x <= d}; row j is the constraint h_j^T x <= d_j."""

    H: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        H = _as_matrix(self.H, "H")
        d = _as_vector(self.d, "d", H.shape[0])
        if H.shape[0] < 1:
            raise ShapeError("at least one constraint is required")
        if np.any(np.all(H == 0.0, axis=1)):
            raise DomainError("every constraint row must be nonzero")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "d", d)

    @property
    def n_c(self) -> int:
        return self.H.shape[0]

    def check_actuated(self, model: LinearModel) -> None:
        """Raise unless every row is influenced by the input (h_j^T B != 0)."""
        if self.H.shape[1] != model.n:
            raise ShapeError(f"H has {self.H.shape[1]} columns, model state has {model.n}")
        hb = self.H @ model.B
        bad = np.flatnonzero(np.all(hb == 0.0, axis=1))
        if bad.size:
            raise DomainError(f"constraint rows {bad.tolist()} have h_j^T B = 0")


@dataclass(frozen=True)
class GaussianNoise:
    """Multivariate normal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        cov = _as_matrix(self.cov, "cov")
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        # validates symmetry / PSD eagerly
        _ = self.sqrt_cov

    @classmethod
    def zero(cls, dim: int) -> "GaussianNoise":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def sqrt_cov(self) -> np.ndarray:
        return psd_sqrt(self.cov)


@dataclass(frozen=True)
class SafetyConfig:
    """Probability schedule (eta, xi, tau, horizon) and approximation-error bounds."""

    eta: float
    xi: float
    tau: int
    horizon: int
    delta_bar: np.ndarray
    Delta_bar: np.ndarray

    def __post_init__(self):
        if not 0.5 < self.eta < 1.0:
            raise DomainError(f"eta must lie in (0.5, 1), got {self.eta}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise DomainError(f"tau must be a positive integer, got {self.tau}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise DomainError(f"horizon must be a positive integer, got {self.horizon}")
        if not self.eta ** (1.0 / self.horizon) < self.xi < 1.0:
            raise DomainError(
                f"xi must satisfy eta^(1/T) = {self.eta ** (1.0 / self.horizon):.6f} < xi < 1, got {self.xi}"
            )
        db = _as_vector(self.delta_bar, "delta_bar")
        Db = _as_vector(self.Delta_bar, "Delta_bar", db.size)
        if np.any(db < 0) or np.any(Db < 0):
            raise DomainError("error bounds must be nonnegative")
        object.__setattr__(self, "tau", int(self.tau))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "delta_bar", db)
        object.__setattr__(self, "Delta_bar", Db)


def normal_cdf(z: float) -> float:
    """Standard normal CDF, accurate to ~1e-16 absolute."""
    z = float(z)
    if not math.isfinite(z):
        raise DomainError(f"normal_cdf requires a finite argument, got {z}")
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _normal_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def normal_cdf_inv(q: float) -> float:
    """Standard normal quantile by safeguarded Newton iteration on normal_cdf.

    Works on the lower tail p = min(q, 1 - q) so that the residual is computed
    without cancellation, then reflects.
    """
    q = float(q)
    if not 0.0 < q < 1.0:
        raise DomainError(f"normal_cdf_inv requires 0 < q < 1, got {q}")
    if q == 0.5:
        return 0.0
    p = q if q < 0.5 else 1.0 - q
    # bracket for the lower-tail root z < 0
    lo, hi = -40.0, 0.0
    t = math.sqrt(-2.0 * math.log(p))
    z = -(t - (2.30753 + 0.27061 * t) / (1.0 + 0.99229 * t + 0.04481 * t * t))
    z = min(max(z, lo), hi)
    for _ in range(100):
        f = 0.5 * math.erfc(-z / math.sqrt(2.0)) - p
        if f > 0:
            hi = z
        else:
            lo = z
        dens = _normal_pdf(z)
        step = f / dens if dens > 0 else math.inf
        z_new = z - step
        if not lo < z_new < hi:
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) <= 1e-15 * max(1.0, abs(z)):
            z = z_new
            break
        z = z_new
    return z if q < 0.5 else -z


def constraint_margins(cs: ConstraintSet, x) -> np.ndarray:
    """d - H x; nonnegative everywhere iff x is in the safe set."""
    x = _as_vector(x, "x", cs.H.shape[1])
    return cs.d - cs.H @ x


def is_safe(cs: ConstraintSet, x) -> bool:
    # closed set: boundary counts as safe
    return bool(np.all(constraint_margins(cs, x) >= 0.0))


def sample_gaussian(noise: GaussianNoise, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov) using the symmetric square root of cov.

    Returns an n-vector, or an array of shape (size, n) when size is given.
    """
    n = noise.dim
    if size is None:
        return noise.mean + noise.sqrt_cov @ rng.standard_normal(n)
    return noise.mean + rng.standard_normal((size, n)) @ noise.sqrt_cov.T


def predict_mean_next(model: LinearModel, noise: GaussianNoise, x, u_mean) -> np.ndarray:
    """Mean one-step prediction A x + B u + mu_w of the linear model."""
    x = _as_vector(x, "x", model.n)
    u_mean = _as_vector(u_mean, "u_mean", model.m)
    if noise.dim != model.n:
        raise ShapeError(f"noise dimension {noise.dim} does not match state dimension {model.n}")
    return model.A @ x + model.B @ u_mean + noise.mean
