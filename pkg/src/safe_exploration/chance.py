"""Deterministic tightening of the Gaussian chance constraints.

Every per-row condition has the form

    || h_j^T [B, I] blockdiag(Sigma_k, Sigma_w)^(1/2) ||_2  <=  radius(j, delta_j)

with radius = (d_j - h_j^T xhat - delta_j) / Phi^-1(q) and xhat the mean
one-step prediction. The left side splits into an exploration part and a
disturbance part whose squares add, which gives the closed-form scale in
`max_exploration_scale`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .core import (
    ConstraintSet,
    DomainError,
    GaussianNoise,
    LinearModel,
    PreconditionError,
    SafetyConfig,
    normal_cdf_inv,
    predict_mean_next,
    psd_sqrt,
)

# absolute slack on the norm conditions (covers rounding at the boundary)
NORM_TOL = 1e-9


@dataclass(frozen=True)
class TightenedBound:
    j: int
    delta: float
    radius: float


def _check_k(cfg: SafetyConfig, k: int) -> None:
    if k < 0 or k > cfg.horizon:
        raise DomainError(f"timestep k={k} outside [0, {cfg.horizon}]")


def q_stay(cfg: SafetyConfig, k: int) -> float:
    """Required one-step joint safety probability (eta / xi^k)^(1/tau)."""
    _check_k(cfg, k)
    return (cfg.eta / cfg.xi**k) ** (1.0 / cfg.tau)


def eta_prime(cfg: SafetyConfig, n_c: int, k: int) -> float:
    """Per-row probability level after splitting q_stay over n_c rows."""
    return 1.0 - (1.0 - q_stay(cfg, k)) / n_c


def noise_row_norms(cs: ConstraintSet, noise: GaussianNoise) -> np.ndarray:
    """||h_j^T Sigma_w^(1/2)||_2 for every row."""
    return np.linalg.norm(cs.H @ noise.sqrt_cov, axis=1)


def tightened_radii(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                    x, u_mean, q: float) -> list[TightenedBound]:
    if not 0.5 < q < 1.0:
        raise DomainError(f"tightening needs q in (0.5, 1), got {q}")
    z = normal_cdf_inv(q)
    slack = cs.d - cs.H @ predict_mean_next(model, noise, x, u_mean)
    out = []
    for j in range(cs.n_c):
        for delta in (cfg.delta_bar[j], -cfg.delta_bar[j]):
            out.append(TightenedBound(j, float(delta), float((slack[j] - delta) / z)))
    return out


def _radius_array(model, cs, cfg, noise, x, u_mean, k) -> np.ndarray:
    """Radii at level eta'_k, shape (n_c, 2) for (+delta, -delta)."""
    q = eta_prime(cfg, cs.n_c, k)
    r = [b.radius for b in tightened_radii(model, cs, cfg, noise, x, u_mean, q)]
    return np.asarray(r).reshape(cs.n_c, 2)


def exploration_feasible(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                         x, u_mean, k: int) -> bool:
    """True when the disturbance alone fits inside every tightened radius."""
    radii = _radius_array(model, cs, cfg, noise, x, u_mean, k)
    c = noise_row_norms(cs, noise)
    return bool(np.all(c[:, None] <= radii))


def max_exploration_scale(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                          x, u_mean, k: int, sigma_base, s_max: float) -> float:
    """Largest s in [0, s_max] such that s^2 * sigma_base satisfies every row condition."""
    if s_max < 0:
        raise DomainError(f"s_max must be nonnegative, got {s_max}")
    radii = _radius_array(model, cs, cfg, noise, x, u_mean, k)
    c = noise_row_norms(cs, noise)
    if not np.all(c[:, None] <= radii):
        raise PreconditionError("exploration is infeasible at this state (case (ii) applies)")
    sigma_base = np.atleast_2d(np.asarray(sigma_base, dtype=float))
    a = np.linalg.norm(cs.H @ model.B @ psd_sqrt(sigma_base), axis=1) ** 2
    s2 = s_max**2
    for j in range(cs.n_c):
        if a[j] == 0.0:
            continue
        room = np.clip(radii[j] ** 2 - c[j] ** 2, 0.0, None)
        s2 = min(s2, float(room.min() / a[j]))
    return float(np.sqrt(s2))


def max_exploration_cov(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                        x, u_mean, k: int, sigma_base, s_max: float) -> np.ndarray:
    s = max_exploration_scale(model, cs, cfg, noise, x, u_mean, k, sigma_base, s_max)
    return s**2 * np.atleast_2d(np.asarray(sigma_base, dtype=float))


def combined_row_norms(model: LinearModel, cs: ConstraintSet, noise: GaussianNoise, sigma) -> np.ndarray:
    """||h_j^T [B, I] blockdiag(sigma, Sigma_w)^(1/2)||_2, computed from the stacked matrix."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (model.m, model.m):
        raise DomainError(f"sigma must be {model.m}x{model.m}, got {sigma.shape}")
    B_aug = np.hstack([model.B, np.eye(model.n)])
    root = psd_sqrt(block_diag(sigma, noise.cov))
    return np.linalg.norm(cs.H @ B_aug @ root, axis=1)


def check_sigma(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                x, u_mean, k: int, sigma) -> bool:
    norms = combined_row_norms(model, cs, noise, sigma)
    radii = _radius_array(model, cs, cfg, noise, x, u_mean, k)
    return bool(np.all(norms[:, None] <= radii + NORM_TOL))
