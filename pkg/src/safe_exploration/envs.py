"""Inverted pendulum and four-bar parallel link manipulator.

Step functions are pure and broadcast over leading batch dimensions: x has
shape (..., n), u (..., m), w (..., n). Disturbances are drawn by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ConstraintSet, GaussianNoise, LinearModel, SafetyConfig

TWO_PI = 2.0 * math.pi


def wrap_angle(phi):
    """Map to [-pi, pi) with a floored modulo: ((phi + pi) mod 2 pi) - pi."""
    return np.mod(np.asarray(phi, dtype=float) + math.pi, TWO_PI) - math.pi


def _error_bounds(model: LinearModel, cs: ConstraintSet, tau: int, amplitude: np.ndarray):
    """Suprema of |h_j^T e| and |h_j^T (A^{tau-1} + ... + I) e|.

    The approximation error of both plants is e = diag(amplitude) s with every
    component of s ranging independently over [-1, 1], so the supremum of
    |c^T e| is sum_i |c_i| amplitude_i.
    """
    S = np.zeros_like(model.A)
    P = np.eye(model.n)
    for _ in range(tau):
        S += P
        P = model.A @ P
    delta_bar = np.abs(cs.H) @ amplitude
    Delta_bar = np.abs(cs.H @ S) @ amplitude
    return delta_bar, Delta_bar


# ---------------------------------------------------------------------------
# inverted pendulum


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    l: float = 1.0
    g: float = 9.8
    Ts: float = 0.05

    def __post_init__(self):
        for name in ("m", "l", "g", "Ts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")

    @property
    def gravity_gain(self) -> float:
        return self.Ts * 3.0 * self.g / (2.0 * self.l)

    @property
    def input_gain(self) -> float:
        return self.Ts * 3.0 / (self.m * self.l**2)


def pendulum_step(p: PendulumParams, x, u, w):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phi, zeta = x[..., 0], x[..., 1]
    u = u[..., 0] if u.ndim and u.shape[-1] == 1 else u
    out = np.stack([
        phi + p.Ts * zeta,
        zeta - p.gravity_gain * np.sin(phi + math.pi) + p.input_gain * u,
    ], axis=-1)
    return out + w


def pendulum_cost(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return wrap_angle(x[..., 0]) ** 2 + 0.1 * x[..., 1] ** 2 + 0.001 * np.sum(np.atleast_1d(u) ** 2, axis=-1)


def pendulum_linear_model(p: PendulumParams) -> LinearModel:
    return LinearModel(np.array([[1.0, p.Ts], [0.0, 1.0]]), np.array([[0.0], [p.input_gain]]))


def pendulum_constraints(zeta_max: float = 6.0) -> ConstraintSet:
    return ConstraintSet(np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([zeta_max, zeta_max]))


def pendulum_error_bounds(p: PendulumParams, tau: int = 2, cs: ConstraintSet | None = None,
                          as_reported: bool = False):
    """(delta_bar, Delta_bar) for the velocity constraints.

    as_reported=True uses Ts*3g/(2l) for both bounds instead of the tau-step
    supremum, matching the values quoted alongside the experiment.
    """
    cs = cs or pendulum_constraints()
    amplitude = np.array([0.0, p.gravity_gain])
    delta_bar, Delta_bar = _error_bounds(pendulum_linear_model(p), cs, tau, amplitude)
    if as_reported:
        Delta_bar = delta_bar.copy()
    return delta_bar, Delta_bar


def pendulum_stay_input(p: PendulumParams, x, mu_w) -> np.ndarray:
    # literal closed form; it compensates with the angle-mean component mu_w[0]
    k = p.m * p.l**2 / (3.0 * p.Ts)
    return np.array([-k * (x[1] + mu_w[0])])


def pendulum_back_sequence(p: PendulumParams, x, mu_w) -> np.ndarray:
    k = p.m * p.l**2 / (3.0 * p.Ts)
    return np.array([-k * (x[1] + 2.0 * mu_w[0]), 0.0])


# ---------------------------------------------------------------------------
# four-bar parallel link manipulator


@dataclass(frozen=True)
class ManipulatorParams:
    m11_hat: float = 3.91e-3
    m22_hat: float = 2.39e-3
    d11_hat: float = 9.37e-3
    d22_hat: float = 9.37e-3
    V1: float = 9.01e-2
    V2: float = 1.92e-2
    alpha: float = 6.89e-2
    Ts: float = 0.05

    def __post_init__(self):
        for name in ("m11_hat", "m22_hat", "d11_hat", "d22_hat", "V1", "V2", "alpha", "Ts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"manipulator parameter {name} must be positive")

    @property
    def a(self) -> np.ndarray:
        return self.Ts * np.array([self.d11_hat / self.m11_hat, self.d22_hat / self.m22_hat])

    @property
    def b(self) -> np.ndarray:
        return self.Ts * self.alpha * np.array([1.0 / self.m11_hat, 1.0 / self.m22_hat])

    @property
    def gravity(self) -> np.ndarray:
        return self.Ts * np.array([self.V1 / self.m11_hat, self.V2 / self.m22_hat])


def manipulator_step(p: ManipulatorParams, x, u, w):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q, om = x[..., :2], x[..., 2:]
    out = np.concatenate([
        q + p.Ts * om,
        (1.0 - p.a) * om - p.gravity * np.cos(q) + p.b * u,
    ], axis=-1)
    return out + w


def manipulator_cost(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return (2.0 * wrap_angle(x[..., 0]) ** 2
            + 2.0 * (np.mod((x[..., 1] + math.pi) - 5.0 * math.pi / 6.0, TWO_PI) - math.pi) ** 2
            + 0.1 * (x[..., 2] ** 2 + x[..., 3] ** 2)
            + 0.001 * np.sum(u**2, axis=-1))


def manipulator_linear_model(p: ManipulatorParams) -> LinearModel:
    A = np.eye(4)
    A[0, 2] = A[1, 3] = p.Ts
    A[2, 2], A[3, 3] = 1.0 - p.a
    B = np.zeros((4, 2))
    B[2, 0], B[3, 1] = p.b
    return LinearModel(A, B)


def manipulator_constraints(varpi_max: float = 6.0) -> ConstraintSet:
    H = np.array([[0, 0, 1, 0], [0, 0, -1, 0], [0, 0, 0, 1], [0, 0, 0, -1]], dtype=float)
    return ConstraintSet(H, np.full(4, varpi_max))


def manipulator_error_bounds(p: ManipulatorParams, tau: int = 2, cs: ConstraintSet | None = None):
    cs = cs or manipulator_constraints()
    amplitude = np.concatenate([np.zeros(2), p.gravity])
    return _error_bounds(manipulator_linear_model(p), cs, tau, amplitude)


def manipulator_stay_input(p: ManipulatorParams, x, mu_w) -> np.ndarray:
    a, b = p.a, p.b
    om, mu = np.asarray(x[2:4]), np.asarray(mu_w[2:4])
    return -((1.0 - a) * om + (1.0 - a) * mu) / b


def manipulator_back_sequence(p: ManipulatorParams, x, mu_w) -> np.ndarray:
    a, b = p.a, p.b
    om, mu = np.asarray(x[2:4]), np.asarray(mu_w[2:4])
    u0 = -((1.0 - a) ** 2 * om + (2.0 - a) * mu) / ((1.0 - a) * b)
    return np.concatenate([u0, np.zeros(2)])


def pendulum_features(x):
    """Network input [cos phi, sin phi, zeta] for a (B, 2) batch."""
    return np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0]), x[:, 1]])


def manipulator_features(x):
    return np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0]), np.cos(x[:, 1]), np.sin(x[:, 1]), x[:, 2:]])


# ---------------------------------------------------------------------------
# bundled scenarios


@dataclass
class Environment:
    """Everything the experiment loop needs for one plant."""

    name: str
    step: Callable
    cost: Callable
    model: LinearModel
    constraints: ConstraintSet
    noise: GaussianNoise
    safety: SafetyConfig
    x0: np.ndarray
    action_bound: float
    stay_input: Callable | None = None
    back_sequence: Callable | None = None
    features: Callable | None = None
    feature_dim: int | None = None
    params: object = field(default=None, repr=False)


def make_pendulum(params: PendulumParams | None = None, *, eta=0.95, xi=0.9998, tau=2, horizon=100,
                  zeta_max=6.0, mu_w=(0.0, 0.5), sigma_w=(0.05, 0.1), x0=(math.pi, 0.0),
                  action_bound=2.0, bounds_as_reported=False) -> Environment:
    p = params or PendulumParams()
    cs = pendulum_constraints(zeta_max)
    db, Db = pendulum_error_bounds(p, tau, cs, as_reported=bounds_as_reported)
    noise = GaussianNoise(np.asarray(mu_w, float), np.diag(np.asarray(sigma_w, float) ** 2))
    stay = back = None
    if tau == 2:
        stay = lambda x, mu: pendulum_stay_input(p, x, mu)  # noqa: E731
        back = lambda x, mu: pendulum_back_sequence(p, x, mu)  # noqa: E731
    return Environment(
        name="pendulum",
        step=lambda x, u, w: pendulum_step(p, x, u, w),
        cost=pendulum_cost,
        model=pendulum_linear_model(p),
        constraints=cs,
        noise=noise,
        safety=SafetyConfig(eta, xi, tau, horizon, db, Db),
        x0=np.asarray(x0, float),
        action_bound=action_bound,
        stay_input=stay,
        back_sequence=back,
        features=pendulum_features,
        feature_dim=3,
        params=p,
    )


def make_manipulator(params: ManipulatorParams | None = None, *, eta=0.95, xi=0.9998, tau=2, horizon=100,
                     varpi_max=6.0, mu_w=(0.0, 0.1, -0.1, 0.05), sigma_w=(0.01, 0.03, 0.02, 0.01),
                     x0=(math.pi, math.pi, 0.0, 0.0), action_bound=10.0) -> Environment:
    p = params or ManipulatorParams()
    cs = manipulator_constraints(varpi_max)
    db, Db = manipulator_error_bounds(p, tau, cs)
    noise = GaussianNoise(np.asarray(mu_w, float), np.diag(np.asarray(sigma_w, float) ** 2))
    stay = back = None
    if tau == 2:
        stay = lambda x, mu: manipulator_stay_input(p, x, mu)  # noqa: E731
        back = lambda x, mu: manipulator_back_sequence(p, x, mu)  # noqa: E731
    return Environment(
        name="manipulator",
        step=lambda x, u, w: manipulator_step(p, x, u, w),
        cost=manipulator_cost,
        model=manipulator_linear_model(p),
        constraints=cs,
        noise=noise,
        safety=SafetyConfig(eta, xi, tau, horizon, db, Db),
        x0=np.asarray(x0, float),
        action_bound=action_bound,
        stay_input=stay,
        back_sequence=back,
        features=manipulator_features,
        feature_dim=6,
        params=p,
    )
