"""Conservative inputs: one-step stay inputs and tau-step back sequences.

Both sufficient conditions are linear in the input, so candidate inputs are
found with a small dense simplex solver (`simplex_min`) and then re-verified
by recomputing the inequalities from scratch.
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
    SafetyConfig,
    ShapeError,
    normal_cdf_inv,
    psd_sqrt,
)

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class HorizonModel:
    """x_{k+tau} = A^tau x_k + B_hat U_k + C_hat (E_k + W_k)."""

    A_pow_tau: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    mu_hat: np.ndarray
    cov_block: np.ndarray

    @property
    def tau(self) -> int:
        return self.C_hat.shape[1] // self.C_hat.shape[0]


@dataclass(frozen=True)
class LinearFeasibilityProblem:
    """Find z with G z <= g."""

    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if G.shape[0] < 1 or G.shape[1] < 1 or g.shape != (G.shape[0],):
            raise ShapeError(f"inconsistent problem shapes G{G.shape}, g{g.shape}")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(g))):
            raise DomainError("problem data must be finite")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)


def build_horizon(model: LinearModel, noise: GaussianNoise, tau: int) -> HorizonModel:
    if tau < 1:
        raise DomainError(f"tau must be >= 1, got {tau}")
    n = model.n
    powers = [np.eye(n)]
    for _ in range(tau):
        powers.append(model.A @ powers[-1])
    # blocks ordered oldest input first: [A^{tau-1} B, ..., B]
    B_hat = np.hstack([powers[tau - 1 - i] @ model.B for i in range(tau)])
    C_hat = np.hstack([powers[tau - 1 - i] for i in range(tau)])
    mu_hat = np.tile(noise.mean, tau)
    cov_block = block_diag(*([noise.cov] * tau))
    return HorizonModel(powers[tau], B_hat, C_hat, mu_hat, cov_block)


# ---------------------------------------------------------------------------
# dense two-phase simplex


class _Tableau:
    """Standard-form tableau for min c^T y, A y = b (b >= 0), y >= 0."""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: list[int]):
        self.A = A
        self.b = b
        self.basis = basis

    def pivot(self, row: int, col: int) -> None:
        piv = self.A[row, col]
        self.A[row] /= piv
        self.b[row] /= piv
        for r in range(self.A.shape[0]):
            if r != row and self.A[r, col] != 0.0:
                f = self.A[r, col]
                self.A[r] -= f * self.A[row]
                self.b[r] -= f * self.b[row]
        self.basis[row] = col

    def optimize(self, c: np.ndarray, allowed: np.ndarray, max_iter: int = 10_000) -> str:
        """Primal simplex with Bland's rule; returns 'optimal' or 'unbounded'."""
        for _ in range(max_iter):
            cb = c[self.basis]
            reduced = c - cb @ self.A
            reduced[~allowed] = 0.0
            reduced[self.basis] = 0.0
            entering = np.flatnonzero(reduced < -PIVOT_TOL)
            if entering.size == 0:
                return "optimal"
            col = int(entering[0])
            column = self.A[:, col]
            rows = np.flatnonzero(column > PIVOT_TOL)
            if rows.size == 0:
                return "unbounded"
            ratios = self.b[rows] / column[rows]
            best = ratios.min()
            ties = rows[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
            # Bland: among tied rows take the one whose basic variable has the smallest index
            row = int(min(ties, key=lambda r: self.basis[r]))
            self.pivot(row, col)
        raise RuntimeError("simplex iteration limit reached")

    def solution(self, size: int) -> np.ndarray:
        y = np.zeros(size)
        for r, j in enumerate(self.basis):
            if j < size:
                y[j] = self.b[r]
        return y


def simplex_min(c, A_ub, b_ub):
    """Solve min c^T y s.t. A_ub y <= b_ub, y >= 0.

    Returns (status, y, objective) with status in {'optimal', 'infeasible', 'unbounded'}.
    """
    c = np.asarray(c, dtype=float)
    A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.asarray(b_ub, dtype=float)
    p, v = A_ub.shape
    # slacks make every row an equality; rows with negative rhs are negated and get an artificial
    neg = b_ub < 0
    n_art = int(neg.sum())
    A = np.zeros((p, v + p + n_art))
    A[:, :v] = A_ub
    A[:, v:v + p] = np.eye(p)
    b = b_ub.copy()
    A[neg] *= -1.0
    b[neg] *= -1.0
    basis = []
    art = v + p
    for r in range(p):
        if neg[r]:
            A[r, art] = 1.0
            basis.append(art)
            art += 1
        else:
            basis.append(v + r)
    tab = _Tableau(A, b, basis)
    total = v + p + n_art
    allowed = np.ones(total, dtype=bool)

    if n_art:
        c1 = np.zeros(total)
        c1[v + p:] = 1.0
        tab.optimize(c1, allowed)
        if c1[tab.basis] @ tab.b > FEAS_TOL * max(1.0, np.abs(b_ub).max()):
            return "infeasible", None, None
        # drive remaining (zero-valued) artificials out of the basis where possible
        for r, j in enumerate(tab.basis):
            if j >= v + p:
                cand = np.flatnonzero(np.abs(tab.A[r, :v + p]) > PIVOT_TOL)
                if cand.size:
                    tab.pivot(r, int(cand[0]))
        allowed[v + p:] = False

    c2 = np.zeros(total)
    c2[:v] = c
    status = tab.optimize(c2, allowed)
    if status == "unbounded":
        return "unbounded", None, None
    y = tab.solution(v)
    return "optimal", y, float(c @ y)


def solve_lp_feasible(prob: LinearFeasibilityProblem) -> np.ndarray | None:
    """Minimum infinity-norm point of {z : G z <= g}, or None if the set is empty.

    Phase 1 minimises the largest constraint violation t; the problem counts
    as feasible when t <= 1e-9. Phase 2 then minimises max|z_i| subject to
    G z <= g + t. Free variables are split as z = z+ - z-.
    """
    G, g = prob.G, prob.g
    p, v = G.shape

    # phase 1: variables [z+, z-, t]
    A1 = np.hstack([G, -G, -np.ones((p, 1))])
    c1 = np.zeros(2 * v + 1)
    c1[-1] = 1.0
    status, y, t = simplex_min(c1, A1, g)
    if status != "optimal":
        raise RuntimeError(f"phase-1 problem reported {status}")
    if t > FEAS_TOL:
        return None
    g_relaxed = g + max(t, 0.0)

    # phase 2: variables [z+, z-, s]; |z_i| <= s
    eye = np.eye(v)
    A2 = np.vstack([
        np.hstack([G, -G, np.zeros((p, 1))]),
        np.hstack([eye, -eye, -np.ones((v, 1))]),
        np.hstack([-eye, eye, -np.ones((v, 1))]),
    ])
    b2 = np.concatenate([g_relaxed, np.zeros(2 * v)])
    c2 = np.zeros(2 * v + 1)
    c2[-1] = 1.0
    status, y, _ = simplex_min(c2, A2, b2)
    if status != "optimal":
        raise RuntimeError(f"phase-2 problem reported {status}")
    return y[:v] - y[v:2 * v]


# ---------------------------------------------------------------------------
# sufficient conditions for conservative inputs


def bonferroni_level(q: float, n_c: int) -> float:
    return 1.0 - (1.0 - q) / n_c


def _check_q(q: float) -> None:
    if not 0.5 < q < 1.0:
        raise DomainError(f"q must lie in (0.5, 1), got {q}")


def stay_rows(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
              x, q: float) -> LinearFeasibilityProblem:
    """Stay condition as G u <= g, one row per (j, +/-delta_bar_j)."""
    _check_q(q)
    x = np.asarray(x, dtype=float)
    z = normal_cdf_inv(bonferroni_level(q, cs.n_c))
    spread = np.linalg.norm(cs.H @ noise.sqrt_cov, axis=1)
    base = cs.d - cs.H @ (model.A @ x + noise.mean) - z * spread
    HB = cs.H @ model.B
    G = np.repeat(HB, 2, axis=0)
    g = np.column_stack([base - cfg.delta_bar, base + cfg.delta_bar]).ravel()
    return LinearFeasibilityProblem(G, g)


def back_rows(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
              x, q: float, horizon: HorizonModel | None = None) -> LinearFeasibilityProblem:
    """Back condition as G U <= g over the stacked tau-step input U."""
    _check_q(q)
    x = np.asarray(x, dtype=float)
    hm = horizon or build_horizon(model, noise, cfg.tau)
    z = normal_cdf_inv(bonferroni_level(q, cs.n_c))
    spread = np.linalg.norm(cs.H @ hm.C_hat @ psd_sqrt(hm.cov_block), axis=1)
    base = cs.d - cs.H @ (hm.A_pow_tau @ x + hm.C_hat @ hm.mu_hat) - z * spread
    HB = cs.H @ hm.B_hat
    G = np.repeat(HB, 2, axis=0)
    g = np.column_stack([base - cfg.Delta_bar, base + cfg.Delta_bar]).ravel()
    return LinearFeasibilityProblem(G, g)


def stay_condition_holds(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                         x, u, q: float, tol: float = FEAS_TOL) -> bool:
    _check_q(q)
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise ShapeError(f"u must have length {model.m}")
    z = normal_cdf_inv(bonferroni_level(q, cs.n_c))
    rhs = z * np.linalg.norm(cs.H @ noise.sqrt_cov, axis=1)
    slack = cs.d - cs.H @ (model.A @ x + model.B @ u + noise.mean)
    lhs = np.column_stack([slack - cfg.delta_bar, slack + cfg.delta_bar])
    return bool(np.all(lhs >= rhs[:, None] - tol))


def back_condition_holds(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                         x, U, q: float, tol: float = FEAS_TOL) -> bool:
    _check_q(q)
    x = np.asarray(x, dtype=float)
    U = np.asarray(U, dtype=float).ravel()
    if U.shape != (model.m * cfg.tau,):
        raise ShapeError(f"U must have length m*tau = {model.m * cfg.tau}, got {U.size}")
    hm = build_horizon(model, noise, cfg.tau)
    z = normal_cdf_inv(bonferroni_level(q, cs.n_c))
    rhs = z * np.linalg.norm(cs.H @ hm.C_hat @ psd_sqrt(hm.cov_block), axis=1)
    slack = cs.d - cs.H @ (hm.A_pow_tau @ x + hm.B_hat @ U + hm.C_hat @ hm.mu_hat)
    lhs = np.column_stack([slack - cfg.Delta_bar, slack + cfg.Delta_bar])
    return bool(np.all(lhs >= rhs[:, None] - tol))


def solve_stay_input(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                     x, q: float) -> np.ndarray | None:
    """Minimum-norm input satisfying the stay condition at level q, or None."""
    u = solve_lp_feasible(stay_rows(model, cs, cfg, noise, x, q))
    if u is None or not stay_condition_holds(model, cs, cfg, noise, x, u, q):
        return None
    return u


def solve_back_sequence(model: LinearModel, cs: ConstraintSet, cfg: SafetyConfig, noise: GaussianNoise,
                        x, q: float) -> np.ndarray | None:
    """Stacked tau-step sequence [u_k, ..., u_{k+tau-1}] satisfying the back condition, or None."""
    U = solve_lp_feasible(back_rows(model, cs, cfg, noise, x, q))
    if U is None or not back_condition_holds(model, cs, cfg, noise, x, U, q):
        return None
    return U
