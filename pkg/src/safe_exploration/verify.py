"""Monte Carlo and exact checks of the safety guarantees.

Statistical checks compare an empirical frequency against a required
probability q with a one-sided band of three binomial standard errors:
pass iff frequency >= q - 3 sqrt(q (1 - q) / n).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import chance, conservative
from .core import (
    ConstraintSet,
    DomainError,
    GaussianNoise,
    LinearModel,
    normal_cdf_inv,
    sample_gaussian,
)
from .envs import Environment
from .explorer import Explorer

N_SE = 3.0


def binomial_se(q: float, n: int) -> float:
    return math.sqrt(q * (1.0 - q) / n)


def lower_band(q: float, n: int) -> float:
    return q - N_SE * binomial_se(q, n)


def wilson_interval(count: int, n: int, confidence: float = 0.99) -> tuple[float, float]:
    if n <= 0:
        raise DomainError("Wilson interval needs n > 0")
    z = normal_cdf_inv(0.5 + confidence / 2.0)
    p = count / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


# ---------------------------------------------------------------------------
# Markov chain of safe / unsafe runs


@dataclass(frozen=True)
class MarkovChainSpec:
    """rho[i] is the probability of returning to (or staying in) the safe state from state i+1."""

    rho: np.ndarray
    tau: int
    horizon: int

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (self.tau + 2,):
            raise DomainError(f"rho must have tau + 2 = {self.tau + 2} entries, got {rho.shape}")
        if np.any(rho < 0) or np.any(rho > 1):
            raise DomainError("rho entries must be probabilities")
        object.__setattr__(self, "rho", rho)


def transition_matrix(spec: MarkovChainSpec) -> np.ndarray:
    """Row-stochastic matrix over states 1..tau+2 (0-based here)."""
    s = spec.tau + 2
    P = np.zeros((s, s))
    P[:, 0] = spec.rho
    for i in range(s - 1):
        P[i, i + 1] = 1.0 - spec.rho[i]
    P[s - 1, s - 1] = 1.0 - spec.rho[s - 1]
    return P


def markov_exact(spec: MarkovChainSpec) -> np.ndarray:
    """Pr{X_k = safe} for k = 0..horizon, by forward recursion from X_0 = safe."""
    rho = spec.rho
    p = np.zeros(spec.tau + 2)
    p[0] = 1.0
    out = [1.0]
    for _ in range(spec.horizon):
        nxt = np.empty_like(p)
        nxt[0] = rho @ p
        nxt[1:-1] = (1.0 - rho[:-2]) * p[:-2]
        nxt[-1] = (1.0 - rho[-2]) * p[-2] + (1.0 - rho[-1]) * p[-1]
        p = nxt
        out.append(p[0])
    return np.asarray(out)


def markov_simulate(spec: MarkovChainSpec, n_chains: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical Pr{X_k = safe}, k = 0..horizon, over n_chains independent chains."""
    last = spec.tau + 1
    state = np.zeros(n_chains, dtype=int)
    out = [1.0]
    for _ in range(spec.horizon):
        back = rng.random(n_chains) < spec.rho[state]
        state = np.where(back, 0, np.minimum(state + 1, last))
        out.append(float(np.mean(state == 0)))
    return np.asarray(out)


def composite_return_probability(rho: Sequence[float], tau: int) -> float:
    """rho_2 + sum_{i=3}^{tau+1} rho_i prod_{j=2}^{i-1} (1 - rho_j): chance of returning within tau steps."""
    rho = np.asarray(rho, dtype=float)
    total, stay_out = 0.0, 1.0
    for i in range(1, tau + 1):
        total += rho[i] * stay_out
        stay_out *= 1.0 - rho[i]
    return total


def lemma2_bound(spec: MarkovChainSpec, xi: float) -> np.ndarray:
    k = np.arange(spec.horizon + 1)
    return xi**k * spec.rho[0] ** spec.tau


def random_markov_spec(rng: np.random.Generator, xi: float, tau: int, horizon: int) -> MarkovChainSpec:
    """Random chain whose unsafe states return within tau steps with probability >= xi."""
    rho = np.empty(tau + 2)
    rho[0] = rng.uniform(0.5, 1.0)
    # the product of (1 - rho_j) over the tau unsafe states must be <= 1 - xi
    budget = rng.uniform(0.0, 1.0 - xi)
    shares = rng.dirichlet(np.ones(tau))
    rho[1:tau + 1] = 1.0 - budget**shares
    rho[tau + 1] = rng.uniform(0.0, 1.0)
    return MarkovChainSpec(np.clip(rho, 1e-12, 1 - 1e-12), tau, horizon)


# ---------------------------------------------------------------------------
# Monte Carlo safety estimates


def linear_step(model: LinearModel, offset=None) -> Callable:
    """Batched linear model step with an optional constant additive offset."""
    off = np.zeros(model.n) if offset is None else np.asarray(offset, dtype=float)

    def step(x, u, w):
        return x @ model.A.T + u @ model.B.T + w + off

    return step


def _safe_mask(cs: ConstraintSet, X: np.ndarray, rows=None) -> np.ndarray:
    H, d = cs.H, cs.d
    if rows is not None:
        H, d = H[list(rows)], d[list(rows)]
    return np.all(X @ H.T <= d, axis=1)


def mc_one_step_safety(step: Callable, cs: ConstraintSet, x, input_dist: GaussianNoise, noise: GaussianNoise,
                       n: int, rng: np.random.Generator, rows=None) -> float:
    """Fraction of next states inside the safe set (or inside the selected rows)."""
    if n < 1000:
        raise DomainError("use at least 1000 samples")
    X = np.broadcast_to(np.asarray(x, dtype=float), (n, noise.dim))
    U = sample_gaussian(input_dist, rng, n)
    W = sample_gaussian(noise, rng, n)
    return float(np.mean(_safe_mask(cs, step(X, U, W), rows)))


def mc_tau_step_safety(step: Callable, cs: ConstraintSet, x, U, noise: GaussianNoise, n: int,
                       rng: np.random.Generator, rows=None) -> float:
    """Fraction of states inside the safe set after applying the rows of U in order."""
    if n < 1000:
        raise DomainError("use at least 1000 samples")
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X = np.tile(np.asarray(x, dtype=float), (n, 1))
    for u in U:
        X = step(X, np.broadcast_to(u, (n, u.size)), sample_gaussian(noise, rng, n))
    return float(np.mean(_safe_mask(cs, X, rows)))


def row_offset(cs: ConstraintSet, j: int, delta: float) -> np.ndarray:
    """Constant state offset e with h_j^T e = delta (along h_j)."""
    h = cs.H[j]
    return delta * h / (h @ h)


# ---------------------------------------------------------------------------
# frequency reports


@dataclass
class FrequencyReport:
    counts: np.ndarray
    n: int
    frequencies: np.ndarray
    wilson_low: np.ndarray
    wilson_high: np.ndarray
    threshold: float
    passed: bool
    strict_passed: bool

    @property
    def min_frequency(self) -> float:
        return float(self.frequencies.min())

    @property
    def mean_frequency(self) -> float:
        return float(self.frequencies.mean())

    def rows(self):
        """CSV rows: step k = 1..T."""
        for k, (c, f, lo, hi) in enumerate(zip(self.counts, self.frequencies, self.wilson_low, self.wilson_high), 1):
            yield {"step": k, "safe_count": int(c), "n": self.n, "frequency": repr(float(f)),
                   "wilson99_low": repr(float(lo)), "wilson99_high": repr(float(hi)), "threshold": self.threshold}


def frequency_report(safe, threshold: float) -> FrequencyReport:
    """Per-step safety frequencies from a boolean (episodes, steps) array of Hx_k <= d flags."""
    safe = np.asarray(safe, dtype=bool)
    if safe.ndim != 2 or safe.size == 0:
        raise DomainError("expected a nonempty (episodes, steps) array")
    n = safe.shape[0]
    counts = safe.sum(axis=0)
    freq = counts / n
    bounds = np.array([wilson_interval(int(c), n) for c in counts])
    return FrequencyReport(
        counts=counts, n=n, frequencies=freq, wilson_low=bounds[:, 0], wilson_high=bounds[:, 1],
        threshold=threshold, passed=bool(freq.min() >= lower_band(threshold, n)),
        strict_passed=bool(freq.min() >= threshold),
    )


# ---------------------------------------------------------------------------
# suites


@dataclass
class CheckRow:
    label: str
    value: float
    required: float
    passed: bool


@dataclass
class SuiteResult:
    name: str
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def add(self, label: str, value: float, required: float, passed: bool | None = None) -> None:
        ok = value >= required if passed is None else passed
        self.rows.append(CheckRow(label, float(value), float(required), bool(ok)))

    def summary(self) -> str:
        bad = [r for r in self.rows if not r.passed]
        head = f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({len(self.rows) - len(bad)}/{len(self.rows)} checks)"
        lines = [head] + [f"  failed {r.label}: {r.value:.6g} < {r.required:.6g}" for r in bad[:20]]
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["suite", "check", "value", "required", "passed"])
            for r in self.rows:
                w.writerow([self.name, r.label, repr(r.value), repr(r.required), int(r.passed)])


def _random_state(env: Environment, rng: np.random.Generator, safe: bool) -> np.ndarray:
    """State with angles in [-pi, pi) and velocities inside (or just outside) the safe box."""
    n = env.model.n
    n_ang = n // 2
    ang = rng.uniform(-np.pi, np.pi, n_ang)
    vmax = env.constraints.d.max()
    if safe:
        vel = rng.uniform(-vmax, vmax, n - n_ang)
    else:
        vel = rng.uniform(-vmax, vmax, n - n_ang)
        i = rng.integers(n - n_ang)
        vel[i] = rng.choice([-1.0, 1.0]) * rng.uniform(vmax, 2.0 * vmax)
    return np.concatenate([ang, vel])


def lemma1_suite(env: Environment, rng: np.random.Generator, n_states: int = 20, n: int = 100_000) -> SuiteResult:
    """Exploratory inputs with the covariance pushed onto the tightened boundary."""
    res = SuiteResult(f"lemma1[{env.name}]")
    model, cs, cfg, noise = env.model, env.constraints, env.safety, env.noise
    sigma_base = np.eye(model.m)
    found = 0
    while found < n_states:
        x = _random_state(env, rng, safe=True)
        mu = rng.uniform(-env.action_bound, env.action_bound, model.m)
        k = int(rng.integers(0, cfg.horizon))
        if not chance.exploration_feasible(model, cs, cfg, noise, x, mu, k):
            continue
        found += 1
        sigma = chance.max_exploration_cov(model, cs, cfg, noise, x, mu, k, sigma_base, np.inf)
        res.add(f"state{found}.check_sigma", float(chance.check_sigma(model, cs, cfg, noise, x, mu, k, sigma)), 1.0)
        u_dist = GaussianNoise(mu, sigma)
        q_row = chance.eta_prime(cfg, cs.n_c, k)
        for j in range(cs.n_c):
            for delta in (cfg.delta_bar[j], -cfg.delta_bar[j]):
                step = linear_step(model, row_offset(cs, j, delta))
                f = mc_one_step_safety(step, cs, x, u_dist, noise, n, rng, rows=[j])
                res.add(f"state{found}.row{j}.offset{delta:+.4g}", f, lower_band(q_row, n))
        q_joint = chance.q_stay(cfg, k)
        f = mc_one_step_safety(env.step, cs, x, u_dist, noise, n, rng)
        res.add(f"state{found}.plant_joint", f, lower_band(q_joint, n))
    return res


def _stay_candidates(env: Environment, x, q: float):
    out = []
    if env.stay_input is not None:
        out.append(("closed_form", np.atleast_1d(env.stay_input(x, env.noise.mean))))
    u = conservative.solve_stay_input(env.model, env.constraints, env.safety, env.noise, x, q)
    out.append(("lp", u))
    return out


def theorem1_stay_suite(env: Environment, rng: np.random.Generator, n_states: int = 5,
                        n: int = 100_000) -> SuiteResult:
    res = SuiteResult(f"theorem1-stay[{env.name}]")
    model, cs, cfg, noise = env.model, env.constraints, env.safety, env.noise
    states = [env.x0] + [_random_state(env, rng, safe=True) for _ in range(n_states - 1)]
    zero_u = GaussianNoise.zero(model.m)
    for i, x in enumerate(states):
        for k in (0, cfg.horizon):
            q = chance.q_stay(cfg, k)
            q_row = conservative.bonferroni_level(q, cs.n_c)
            for name, u in _stay_candidates(env, x, q):
                tag = f"state{i}.k{k}.{name}"
                if u is None:
                    res.add(f"{tag}.solved", 0.0, 1.0)
                    continue
                res.add(f"{tag}.condition", float(conservative.stay_condition_holds(model, cs, cfg, noise, x, u, q)), 1.0)
                u_dist = GaussianNoise(u, zero_u.cov)
                for j in range(cs.n_c):
                    for delta in (cfg.delta_bar[j], -cfg.delta_bar[j]):
                        step = linear_step(model, row_offset(cs, j, delta))
                        f = mc_one_step_safety(step, cs, x, u_dist, noise, n, rng, rows=[j])
                        res.add(f"{tag}.row{j}.offset{delta:+.4g}", f, lower_band(q_row, n))
                f = mc_one_step_safety(env.step, cs, x, u_dist, noise, n, rng)
                res.add(f"{tag}.plant_joint", f, lower_band(q, n))
    return res


def theorem1_back_suite(env: Environment, rng: np.random.Generator, n_states: int = 5,
                        n: int = 100_000) -> SuiteResult:
    res = SuiteResult(f"theorem1-back[{env.name}]")
    model, cs, cfg, noise = env.model, env.constraints, env.safety, env.noise
    q = cfg.xi
    q_row = conservative.bonferroni_level(q, cs.n_c)
    states = [_random_state(env, rng, safe=False) for _ in range(n_states)]
    for i, x in enumerate(states):
        cands = []
        if env.back_sequence is not None:
            cands.append(("closed_form", np.asarray(env.back_sequence(x, noise.mean), dtype=float)))
        cands.append(("lp", conservative.solve_back_sequence(model, cs, cfg, noise, x, q)))
        for name, U in cands:
            tag = f"state{i}.{name}"
            if U is None:
                res.add(f"{tag}.solved", 0.0, 1.0)
                continue
            res.add(f"{tag}.condition", float(conservative.back_condition_holds(model, cs, cfg, noise, x, U, q)), 1.0)
            seq = U.reshape(cfg.tau, model.m)
            for j in range(cs.n_c):
                for Delta in (cfg.Delta_bar[j], -cfg.Delta_bar[j]):
                    # the summed tau-step error enters as one offset after the final step
                    f = _tau_step_with_final_offset(model, cs, x, seq, noise, n, rng, row_offset(cs, j, Delta), j)
                    res.add(f"{tag}.row{j}.offset{Delta:+.4g}", f, lower_band(q_row, n))
            f = mc_tau_step_safety(env.step, cs, x, seq, noise, n, rng)
            res.add(f"{tag}.plant_joint", f, lower_band(q, n))
    return res


def _tau_step_with_final_offset(model, cs, x, seq, noise, n, rng, offset, j) -> float:
    X = np.tile(np.asarray(x, dtype=float), (n, 1))
    step = linear_step(model)
    for u in seq:
        X = step(X, np.broadcast_to(u, (n, u.size)), sample_gaussian(noise, rng, n))
    return float(np.mean(_safe_mask(cs, X + offset, rows=[j])))


def lemma2_suite(rng: np.random.Generator, n_specs: int = 200, horizon: int = 100) -> SuiteResult:
    res = SuiteResult("lemma2")
    for i in range(n_specs):
        eta = rng.uniform(0.51, 0.99)
        lo = eta ** (1.0 / horizon)
        xi = rng.uniform(lo, 1.0 - 0.25 * (1.0 - lo))
        tau = int(rng.integers(1, 6))
        spec = random_markov_spec(rng, xi, tau, horizon)
        comp = composite_return_probability(spec.rho, tau)
        res.add(f"spec{i}.composite", comp, xi)
        p = markov_exact(spec)[1:]
        bound = lemma2_bound(spec, xi)[1:]
        margin = p - bound
        res.add(f"spec{i}.min_margin", float(margin.min()), 0.0, passed=bool(np.all(margin > 0)))
    return res


def run_safety_episodes(env: Environment, policy: Callable, n_episodes: int, rng: np.random.Generator,
                        sigma_base=None, s_max: float = 1.0) -> np.ndarray:
    """Run the switching rule with a fixed policy; returns (episodes, T) flags of Hx_k <= d, k = 1..T."""
    T = env.safety.horizon
    safe = np.zeros((n_episodes, T), dtype=bool)
    ex = Explorer(env.model, env.constraints, env.safety, env.noise, sigma_base, s_max,
                  env.stay_input, env.back_sequence)
    H, d = env.constraints.H, env.constraints.d
    for e in range(n_episodes):
        ex.reset()
        x = env.x0.copy()
        for k in range(T):
            dec = ex.decide(x, policy(x), rng)
            w = sample_gaussian(env.noise, rng)
            x = env.step(x, dec.input, w)
            safe[e, k] = bool(np.all(H @ x <= d))
            ex.advance()
    return safe


def theorem2_suite(env: Environment, rng: np.random.Generator, n_episodes: int = 1000,
                   policy: Callable | None = None) -> SuiteResult:
    """Closed loop with a fixed policy: per-step safety frequency against eta."""
    res = SuiteResult(f"theorem2[{env.name}]")
    if policy is None:
        # a deliberately aggressive policy: full action towards the nearest velocity bound
        bound = env.action_bound
        vel = slice(env.model.n // 2, env.model.n)
        policy = lambda x: bound * np.sign(x[vel] + 1e-9)  # noqa: E731
    safe = run_safety_episodes(env, policy, n_episodes, rng)
    rep = frequency_report(safe, env.safety.eta)
    for k, f in enumerate(rep.frequencies, 1):
        res.add(f"step{k}", float(f), lower_band(env.safety.eta, rep.n))
    return res


SUITES = ("lemma1", "lemma2", "theorem1-stay", "theorem1-back", "theorem2")


def run_suite(name: str, env: Environment, rng: np.random.Generator, n_samples: int = 100_000) -> SuiteResult:
    if name == "lemma1":
        return lemma1_suite(env, rng, n=n_samples)
    if name == "lemma2":
        return lemma2_suite(rng, horizon=env.safety.horizon)
    if name == "theorem1-stay":
        return theorem1_stay_suite(env, rng, n=n_samples)
    if name == "theorem1-back":
        return theorem1_back_suite(env, rng, n=n_samples)
    if name == "theorem2":
        return theorem2_suite(env, rng)
    raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")


def write_frequency_csv(report: FrequencyReport, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "safe_count", "n", "frequency", "wilson99_low",
                                           "wilson99_high", "threshold"])
        w.writeheader()
        for row in report.rows():
            w.writerow(row)
