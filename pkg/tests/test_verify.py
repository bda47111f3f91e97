import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safe_exploration import chance, verify
from safe_exploration.core import DomainError, GaussianNoise, normal_cdf
from safe_exploration.verify import MarkovChainSpec


def _matrix_power_oracle(spec):
    P = verify.transition_matrix(spec)
    p = np.zeros(spec.tau + 2)
    p[0] = 1.0
    out = [1.0]
    for _ in range(spec.horizon):
        p = p @ P
        out.append(p[0])
    return np.array(out)


def test_transition_matrix_is_stochastic():
    spec = MarkovChainSpec([0.9, 0.5, 0.7, 0.2], 2, 10)
    P = verify.transition_matrix(spec)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert P[3, 3] == pytest.approx(0.8)


@pytest.mark.parametrize("seed", range(10))
def test_markov_exact_matches_matrix_powers(seed):
    rng = np.random.default_rng(seed)
    tau = int(rng.integers(1, 5))
    spec = MarkovChainSpec(rng.uniform(0, 1, tau + 2), tau, 60)
    np.testing.assert_allclose(verify.markov_exact(spec), _matrix_power_oracle(spec), atol=1e-14)


def test_markov_exact_trivial_cases():
    np.testing.assert_array_equal(verify.markov_exact(MarkovChainSpec(np.ones(4), 2, 20)), 1.0)
    p, r, s = 0.8, 0.6, 0.3
    out = verify.markov_exact(MarkovChainSpec([p, r, s], 1, 3))
    assert out[1] == pytest.approx(p)
    assert out[2] == pytest.approx(p * p + (1 - p) * r)


def test_markov_bound_for_documented_example():
    spec = MarkovChainSpec([0.9747, 0.999, 0.999, 0.999], 2, 100)
    p = verify.markov_exact(spec)[1:]
    assert np.all(p > verify.lemma2_bound(spec, 0.9998)[1:])


def test_markov_spec_validation():
    with pytest.raises(DomainError):
        MarkovChainSpec([0.5, 0.5], 2, 10)
    with pytest.raises(DomainError):
        MarkovChainSpec([0.5, 1.5, 0.5, 0.5], 2, 10)


def test_markov_simulate_agrees_with_exact():
    spec = MarkovChainSpec([0.97, 0.6, 0.9, 0.4], 2, 100)
    n = 100_000
    emp = verify.markov_simulate(spec, n, np.random.default_rng(2024))
    exact = verify.markov_exact(spec)
    se = np.sqrt(exact * (1 - exact) / n)
    # the 3-SE band per step, at a fixed set of steps (a max over all 100 would exceed 3 SE by chance)
    ks = [1, 2, 5, 10, 25, 50, 100]
    assert np.all(np.abs(emp[ks] - exact[ks]) <= 3 * se[ks])
    z = (emp[1:] - exact[1:]) / se[1:]
    assert abs(z.mean()) < 0.5 and 0.7 < z.std() < 1.3


def test_markov_simulate_deterministic_and_seeded():
    spec = MarkovChainSpec([0.0, 1.0, 1.0], 1, 10)
    np.testing.assert_array_equal(verify.markov_simulate(spec, 50, np.random.default_rng(0)),
                                  verify.markov_exact(spec))
    spec = MarkovChainSpec([0.9, 0.5, 0.4], 1, 30)
    a = verify.markov_simulate(spec, 1000, np.random.default_rng(5))
    b = verify.markov_simulate(spec, 1000, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.integers(1, 4))
def test_composite_return_is_complement_of_never_returning(rho, tau):
    expected = 1 - np.prod(1 - np.asarray(rho[1:tau + 1]))
    assert verify.composite_return_probability(rho, tau) == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_random_specs_satisfy_the_bound(seed):
    rng = np.random.default_rng(seed)
    xi = 0.999
    spec = verify.random_markov_spec(rng, xi, int(rng.integers(1, 5)), 100)
    assert verify.composite_return_probability(spec.rho, spec.tau) >= xi
    p = verify.markov_exact(spec)[1:]
    assert np.all(p > verify.lemma2_bound(spec, xi)[1:])


def test_wilson_interval():
    lo, hi = verify.wilson_interval(950, 1000)
    assert lo < 0.95 < hi
    # frozen from the textbook formula with z = Phi^-1(0.995)
    z = 2.5758293035489004
    p = 0.95
    centre = (p + z * z / 2000) / (1 + z * z / 1000)
    half = z * math.sqrt(p * (1 - p) / 1000 + z * z / 4e6) / (1 + z * z / 1000)
    assert lo == pytest.approx(centre - half, abs=1e-12)
    assert hi == pytest.approx(centre + half, abs=1e-12)
    assert verify.wilson_interval(0, 10)[0] == 0.0
    assert verify.wilson_interval(10, 10)[1] == 1.0


def test_wilson_against_statsmodels():
    sm = pytest.importorskip("statsmodels.stats.proportion")
    for c, n in [(3, 10), (990, 1000), (50, 51)]:
        ref = sm.proportion_confint(c, n, alpha=0.01, method="wilson")
        np.testing.assert_allclose(verify.wilson_interval(c, n), ref, atol=1e-12)


def test_frequency_report_pass_and_fail():
    rep = verify.frequency_report(np.ones((1000, 100), dtype=bool), 0.95)
    assert rep.passed and rep.strict_passed
    np.testing.assert_array_equal(rep.frequencies, 1.0)
    safe = np.ones((1000, 10), dtype=bool)
    safe[:100, 4] = False
    rep = verify.frequency_report(safe, 0.95)
    assert rep.frequencies[4] == pytest.approx(0.9)
    assert not rep.passed and not rep.strict_passed
    safe = np.ones((1000, 10), dtype=bool)
    safe[:60, 2] = False  # 0.94 lies inside the 3-SE band around 0.95
    rep = verify.frequency_report(safe, 0.95)
    assert rep.passed and not rep.strict_passed
    with pytest.raises(DomainError):
        verify.frequency_report(np.ones(5, dtype=bool), 0.95)


def test_mc_one_step_zero_noise():
    from safe_exploration.core import ConstraintSet, LinearModel
    model = LinearModel(np.eye(1), np.eye(1))
    cs = ConstraintSet(np.array([[1.0]]), np.array([1.0]))
    zero = GaussianNoise.zero(1)
    step = verify.linear_step(model)
    rng = np.random.default_rng(0)
    assert verify.mc_one_step_safety(step, cs, [0.0], GaussianNoise(np.array([0.5]), np.zeros((1, 1))), zero,
                                     1000, rng) == 1.0
    assert verify.mc_tau_step_safety(step, cs, [0.0], [[0.5], [0.5]], zero, 1000, rng) == 1.0
    assert verify.mc_tau_step_safety(step, cs, [0.0], [[0.5], [0.6]], zero, 1000, rng) == 0.0
    with pytest.raises(DomainError):
        verify.mc_one_step_safety(step, cs, [0.0], zero, zero, 10, rng)


def test_mc_unbiased_against_gaussian_probability():
    from safe_exploration.core import ConstraintSet, LinearModel
    model = LinearModel(np.eye(1), np.eye(1))
    cs = ConstraintSet(np.array([[1.0]]), np.array([1.0]))
    noise = GaussianNoise(np.array([0.2]), np.array([[0.25]]))
    u = GaussianNoise(np.array([0.1]), np.array([[0.16]]))
    exact = normal_cdf((1.0 - 0.3) / math.sqrt(0.41))
    n = 100_000
    ests = [verify.mc_one_step_safety(verify.linear_step(model), cs, [0.0], u, noise, n, np.random.default_rng(s))
            for s in range(5)]
    se = verify.binomial_se(exact, n)
    assert all(abs(e - exact) <= 3 * se for e in ests)


def test_bonferroni_composition_on_shared_samples(manipulator):
    e = manipulator
    u = GaussianNoise(np.array([1.0, -1.0]), np.eye(2))
    rows = [verify.mc_one_step_safety(e.step, e.constraints, [0.5, 0.5, 5.0, -5.0], u, e.noise, 5000,
                                      np.random.default_rng(9), rows=[j]) for j in range(4)]
    joint = verify.mc_one_step_safety(e.step, e.constraints, [0.5, 0.5, 5.0, -5.0], u, e.noise, 5000,
                                      np.random.default_rng(9))
    assert joint >= sum(rows) - 3 - 1e-12


def test_pendulum_boundary_exploration_with_offset(pendulum):
    e = pendulum
    cfg = e.safety
    sigma = chance.max_exploration_cov(e.model, e.constraints, cfg, e.noise, e.x0, [0.0], 0, np.eye(1), np.inf)
    step = verify.linear_step(e.model, verify.row_offset(e.constraints, 0, cfg.delta_bar[0]))
    n = 100_000
    f = verify.mc_one_step_safety(step, e.constraints, e.x0, GaussianNoise(np.zeros(1), sigma), e.noise, n,
                                  np.random.default_rng(1), rows=[0])
    assert f >= verify.lower_band(chance.eta_prime(cfg, 2, 0), n)


def test_stay_and_back_frequencies(pendulum):
    e = pendulum
    n = 100_000
    u = e.stay_input(e.x0, e.noise.mean)
    f = verify.mc_one_step_safety(e.step, e.constraints, e.x0, GaussianNoise(u, np.zeros((1, 1))), e.noise, n,
                                  np.random.default_rng(2))
    assert f >= verify.lower_band(chance.q_stay(e.safety, 0), n)
    x = np.array([math.pi, 7.0])
    U = e.back_sequence(x, e.noise.mean).reshape(2, 1)
    f = verify.mc_tau_step_safety(e.step, e.constraints, x, U, e.noise, n, np.random.default_rng(3))
    assert f >= verify.lower_band(e.safety.xi, n)


def test_tau_one_reduces_to_one_step(pendulum):
    e = pendulum
    n = 50_000
    u = np.array([3.0])
    x = np.array([0.2, 5.0])
    a = verify.mc_tau_step_safety(e.step, e.constraints, x, [u], e.noise, n, np.random.default_rng(4))
    b = verify.mc_one_step_safety(e.step, e.constraints, x, GaussianNoise(u, np.zeros((1, 1))), e.noise, n,
                                  np.random.default_rng(5))
    assert abs(a - b) <= 3 * math.sqrt(2) * verify.binomial_se(max(min(a, 1 - 1e-3), 1e-3), n)


def test_small_suites_pass(pendulum, manipulator):
    rng = np.random.default_rng(0)
    assert verify.lemma2_suite(rng, n_specs=20).passed
    assert verify.lemma1_suite(pendulum, rng, n_states=3, n=5000).passed
    assert verify.theorem1_stay_suite(manipulator, rng, n_states=2, n=5000).passed
    assert verify.theorem1_back_suite(manipulator, rng, n_states=2, n=5000).passed
    with pytest.raises(ValueError):
        verify.run_suite("nope", pendulum, rng)


def test_suite_csv(tmp_path):
    res = verify.SuiteResult("demo")
    res.add("a", 0.99, 0.95)
    res.add("b", 0.90, 0.95)
    assert not res.passed
    assert "failed b" in res.summary()
    res.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "suite,check,value,required,passed"
    assert not verify.SuiteResult("empty").passed
