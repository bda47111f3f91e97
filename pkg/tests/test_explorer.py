import dataclasses

import numpy as np
import pytest

from safe_exploration import envs
from safe_exploration.core import DomainError, UnrecoverableSafetyError
from safe_exploration.explorer import Case, Explorer


def _explorer(e, **kw):
    return Explorer(e.model, e.constraints, e.safety, e.noise, stay_input=e.stay_input,
                    back_sequence=e.back_sequence, **kw)


def test_exploratory_at_start(pendulum, rng):
    ex = _explorer(pendulum)
    d = ex.decide(pendulum.x0, [0.3], rng)
    assert d.case_tag is Case.EXPLORATORY
    np.testing.assert_allclose(d.sigma_used, [[1.0]])
    np.testing.assert_allclose(d.input, 0.3 + d.epsilon)
    assert d.k == 0 and d.back_index is None


def test_stay_when_exploration_unsafe(pendulum, rng):
    ex = _explorer(pendulum)
    x = np.array([0.0, 5.5])
    d = ex.decide(x, [2.0], rng)
    assert d.case_tag is Case.STAY
    np.testing.assert_allclose(d.input, pendulum.stay_input(x, pendulum.noise.mean))
    np.testing.assert_allclose(d.epsilon, 0.0)


def test_back_sequence_is_replayed(pendulum, rng):
    ex = _explorer(pendulum)
    x = np.array([0.0, 7.0])
    d0 = ex.decide(x, [0.0], rng)
    assert d0.case_tag is Case.BACK and d0.back_index == 0
    U = pendulum.back_sequence(x, pendulum.noise.mean)
    assert d0.input[0] == pytest.approx(U[0])
    ex.advance()
    d1 = ex.decide(np.array([0.0, 6.5]), [0.0], rng)  # still unsafe: continue the stored sequence
    assert d1.case_tag is Case.BACK and d1.back_index == 1
    assert d1.input[0] == pytest.approx(U[1])
    ex.advance()
    d2 = ex.decide(np.array([0.0, 6.5]), [0.0], rng)  # sequence exhausted: solve again
    assert d2.back_index == 0
    assert d2.input[0] == pytest.approx(pendulum.back_sequence([0.0, 6.5], pendulum.noise.mean)[0])


def test_back_sequence_dropped_once_safe(pendulum, rng):
    ex = _explorer(pendulum)
    ex.decide(np.array([0.0, 7.0]), [0.0], rng)
    ex.advance()
    assert ex.decide(np.array([0.0, 1.0]), [0.0], rng).case_tag is Case.EXPLORATORY
    ex.advance()
    assert ex.pending_back is None


def test_resolve_back_flag(pendulum, rng):
    ex = _explorer(pendulum, resolve_back=True)
    ex.decide(np.array([0.0, 7.0]), [0.0], rng)
    ex.advance()
    d = ex.decide(np.array([0.0, 6.5]), [0.0], rng)
    assert d.back_index == 0


def test_lp_fallback_without_closed_forms(pendulum, rng):
    e = dataclasses.replace(pendulum, stay_input=None, back_sequence=None)
    ex = _explorer(e)
    assert ex.decide(np.array([0.0, 5.5]), [2.0], rng).case_tag is Case.STAY
    ex.advance()
    assert ex.decide(np.array([0.0, 9.0]), [0.0], rng).case_tag is Case.BACK


def test_unrecoverable_without_solution(rng):
    e = envs.make_pendulum(zeta_max=0.5)
    ex = Explorer(e.model, e.constraints, e.safety, e.noise)
    with pytest.raises(UnrecoverableSafetyError):
        ex.decide(np.array([0.0, 0.4]), [0.0], rng)
    with pytest.raises(UnrecoverableSafetyError):
        ex.decide(np.array([0.0, 3.0]), [0.0], rng)


def test_horizon_is_enforced(pendulum, rng):
    ex = _explorer(pendulum)
    for _ in range(pendulum.safety.horizon):
        ex.decide(pendulum.x0, [0.0], rng)
        ex.advance()
    with pytest.raises(DomainError):
        ex.decide(pendulum.x0, [0.0], rng)
    ex.reset()
    assert ex.decide(pendulum.x0, [0.0], rng).k == 0


def test_same_seed_same_decisions(manipulator):
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(3)
        ex = _explorer(manipulator)
        x = manipulator.x0.copy()
        seq = []
        for _ in range(30):
            d = ex.decide(x, [8.0, -8.0], rng)
            x = manipulator.step(x, d.input, manipulator.noise.mean)
            ex.advance()
            seq.append((d.case_tag, *d.input))
        outs.append(seq)
    assert outs[0] == outs[1]


def test_case_iii_only_from_unsafe_states(manipulator, rng):
    ex = _explorer(manipulator)
    H, d = manipulator.constraints.H, manipulator.constraints.d
    x = manipulator.x0.copy()
    for _ in range(100):
        dec = ex.decide(x, rng.uniform(-10, 10, 2), rng)
        assert (dec.case_tag is Case.BACK) == (not np.all(H @ x <= d))
        x = manipulator.step(x, dec.input, rng.normal(manipulator.noise.mean, 0.05))
        ex.advance()
