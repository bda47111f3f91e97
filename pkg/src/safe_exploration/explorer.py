"""Per-step switching between exploratory and conservative inputs."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import chance, conservative
from .core import (
    ConstraintSet,
    DomainError,
    GaussianNoise,
    LinearModel,
    SafetyConfig,
    UnrecoverableSafetyError,
    is_safe,
    sample_gaussian,
)

log = logging.getLogger(__name__)


class Case(str, enum.Enum):
    EXPLORATORY = "exploratory"  # case (i)
    STAY = "stay"  # case (ii)
    BACK = "back"  # case (iii)


@dataclass(frozen=True)
class Decision:
    case_tag: Case
    input: np.ndarray
    sigma_used: np.ndarray
    epsilon: np.ndarray
    back_index: int | None = None
    k: int = 0


@dataclass
class Explorer:
    """Stateful decision procedure for one episode.

    `stay_input(x, mu_w)` and `back_sequence(x, mu_w)` are optional closed-form
    conservative inputs; they take precedence over the LP when given. The
    noise passed here is the disturbance model used by the safety layer.
    """

    model: LinearModel
    constraints: ConstraintSet
    safety: SafetyConfig
    noise: GaussianNoise
    sigma_base: np.ndarray | None = None
    s_max: float = 1.0
    stay_input: Callable | None = None
    back_sequence: Callable | None = None
    resolve_back: bool = False
    k: int = 0
    pending_back: np.ndarray | None = field(default=None, repr=False)
    cursor: int = 0
    last: Decision | None = field(default=None, repr=False)

    def __post_init__(self):
        self.constraints.check_actuated(self.model)
        if self.sigma_base is None:
            self.sigma_base = np.eye(self.model.m)
        self.sigma_base = np.atleast_2d(np.asarray(self.sigma_base, dtype=float))

    def reset(self) -> None:
        self.k = 0
        self.pending_back = None
        self.cursor = 0
        self.last = None

    def _stay(self, x) -> np.ndarray:
        if self.stay_input is not None:
            return np.atleast_1d(np.asarray(self.stay_input(x, self.noise.mean), dtype=float))
        q = chance.q_stay(self.safety, self.k)
        u = conservative.solve_stay_input(self.model, self.constraints, self.safety, self.noise, x, q)
        if u is None:
            log.error("no stay input exists at k=%d, x=%s", self.k, x)
            raise UnrecoverableSafetyError(f"no stay input exists at k={self.k}, x={np.asarray(x).tolist()}")
        return u

    def _back(self, x) -> np.ndarray:
        if self.back_sequence is not None:
            U = np.asarray(self.back_sequence(x, self.noise.mean), dtype=float)
        else:
            U = conservative.solve_back_sequence(self.model, self.constraints, self.safety, self.noise, x,
                                                 self.safety.xi)
            if U is None:
                log.error("no back sequence exists at k=%d, x=%s", self.k, x)
                raise UnrecoverableSafetyError(
                    f"no back sequence exists at k={self.k}, x={np.asarray(x).tolist()}")
        return U.reshape(self.safety.tau, self.model.m)

    def decide(self, x, policy_mean, rng: np.random.Generator) -> Decision:
        if self.k >= self.safety.horizon:
            raise DomainError(f"episode horizon {self.safety.horizon} reached")
        x = np.asarray(x, dtype=float)
        policy_mean = np.atleast_1d(np.asarray(policy_mean, dtype=float))
        m = self.model.m
        zero_cov = np.zeros((m, m))

        if is_safe(self.constraints, x):
            self.pending_back = None
            self.cursor = 0
            args = (self.model, self.constraints, self.safety, self.noise, x, policy_mean, self.k)
            if chance.exploration_feasible(*args):
                sigma = chance.max_exploration_cov(*args, self.sigma_base, self.s_max)
                eps = sample_gaussian(GaussianNoise(np.zeros(m), sigma), rng)
                d = Decision(Case.EXPLORATORY, policy_mean + eps, sigma, eps, None, self.k)
            else:
                d = Decision(Case.STAY, self._stay(x), zero_cov, np.zeros(m), None, self.k)
        else:
            if self.pending_back is None or self.cursor >= self.safety.tau or self.resolve_back:
                self.pending_back = self._back(x)
                self.cursor = 0
            d = Decision(Case.BACK, self.pending_back[self.cursor].copy(), zero_cov, np.zeros(m),
                         self.cursor, self.k)
        self.last = d
        return d

    def advance(self) -> None:
        self.k += 1
        if self.last is not None and self.last.case_tag is Case.BACK:
            self.cursor += 1
        elif self.last is not None:
            self.pending_back = None
            self.cursor = 0
        self.last = None
