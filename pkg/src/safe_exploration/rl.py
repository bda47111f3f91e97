"""Minimal numpy DDPG: MLPs with manual backprop, Adam, replay buffer, soft targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "safe-exploration-checkpoint 1"


class Mlp:
    """Fully connected network, ReLU hidden layers, linear or scaled-tanh output.

    Weights are stored (fan_in, fan_out) and inputs are row batches (B, fan_in).
    """

    def __init__(self, sizes, rng: np.random.Generator, out_activation: str = "linear",
                 out_scale: float = 1.0, final_init: float | None = None):
        if out_activation not in ("linear", "tanh"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.sizes = list(sizes)
        self.out_activation = out_activation
        self.out_scale = float(out_scale)
        self.params: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = final_init if (i == n_layers - 1 and final_init is not None) else 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-lim, lim, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.sizes = list(self.sizes)
        new.out_activation = self.out_activation
        new.out_scale = self.out_scale
        new.params = [p.copy() for p in self.params]
        return new

    def forward(self, X: np.ndarray):
        """Return (output, cache) for a (B, fan_in) batch."""
        acts = [X]
        h = X
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.out_activation == "tanh":
                h = self.out_scale * np.tanh(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, acts, dout: np.ndarray):
        """Gradients of sum(dout * output) w.r.t. parameters and input."""
        grads = [None] * len(self.params)
        last = self.n_layers - 1
        out = acts[-1]
        if self.out_activation == "tanh":
            dz = dout * (self.out_scale - out**2 / self.out_scale)
        else:
            dz = dout
        for i in range(last, -1, -1):
            h_in = acts[i]
            grads[2 * i] = h_in.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dh = dz @ self.params[2 * i].T
            if i > 0:
                dz = dh * (acts[i] > 0.0)
        return grads, dh


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= corr * m / (np.sqrt(v) + self.eps)


class ReplayBuffer:
    """Ring buffer of (x, u, c, x') transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, state_dim))
        self.u = np.zeros((self.capacity, action_dim))
        self.c = np.zeros(self.capacity)
        self.x_next = np.zeros((self.capacity, state_dim))
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def store(self, x, u, c, x_next) -> None:
        i = self._head
        self.x[i], self.u[i], self.c[i], self.x_next[i] = x, u, c, x_next
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} transitions from a buffer of {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.x[idx], self.u[idx], self.c[idx], self.x_next[idx]


@dataclass
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    actor_lr: float = 1e-3
    critic_lr: float = 2e-3
    batch_size: int = 64
    buffer_capacity: int = 500_000
    hidden: tuple = (64, 64)


def _identity(x):
    return x


class DdpgAgent:
    """Deterministic actor, Q critic, and their slowly tracking targets.

    `features` maps raw states (B, n) to network inputs; training uses the
    reward r = -cost.
    """

    def __init__(self, state_dim: int, action_dim: int, action_bound: float, rng: np.random.Generator,
                 config: DdpgConfig | None = None, features: Callable | None = None, feature_dim: int | None = None):
        self.cfg = config or DdpgConfig()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_bound = float(action_bound)
        self.features = features or _identity
        fdim = feature_dim if feature_dim is not None else state_dim
        hidden = list(self.cfg.hidden)
        self.actor = Mlp([fdim, *hidden, action_dim], rng, "tanh", self.action_bound, final_init=3e-3)
        self.critic = Mlp([fdim + action_dim, *hidden, 1], rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, self.cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, self.cfg.critic_lr)

    def policy_mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.actor(self.features(x[None, :]))[0]

    # losses with gradients, kept as separate methods for gradient checking

    def critic_loss_and_grads(self, batch):
        x, u, c, x_next = batch
        f_next = self.features(x_next)
        q_next = self.target_critic(np.hstack([f_next, self.target_actor(f_next)]))[:, 0]
        y = -c + self.cfg.gamma * q_next
        q, acts = self.critic.forward(np.hstack([self.features(x), u]))
        err = q[:, 0] - y
        loss = float(np.mean(err**2))
        grads, _ = self.critic.backward(acts, (2.0 / err.size) * err[:, None])
        return loss, grads

    def actor_objective_and_grads(self, batch):
        """Mean Q(x, mu(x)) and the gradient of its negative (the minimised loss)."""
        x = batch[0]
        f = self.features(x)
        a, a_acts = self.actor.forward(f)
        q, c_acts = self.critic.forward(np.hstack([f, a]))
        objective = float(q.mean())
        _, d_in = self.critic.backward(c_acts, np.full_like(q, -1.0 / q.shape[0]))
        grads, _ = self.actor.backward(a_acts, d_in[:, -self.action_dim:])
        return objective, grads

    def soft_update(self) -> None:
        t = self.cfg.tau
        for net, tgt in ((self.actor, self.target_actor), (self.critic, self.target_critic)):
            for p, pt in zip(net.params, tgt.params):
                pt *= 1.0 - t
                pt += t * p

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator):
        """One critic and one actor update on a sampled minibatch, then the soft target update.

        Returns (critic loss, actor objective), or None when the buffer is too small.
        """
        if len(buffer) < self.cfg.batch_size:
            log.warning("replay buffer holds %d < %d transitions; skipping update", len(buffer), self.cfg.batch_size)
            return None
        batch = buffer.sample(self.cfg.batch_size, rng)
        loss, cg = self.critic_loss_and_grads(batch)
        self.critic_opt.step(self.critic.params, cg)
        objective, ag = self.actor_objective_and_grads(batch)
        self.actor_opt.step(self.actor.params, ag)
        self.soft_update()
        return loss, objective

    # checkpoints

    def _named_tensors(self):
        for tag, net in (("actor", self.actor), ("critic", self.critic),
                         ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            for i, p in enumerate(net.params):
                yield f"{tag}.{i}", p

    def save(self, path) -> None:
        """Text checkpoint: magic line, then per tensor a header `name ndim d0 d1 ...` and one value line."""
        lines = [CHECKPOINT_MAGIC]
        for name, p in self._named_tensors():
            lines.append(" ".join([name, str(p.ndim), *map(str, p.shape)]))
            lines.append(" ".join(repr(float(v)) for v in p.ravel()))
        Path(path).write_text("\n".join(lines) + "\n")

    def load(self, path) -> None:
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        tensors = dict(self._named_tensors())
        it = iter(lines[1:])
        for header in it:
            name, ndim, *dims = header.split()
            shape = tuple(int(d) for d in dims[: int(ndim)])
            values = np.array([float(v) for v in next(it).split()], dtype=float)
            if name not in tensors or tensors[name].shape != shape:
                raise ValueError(f"checkpoint tensor {name}{shape} does not match the agent")
            tensors[name][...] = values.reshape(shape)


def episode_return(costs, gamma: float):
    """(discounted sum gamma^k c_{k+1}, undiscounted sum)."""
    costs = np.asarray(costs, dtype=float)
    disc = gamma ** np.arange(costs.size)
    return float(disc @ costs), float(costs.sum())


def finite_difference_grads(fn: Callable[[], float], params, h: float = 1e-5, refine: int = 3):
    """Central differences of a scalar fn() with respect to each array in params (perturbed in place).

    ReLU networks are only piecewise smooth. When the estimates at steps h and
    h/10 disagree, the interval straddles a kink, so the step is shrunk (at
    most `refine` times) until two successive estimates agree.
    """

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        return (up - down) / (2.0 * step)

    # rounding error of a central difference is about eps * |f| / step
    noise = 100.0 * np.finfo(float).eps * max(abs(fn()), 1.0)
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            step = h
            est = central(flat, i, step)
            for _ in range(refine):
                finer = central(flat, i, step / 10.0)
                if abs(finer - est) <= 1e-6 * (abs(finer) + abs(est)) + noise / (step / 10.0):
                    break
                step /= 10.0
                est = finer
            gflat[i] = est
        out.append(g)
    return out


def gradient_relative_errors(analytic, numeric) -> list[float]:
    """Per-array ||a - n|| / max(||a||, ||n||, 1e-12)."""
    errs = []
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errs.append(float(np.linalg.norm(a - n) / scale))
    return errs
