"""Command line entry point: run experiments, verification suites, plots.

Exit codes: 0 success, 1 usage error, 2 invalid configuration,
3 no conservative input exists, 4 a verification suite failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import envs, rl, verify
from .core import GaussianNoise, UnrecoverableSafetyError, sample_gaussian
from .explorer import Case, Explorer

log = logging.getLogger("safe_exploration")

OUTPUT_ENV_VAR = "SAFE_EXPLORATION_OUTPUT"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {p}" for p in self.problems))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PendulumConfig:
    m: float = 1.0
    l: float = 1.0
    g: float = 9.8
    Ts: float = 0.05
    x0: list = field(default_factory=lambda: [math.pi, 0.0])
    mu_w: list = field(default_factory=lambda: [0.0, 0.5])
    sigma_w_std: list = field(default_factory=lambda: [0.05, 0.1])
    velocity_bound: float = 6.0
    action_bound: float = 2.0
    bounds_as_reported: bool = False


@dataclass
class ManipulatorConfig:
    m11_hat: float = 3.91e-3
    m22_hat: float = 2.39e-3
    d11_hat: float = 9.37e-3
    d22_hat: float = 9.37e-3
    V1: float = 9.01e-2
    V2: float = 1.92e-2
    alpha: float = 6.89e-2
    Ts: float = 0.05
    x0: list = field(default_factory=lambda: [math.pi, math.pi, 0.0, 0.0])
    mu_w: list = field(default_factory=lambda: [0.0, 0.1, -0.1, 0.05])
    sigma_w_std: list = field(default_factory=lambda: [0.01, 0.03, 0.02, 0.01])
    velocity_bound: float = 6.0
    action_bound: float = 10.0


@dataclass
class SafetySection:
    eta: float = 0.95
    xi: float = 0.9998
    tau: int = 2
    sigma_base_scale: float = 1.0
    s_max: float = 1.0
    resolve_back: bool = False
    closed_form: bool = True


@dataclass
class DdpgSection:
    gamma: float = 0.99
    tau: float = 5e-3
    actor_lr: float = 1e-3
    critic_lr: float = 2e-3
    batch_size: int = 64
    buffer_capacity: int = 500_000
    hidden: list = field(default_factory=lambda: [64, 64])
    store_conservative: bool = True


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    method: str = "proposed"
    runs: int = 10
    episodes: int = 100
    steps: int = 100
    seed: int = 0
    workers: int = 1
    safety: SafetySection = field(default_factory=SafetySection)
    ddpg: DdpgSection = field(default_factory=DdpgSection)
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    manipulator: ManipulatorConfig = field(default_factory=ManipulatorConfig)

    def validate(self) -> "ExperimentConfig":
        p = []
        if self.env not in ("pendulum", "manipulator"):
            p.append(f"env: must be 'pendulum' or 'manipulator', got {self.env!r}")
        if self.method not in ("proposed", "baseline"):
            p.append(f"method: must be 'proposed' or 'baseline', got {self.method!r}")
        for name in ("runs", "episodes", "steps", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name}: must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            p.append(f"seed: must be a nonnegative integer, got {self.seed!r}")
        s = self.safety
        if not 0.5 < s.eta < 1:
            p.append(f"safety.eta: must lie in (0.5, 1), got {s.eta!r}")
        if not isinstance(s.tau, int) or isinstance(s.tau, bool) or s.tau < 1:
            p.append(f"safety.tau: must be a positive integer, got {s.tau!r}")
        if isinstance(self.steps, int) and self.steps >= 1 and 0.5 < s.eta < 1:
            lo = s.eta ** (1.0 / self.steps)
            if not lo < s.xi < 1:
                p.append(f"safety.xi: must lie in (eta^(1/steps), 1) = ({lo:.6g}, 1), got {s.xi!r}")
        if not s.sigma_base_scale > 0:
            p.append(f"safety.sigma_base_scale: must be positive, got {s.sigma_base_scale!r}")
        if not s.s_max > 0:
            p.append(f"safety.s_max: must be positive, got {s.s_max!r}")
        d = self.ddpg
        if not 0 <= d.gamma <= 1:
            p.append(f"ddpg.gamma: must lie in [0, 1], got {d.gamma!r}")
        if not 0 <= d.tau <= 1:
            p.append(f"ddpg.tau: must lie in [0, 1], got {d.tau!r}")
        for name in ("actor_lr", "critic_lr"):
            if not getattr(d, name) >= 0:
                p.append(f"ddpg.{name}: must be nonnegative, got {getattr(d, name)!r}")
        for name in ("batch_size", "buffer_capacity"):
            v = getattr(d, name)
            if not isinstance(v, int) or v < 1:
                p.append(f"ddpg.{name}: must be a positive integer, got {v!r}")
        if not d.hidden or any(not isinstance(h, int) or h < 1 for h in d.hidden):
            p.append(f"ddpg.hidden: must be a nonempty list of positive integers, got {d.hidden!r}")
        for sec, n in (("pendulum", 2), ("manipulator", 4)):
            c = getattr(self, sec)
            for name in ("x0", "mu_w", "sigma_w_std"):
                v = getattr(c, name)
                if len(v) != n:
                    p.append(f"{sec}.{name}: must have {n} entries, got {len(v)}")
            if any(v < 0 for v in c.sigma_w_std):
                p.append(f"{sec}.sigma_w_std: must be nonnegative")
            for name in ("velocity_bound", "action_bound", "Ts"):
                if not getattr(c, name) > 0:
                    p.append(f"{sec}.{name}: must be positive, got {getattr(c, name)!r}")
        if p:
            raise ConfigError(p)
        return self


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError([f"{path or 'config'}: expected a mapping, got {type(data).__name__}"])
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError([f"{path}{k}: unknown key" for k in unknown])
    kwargs = {}
    for k, v in data.items():
        default = names[k].default_factory() if names[k].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[k] = _from_dict(type(default), v, f"{path}{k}.")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        data = loaded or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set {item}: expected key.path=value"])
        key, raw = item.split("=", 1)
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = yaml.safe_load(raw)
    return _from_dict(ExperimentConfig, data).validate()


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=False)


def build_environment(cfg: ExperimentConfig) -> envs.Environment:
    s = cfg.safety
    if cfg.env == "pendulum":
        c = cfg.pendulum
        env = envs.make_pendulum(
            envs.PendulumParams(c.m, c.l, c.g, c.Ts), eta=s.eta, xi=s.xi, tau=s.tau, horizon=cfg.steps,
            zeta_max=c.velocity_bound, mu_w=c.mu_w, sigma_w=c.sigma_w_std, x0=c.x0,
            action_bound=c.action_bound, bounds_as_reported=c.bounds_as_reported)
    else:
        c = cfg.manipulator
        params = envs.ManipulatorParams(c.m11_hat, c.m22_hat, c.d11_hat, c.d22_hat, c.V1, c.V2, c.alpha, c.Ts)
        env = envs.make_manipulator(
            params, eta=s.eta, xi=s.xi, tau=s.tau, horizon=cfg.steps, varpi_max=c.velocity_bound,
            mu_w=c.mu_w, sigma_w=c.sigma_w_std, x0=c.x0, action_bound=c.action_bound)
    if not s.closed_form:
        env.stay_input = env.back_sequence = None
    return env


def build_explorer(cfg: ExperimentConfig, env: envs.Environment) -> Explorer:
    """Safety layer for the chosen method.

    The baseline ignores the disturbance: its safety layer sees zero-mean,
    zero-covariance noise, stays with u = 0 and uses the back sequence
    computed for mu_w = 0.
    """
    m = env.model.m
    sigma_base = cfg.safety.sigma_base_scale * np.eye(m)
    if cfg.method == "baseline":
        noise = GaussianNoise.zero(env.model.n)
        stay = lambda x, mu: np.zeros(m)  # noqa: E731
    else:
        noise = env.noise
        stay = env.stay_input
    return Explorer(env.model, env.constraints, env.safety, noise, sigma_base, cfg.safety.s_max,
                    stay, env.back_sequence, cfg.safety.resolve_back)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class RunResult:
    run: int
    safe: np.ndarray  # (episodes, steps): Hx_{k+1} <= d
    costs: np.ndarray  # (episodes,) undiscounted cost sums
    step_rows: list
    case_counts: dict


def run_single(cfg: ExperimentConfig, run: int, seed_seq: np.random.SeedSequence) -> RunResult:
    env = build_environment(cfg)
    agent_seq, explore_seq = seed_seq.spawn(2)
    agent_rng, rng = np.random.default_rng(agent_seq), np.random.default_rng(explore_seq)
    d = cfg.ddpg
    dcfg = rl.DdpgConfig(d.gamma, d.tau, d.actor_lr, d.critic_lr, d.batch_size, d.buffer_capacity, tuple(d.hidden))
    agent = rl.DdpgAgent(env.model.n, env.model.m, env.action_bound, agent_rng, dcfg, env.features, env.feature_dim)
    buf = rl.ReplayBuffer(d.buffer_capacity, env.model.n, env.model.m)
    ex = build_explorer(cfg, env)
    H, dvec = env.constraints.H, env.constraints.d
    safe = np.zeros((cfg.episodes, cfg.steps), dtype=bool)
    costs = np.zeros(cfg.episodes)
    rows = []
    counts = {c.value: 0 for c in Case}
    for e in range(cfg.episodes):
        ex.reset()
        x = env.x0.copy()
        for k in range(cfg.steps):
            dec = ex.decide(x, agent.policy_mean(x), rng)
            u = dec.input
            w = sample_gaussian(env.noise, rng)
            x_next = env.step(x, u, w)
            c = float(env.cost(x, u))
            now_safe = bool(np.all(H @ x <= dvec))
            next_safe = bool(np.all(H @ x_next <= dvec))
            safe[e, k] = next_safe
            costs[e] += c
            counts[dec.case_tag.value] += 1
            rows.append([run, e, k, *map(repr, map(float, x)), *map(repr, map(float, u)), dec.case_tag.value,
                         int(now_safe), int(next_safe), repr(c)])
            if d.store_conservative or dec.case_tag is Case.EXPLORATORY:
                buf.store(x, u, c, x_next)
            if len(buf) >= d.batch_size:
                agent.train_step(buf, agent_rng)
            ex.advance()
            x = x_next
        log.info("run %d episode %d cost %.3f", run, e, costs[e])
    return RunResult(run, safe, costs, rows, counts)


def _run_worker(args):
    cfg, run, seq = args
    return run_single(cfg, run, seq)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list
    report: verify.FrequencyReport
    output_dir: Path | None

    @property
    def safe(self) -> np.ndarray:
        return np.concatenate([r.safe for r in self.runs], axis=0)

    @property
    def costs(self) -> np.ndarray:
        return np.stack([r.costs for r in self.runs])


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    cfg.validate()
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.runs)
    jobs = [(cfg, i, s) for i, s in enumerate(seqs)]
    if cfg.workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_worker, jobs))
    else:
        results = [_run_worker(j) for j in jobs]
    safe = np.concatenate([r.safe for r in results], axis=0)
    report = verify.frequency_report(safe, cfg.safety.eta)
    out = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_outputs(cfg, results, report, out)
    return ExperimentResult(cfg, results, report, out)


def _write_outputs(cfg, results, report, out: Path) -> None:
    (out / "config.yaml").write_text(config_to_yaml(cfg))
    env = build_environment(cfg)
    n, m = env.model.n, env.model.m
    with (out / "steps.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "episode", "step", *[f"x{i}" for i in range(n)], *[f"u{i}" for i in range(m)],
                    "case", "safe", "next_safe", "cost"])
        for r in results:
            w.writerows(r.step_rows)
    with (out / "episodes.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "episode", "cost"])
        for r in results:
            for e, c in enumerate(r.costs):
                w.writerow([r.run, e, repr(float(c))])
    verify.write_frequency_csv(report, out / "frequency.csv")


# ---------------------------------------------------------------------------
# plots


def _read_csv(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return rows


def plot_emit(result_dir, out_dir=None) -> list[Path]:
    """Cost and safety-frequency figures (SVG) from an experiment directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # keep text as text so figures stay small and searchable
    matplotlib.rcParams["svg.fonttype"] = "none"
    matplotlib.rcParams["svg.hashsalt"] = "safe-exploration"

    result_dir = Path(result_dir)
    out_dir = Path(out_dir) if out_dir is not None else result_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ep = _read_csv(result_dir / "episodes.csv")
    fr = _read_csv(result_dir / "frequency.csv")

    runs = sorted({int(r["run"]) for r in ep})
    n_ep = max(int(r["episode"]) for r in ep) + 1
    cost = np.full((len(runs), n_ep), np.nan)
    for r in ep:
        cost[runs.index(int(r["run"])), int(r["episode"])] = float(r["cost"])
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(1, n_ep + 1)
    ax.plot(x, np.nanmean(cost, axis=0), label="mean over runs")
    ax.fill_between(x, np.nanmin(cost, axis=0), np.nanmax(cost, axis=0), alpha=0.25, label="min/max")
    ax.set_xlabel("episode")
    ax.set_ylabel("total cost")
    ax.legend()
    cost_path = out_dir / "cost.svg"
    fig.savefig(cost_path, format="svg", metadata={"Date": None})
    plt.close(fig)

    k = np.array([int(r["step"]) for r in fr])
    f = np.array([float(r["frequency"]) for r in fr])
    lo = np.array([float(r["wilson99_low"]) for r in fr])
    hi = np.array([float(r["wilson99_high"]) for r in fr])
    eta = float(fr[0]["threshold"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(k, f, label="empirical")
    ax.fill_between(k, lo, hi, alpha=0.25, label="99% Wilson")
    ax.axhline(eta, color="k", linestyle="--", label=f"eta = {eta:g}")
    ax.set_xlabel("step k")
    ax.set_ylabel("safety frequency")
    ax.set_ylim(min(lo.min(), eta) - 0.01, 1.001)
    ax.legend()
    freq_path = out_dir / "frequency.svg"
    fig.savefig(freq_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return [cost_path, freq_path]


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_output() -> str:
    return os.environ.get(OUTPUT_ENV_VAR, "results")


def _add_config_args(p) -> None:
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value, e.g. --set safety.eta=0.9")
    p.add_argument("--env", choices=["pendulum", "manipulator"])
    p.add_argument("--method", choices=["proposed", "baseline"])
    p.add_argument("--runs", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safe-exploration", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train agents with the safety layer and write CSV results")
    _add_config_args(run)
    run.add_argument("--output", default=None, help=f"output directory (default ${OUTPUT_ENV_VAR} or ./results)")

    ver = sub.add_parser("verify", help="run a statistical verification suite")
    ver.add_argument("suite", choices=verify.SUITES)
    _add_config_args(ver)
    ver.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples per check")
    ver.add_argument("--output", default=None, help="directory for the suite CSV")

    plot = sub.add_parser("plot", help="render SVG figures from an experiment directory")
    plot.add_argument("results", help="directory holding episodes.csv and frequency.csv")
    plot.add_argument("--output", default=None)

    pc = sub.add_parser("print-config", help="print the effective configuration as YAML")
    _add_config_args(pc)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set)
    for name in ("env", "method", "runs", "episodes", "steps", "seed", "workers"):
        v = getattr(args, name)
        if v is not None:
            overrides.append(f"{name}={v}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            for p in plot_emit(args.results, args.output):
                print(p)
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "print-config":
            sys.stdout.write(config_to_yaml(cfg))
            return EXIT_OK
        if args.command == "run":
            out = Path(args.output or _default_output())
            t0 = time.time()
            res = run_experiment(cfg, out)
            rep = res.report
            print(f"{cfg.env}/{cfg.method}: {cfg.runs} runs x {cfg.episodes} episodes in {time.time() - t0:.1f}s")
            print(f"safety frequency min {rep.min_frequency:.4f} mean {rep.mean_frequency:.4f} "
                  f"(eta {cfg.safety.eta}, n = {rep.n})")
            print(f"results in {out}")
            return EXIT_OK
        if args.command == "verify":
            env = build_environment(cfg)
            rng = np.random.default_rng(cfg.seed)
            res = verify.run_suite(args.suite, env, rng, args.samples)
            print(res.summary())
            if args.output:
                out = Path(args.output)
                out.mkdir(parents=True, exist_ok=True)
                res.write_csv(out / f"{args.suite}.csv")
            return EXIT_OK if res.passed else EXIT_VERIFY
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except UnrecoverableSafetyError as exc:
        print(f"safety layer cannot continue: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
