"""
Experiment orchestration: seeded (agent, seed) cells, exact regret against
the oracle, per-cell CSV / JSONL output and an aggregate JSON summary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import AgentConfig, make_agent
from .env import MdpSpec, SyntheticMdp, oracle_value, synthesize_mdp
from .kernels import KernelSpec
from .planner import GridPolicy, evaluate_policy, evaluate_uniform_policy

__all__ = [
    "EnvConfig",
    "ExperimentConfig",
    "CellResult",
    "build_env",
    "evaluate_policy_value",
    "theoretical_bound",
    "run_cell",
    "run_experiment",
    "write_cell_csv",
    "summarize",
    "CSV_COLUMNS",
    "SCHEMA_VERSION",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "l", "inst_regret", "cum_regret", "d_R", "d_P", "beta_R", "beta_P",
    "gamma_hat_R", "gamma_hat_P", "covered_R", "covered_P", "wall_ms",
)
# regret below this is reported as a discretization artefact
REGRET_TOL = 1e-6
SEED_ENV = "KERNMDP_SEED"
BAYES_CAVEAT = (
    "Bayes regret is averaged over draws of the synthetic generator, which is not the "
    "feature-space Gaussian prior used by the sampler; treat it as a Monte-Carlo approximation."
)


# seeds: one independent stream per purpose, derived from the cell seed
def env_rng(seed):
    return np.random.default_rng([seed, 1])


def noise_rng(seed):
    return np.random.default_rng([seed, 2])


def agent_rng(seed):
    return np.random.default_rng([seed, 3])


@dataclass
class EnvConfig:
    spec: MdpSpec = field(default_factory=MdpSpec)
    kernel_R: KernelSpec = field(default_factory=lambda: KernelSpec.se(0.2))
    kernel_P: KernelSpec = field(default_factory=lambda: KernelSpec.se(0.2))
    B_R: float = 2.0
    B_P: float = 2.0
    sigma_R: float = 0.1
    sigma_P: float = 0.1
    noise: str = "gaussian"
    n_centers: int = 20

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "kernel_R": self.kernel_R.to_dict(),
            "kernel_P": self.kernel_P.to_dict(),
            "B_R": self.B_R,
            "B_P": self.B_P,
            "sigma_R": self.sigma_R,
            "sigma_P": self.sigma_P,
            "noise": self.noise,
            "n_centers": self.n_centers,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "spec" in d:
            d["spec"] = MdpSpec.from_dict(d["spec"])
        for k in ("kernel_R", "kernel_P"):
            if k in d:
                d[k] = KernelSpec.from_dict(d[k])
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Full description of an experiment; serialises to the JSON config file.

    ``episodes`` (tau) overrides ``env.spec.episodes`` so that ``T = tau H``
    is shared by every agent.
    """

    env: EnvConfig = field(default_factory=EnvConfig)
    agents: list[AgentConfig] = field(default_factory=lambda: [AgentConfig("ucrl_nystrom"), AgentConfig("random")])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    episodes: int = 200
    out: str = "runs/default"
    jobs: int = 1
    timing: bool = False
    write_episodes: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        if not self.agents:
            raise ValueError("at least one agent is required")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        labels = [a.label for a in self.agents]
        if len(set(labels)) != len(labels):
            raise ValueError(f"agent labels must be unique, got {labels}")
        spec = self.env.spec
        if spec.episodes != self.episodes:
            d = spec.to_dict()
            d["episodes"] = self.episodes
            self.env.spec = MdpSpec.from_dict(d)

    @property
    def T(self):
        return self.env.spec.T

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "env": self.env.to_dict(),
            "agents": [a.to_dict() for a in self.agents],
            "seeds": list(self.seeds),
            "episodes": self.episodes,
            "out": self.out,
            "jobs": self.jobs,
            "timing": self.timing,
            "write_episodes": self.write_episodes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {schema}")
        if "env" in d:
            d["env"] = EnvConfig.from_dict(d["env"])
        if "agents" in d:
            d["agents"] = [AgentConfig.from_dict(a) for a in d["agents"]]
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_env_seed_override(self):
        """Apply ``KERNMDP_SEED`` (comma-separated ints) if it is set."""
        raw = os.environ.get(SEED_ENV)
        if not raw:
            return self
        seeds = [int(s) for s in raw.replace(" ", "").split(",") if s]
        d = self.to_dict()
        d["seeds"] = seeds
        return ExperimentConfig.from_dict(d)


def build_env(env_cfg: EnvConfig, seed: int) -> SyntheticMdp:
    return synthesize_mdp(
        env_cfg.spec, env_cfg.kernel_R, env_cfg.kernel_P, env_cfg.B_R, env_cfg.B_P,
        env_cfg.n_centers, env_rng(seed), sigma_R=env_cfg.sigma_R, sigma_P=env_cfg.sigma_P,
        noise=env_cfg.noise, seed=seed,
    )


def evaluate_policy_value(env: SyntheticMdp, policy: GridPolicy | None, s1=None) -> float:
    """Exact value of ``policy`` from ``s1`` on the true mean MDP.

    ``policy=None`` stands for the uniformly random policy.
    """
    grid = env.spec.planner_grid()
    s1 = env.initial_state if s1 is None else np.asarray(s1, dtype=float)
    if policy is None:
        values = evaluate_uniform_policy(env.mean_reward, env.mean_transition, env.spec.horizon, grid)
    else:
        values = evaluate_policy(env.mean_reward, env.mean_transition, policy, grid)
    return float(grid.interpolate(values[0], s1[None, :])[0])


def theoretical_bound(B_R, B_P, sigma_R, sigma_P, L, D, H, T, delta, eps_R, eps_P,
                      gamma_R, gamma_P, m: int = 1) -> float:
    """Regret bound for Nystrom Kernel-UCRL with unit hidden constants.

    A reference curve only; the true constants are unknown.
    """
    if T <= 0:
        return 0.0
    lam_r = (1 + eps_R) / (1 - eps_R)
    lam_p = (1 + eps_P) / (1 - eps_P)
    c_r, c_p = lam_r**2 / eps_R**2, lam_p**2 / eps_P**2
    C_R = B_R / math.sqrt(1 - eps_R) + sigma_R / math.sqrt(H) * math.sqrt(
        math.log(1 / delta) + c_r * gamma_R * math.log(T / delta) ** 2
    )
    C_P = B_P / math.sqrt(1 - eps_P) + sigma_P / math.sqrt(m * H) * math.sqrt(
        math.log(1 / delta) + c_p * gamma_P * math.log(m * T / delta) ** 2
    )
    return (
        (L * D + 2 * B_R * H) * math.sqrt(2 * T * math.log(3 / delta))
        + 2 * C_R * math.sqrt(2 * math.e * lam_r * H * gamma_R * T)
        + 2 * L * C_P * math.sqrt(2 * math.e * lam_p * m * H * gamma_P * T)
    )


# cells ------------------------------------------------------------------------


@dataclass
class CellResult:
    agent: str
    seed: int
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)
    ok: bool = True
    error: str | None = None
    v_star: float = float("nan")
    lipschitz_L: float = float("nan")
    negative_regret: list = field(default_factory=list)

    @property
    def stem(self):
        return f"{self.agent}_seed{self.seed}"

    @property
    def inst_regret(self):
        return np.array([r["inst_regret"] for r in self.rows], dtype=float)

    @property
    def cum_regret(self):
        return np.array([r["cum_regret"] for r in self.rows], dtype=float)


def run_cell(cfg: ExperimentConfig, agent_cfg: AgentConfig, seed: int, env: SyntheticMdp | None = None,
             v_star: float | None = None) -> CellResult:
    """Run one (agent, seed) cell; failures are captured, not raised."""
    res = CellResult(agent_cfg.label, int(seed))
    episode = 0
    try:
        env = env or build_env(cfg.env, seed)
        if v_star is None:
            _, pi_star = oracle_value(env)
            v_star = pi_star.value(env.initial_state, 0)
        res.v_star, res.lipschitz_L = float(v_star), float(env.lipschitz_L)
        agent = make_agent(agent_cfg, env, agent_rng(seed))
        rng = noise_rng(seed)
        uniform_value = evaluate_policy_value(env, None) if agent_cfg.mode == "random" else None
        cum = 0.0
        for episode in range(1, cfg.episodes + 1):
            ep = agent.run_episode(episode, rng)
            v = uniform_value if ep.policy is None else evaluate_policy_value(env, ep.policy)
            inst = v_star - v
            if inst < -REGRET_TOL:
                res.negative_regret.append(episode)
            cum += inst
            res.rows.append({
                "l": episode,
                "inst_regret": inst,
                "cum_regret": cum,
                "d_R": ep.d_R,
                "d_P": ep.d_P,
                "beta_R": ep.beta_R,
                "beta_P": ep.beta_P,
                "gamma_hat_R": ep.gamma_hat_R,
                "gamma_hat_P": ep.gamma_hat_P,
                "covered_R": ep.covered_R,
                "covered_P": ep.covered_P,
                "wall_ms": ep.wall_ms if cfg.timing else None,
            })
            rec = ep.to_record()
            rec.update(agent=res.agent, seed=res.seed, inst_regret=inst, cum_regret=cum, v_star=v_star)
            if not cfg.timing:
                rec["wall_ms"] = None
            res.records.append(rec)
    except Exception as exc:  # recorded in the summary, other cells continue
        res.ok = False
        res.error = f"episode {episode}: {type(exc).__name__}: {exc}"
        log.error("cell %s failed: %s\n%s", res.stem, res.error, traceback.format_exc())
    return res


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def cell_csv_text(res: CellResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in res.rows:
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_cell_csv(res: CellResult, out_dir) -> Path:
    path = Path(out_dir) / "cells" / f"{res.stem}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cell_csv_text(res), newline="")
    return path


def write_cell_jsonl(res: CellResult, out_dir) -> Path:
    path = Path(out_dir) / "episodes" / f"{res.stem}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for rec in res.records:
            fh.write(json.dumps(rec) + "\n")
    return path


# summary --------------------------------------------------------------------


def sublinearity_ratio(inst, early: int = 20) -> float:
    """``(R(T)/T at the last episode) / (R/T after `early` episodes)``."""
    inst = np.asarray(inst, dtype=float)
    if len(inst) < early or early < 1:
        return float("nan")
    head = inst[:early].sum() / early
    tail = inst.sum() / len(inst)
    return float(tail / head) if head > 0 else float("inf")


def _json_safe(obj):
    """Replace non-finite floats (ratios with a zero head, empty stats) by null."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _mean_sd(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        return None, None
    return float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0


def summarize(cfg: ExperimentConfig, results: list[CellResult]) -> dict:
    spec = cfg.env.spec
    agents = {}
    for a in cfg.agents:
        cells = [r for r in results if r.agent == a.label]
        good = [r for r in cells if r.ok]
        final = [float(r.cum_regret[-1]) for r in good if r.rows]
        ratios = [sublinearity_ratio(r.inst_regret) for r in good]
        entry = {
            "mode": a.mode,
            "cells": {
                str(r.seed): {"ok": r.ok, "error": r.error, "negative_regret_episodes": r.negative_regret}
                for r in cells
            },
            "final_cum_regret": dict(zip([str(r.seed) for r in good], final)),
            "sublinearity_ratio": dict(zip([str(r.seed) for r in good], ratios)),
        }
        entry["final_cum_regret_mean"], entry["final_cum_regret_sd"] = _mean_sd(final)
        if good:
            mean_inst = np.mean([r.inst_regret for r in good], axis=0)
            entry["mean_curve_sublinearity_ratio"] = sublinearity_ratio(mean_inst)
        if a.mode.startswith("ucrl"):
            flags_r = [row["covered_R"] for r in good for row in r.rows]
            flags_p = [row["covered_P"] for r in good for row in r.rows]
            if flags_r:
                entry["coverage_rate_R"] = float(np.mean(flags_r))
                entry["coverage_rate_P"] = float(np.mean(flags_p))
                entry["runs_fully_covered"] = int(
                    sum(all(row["covered_R"] and row["covered_P"] for row in r.rows) for r in good)
                )
            bounds = {}
            for r in good:
                last = r.rows[-1]
                g_r, g_p = last["gamma_hat_R"], last["gamma_hat_P"]
                if g_r is None or math.isnan(g_r):
                    continue
                bounds[str(r.seed)] = theoretical_bound(
                    cfg.env.B_R, cfg.env.B_P, cfg.env.sigma_R, cfg.env.sigma_P, r.lipschitz_L, spec.diameter,
                    spec.horizon, spec.T, a.delta, a.eps_R, a.eps_P, g_r, g_p, spec.state_dim,
                )
            entry["reference_bound"] = bounds
        if a.mode == "psrl":
            entry["caveat"] = BAYES_CAVEAT
        agents[a.label] = entry
    return _json_safe({
        "schema": SCHEMA_VERSION,
        "episodes": cfg.episodes,
        "horizon": spec.horizon,
        "T": spec.T,
        "seeds": list(cfg.seeds),
        "all_ok": all(r.ok for r in results),
        "v_star": {str(r.seed): r.v_star for r in results if r.agent == cfg.agents[0].label},
        "agents": agents,
    })


# runner -----------------------------------------------------------------------


def _seed_task(cfg_dict, seed):
    """All agents for one seed, sharing the env and oracle (worker entry)."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        env = build_env(cfg.env, seed)
        _, pi_star = oracle_value(env)
        v_star = pi_star.value(env.initial_state, 0)
    except Exception as exc:
        err = f"env synthesis: {type(exc).__name__}: {exc}"
        return [CellResult(a.label, seed, ok=False, error=err) for a in cfg.agents], None
    return [run_cell(cfg, a, seed, env, v_star) for a in cfg.agents], env.to_dict()


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int | None = None) -> list[CellResult]:
    """Run every (agent, seed) cell and write CSV, JSONL and summary files.

    Output names depend only on agent label and seed, so completion order
    never changes what is written.
    """
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or cfg.jobs
    payload = cfg.to_dict()
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_seed_task, [payload] * len(cfg.seeds), cfg.seeds))
    else:
        outputs = [_seed_task(payload, s) for s in cfg.seeds]

    results = []
    for seed, (cells, env_dict) in zip(cfg.seeds, outputs):
        if env_dict is not None:
            (out / "envs").mkdir(exist_ok=True)
            (out / "envs" / f"env_seed{seed}.json").write_text(json.dumps(env_dict, indent=1) + "\n")
        for res in cells:
            write_cell_csv(res, out)
            if cfg.write_episodes:
                write_cell_jsonl(res, out)
            results.append(res)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "summary.json").write_text(json.dumps(summarize(cfg, results), indent=2, allow_nan=False) + "\n")
    return results
