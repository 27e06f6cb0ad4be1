"""Training and deterministic evaluation for the navigation task."""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..config import apply_kv, load_kv
from .agent import DoubleQLearner, TabularDoubleQ, linear_epsilon
from .env import (EnvConfig, GridMap, NavEnv, RewardParams, load_map, open_moves, parse_map,
                  reference_map)

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000
SELECT_SEED_BASE = 2_000_000   # checkpoint selection never sees the evaluation layouts


@dataclass
class TrainConfig:
    steps: int = 200_000
    lr: float = 1e-3
    lr_end: float = 1e-4            # linear learning-rate anneal target
    hidden: int = 64
    target_sync: int = 1000
    replay: int = 50_000
    batch: int = 64
    learn_start: int = 1000
    train_every: int = 1
    updates_per_step: int = 2       # gradient steps per training call (replay ratio)
    ema_decay: float = 0.999        # >0: act with an exponential moving average of the weights
    n_step: int = 1
    eps_start: float = 0.5
    eps_end: float = 0.01
    eps_decay_frac: float = 0.8
    zones: int = 3
    zone_radius: int = 2
    window: int = 5
    max_steps: int = 500
    train_max_steps: int = 100      # shorter truncation while training (0 = max_steps)
    n_mode: str = "total"
    seed: int = 0
    tabular: bool = False
    select_every: int = 2500        # greedy checkpoint check period in steps (0 = off)
    select_from: float = 0.5        # fraction of training before checks start
    select_episodes: int = 100
    safe_explore: bool = False      # exploratory moves avoid cells the mask shows collidable
    map_path: str = ""

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return apply_kv(cls(), load_kv(path))

    def env_config(self) -> EnvConfig:
        return EnvConfig(zones=self.zones, zone_radius=self.zone_radius, window=self.window,
                         rewards=RewardParams(max_steps=self.max_steps), n_mode=self.n_mode)

    def grid(self) -> GridMap:
        return load_map(self.map_path) if self.map_path else reference_map()


@dataclass
class Policy:
    learner: DoubleQLearner | TabularDoubleQ
    grid: GridMap
    env_cfg: EnvConfig
    history: list[dict] = field(default_factory=list)

    @property
    def tabular(self) -> bool:
        return isinstance(self.learner, TabularDoubleQ)

    def features(self, obs):
        return obs.key() if self.tabular else obs.as_vector(self.grid.width, self.grid.height)

    def act(self, obs, epsilon: float = 0.0) -> int:
        return self.learner.act(self.features(obs), epsilon)

    def save(self, path: str | Path) -> None:
        if self.tabular:
            raise NotImplementedError("tabular policies are not persisted")
        meta = {"map": self.grid.to_text(), "env": asdict(self.env_cfg)}
        np.savez(path, meta=json.dumps(meta), **self.learner.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k: z[k] for k in ("W1", "b1", "W2", "b2")}
        env = meta["env"]
        env_cfg = EnvConfig(**{**env, "rewards": RewardParams(**env["rewards"])})
        grid = parse_map(meta["map"])
        n_in, hidden = params["W1"].shape
        learner = DoubleQLearner(n_in, params["W2"].shape[1], hidden=hidden)
        learner.load_state_dict(params)
        return cls(learner, grid, env_cfg)


def train(cfg: TrainConfig, grid: GridMap | None = None, progress_every: int = 0) -> Policy:
    """Double Q-learning with epsilon-greedy exploration; returns the trained policy."""
    grid = grid or cfg.grid()
    env_cfg = cfg.env_config()
    train_cfg = env_cfg
    if cfg.train_max_steps:
        train_cfg = replace(env_cfg, rewards=replace(env_cfg.rewards, max_steps=cfg.train_max_steps))
    env = NavEnv(grid, train_cfg, seed=cfg.seed)
    gamma = env_cfg.rewards.gamma
    n_in = 4 + 2 * cfg.window ** 2
    if cfg.tabular:
        learner = TabularDoubleQ(lr=cfg.lr, gamma=gamma, target_sync=cfg.target_sync, seed=cfg.seed)
    else:
        learner = DoubleQLearner(n_in, 4, cfg.hidden, cfg.lr, gamma, cfg.target_sync, cfg.replay,
                                 cfg.batch, seed=cfg.seed)
    policy = Policy(learner, grid, env_cfg)
    obs = env.reset()
    s = policy.features(obs)
    pending: deque = deque()  # (s, a, r) awaiting their n-step return
    episode, ep_return, outcomes = 0, 0.0, []
    ema = learner.state_dict() if cfg.ema_decay and not cfg.tabular else None
    best, best_score = None, -1.0
    t0 = time.monotonic()
    for step in range(cfg.steps):
        eps = linear_epsilon(step, cfg.steps, cfg.eps_start, cfg.eps_end, cfg.eps_decay_frac)
        if not cfg.tabular:
            learner.opt.lr = cfg.lr + (cfg.lr_end - cfg.lr) * step / cfg.steps
        if learner.rng.random() < eps:
            moves = open_moves(obs) if cfg.safe_explore else range(4)
            a = int(learner.rng.choice(moves))
        else:
            a = learner.act(s)
        res = env.step(a)
        s2 = policy.features(res.obs)
        if cfg.tabular:
            learner.update(s, a, res.reward, s2, res.terminated)
        else:
            # truncation is not a true terminal: keep bootstrapping through it
            pending.append((s, a, res.reward))
            ended = res.terminated or res.truncated
            while pending and (len(pending) >= cfg.n_step or ended):
                ret = sum(r * gamma ** k for k, (_, _, r) in enumerate(pending))
                s0, a0, _ = pending.popleft()
                learner.remember(s0, a0, ret, s2, res.terminated, gamma ** (len(pending) + 1))
                if not ended:
                    break
            if step >= cfg.learn_start and step % cfg.train_every == 0:
                for _ in range(cfg.updates_per_step):
                    learner.train_step()
                if ema is not None:
                    for k, v in learner.online.params.items():
                        ema[k] += (1.0 - cfg.ema_decay) * (v - ema[k])
        ep_return += res.reward
        s, obs = s2, res.obs
        if res.terminated or res.truncated:
            outcomes.append(res.outcome == "GOAL")
            episode += 1
            if progress_every and episode % progress_every == 0:
                rate = float(np.mean(outcomes[-progress_every:]))
                policy.history.append({"step": step + 1, "episode": episode, "epsilon": eps,
                                       "train_success": rate})
                log.info("step %d episode %d eps %.3f success %.2f (%.0f s)", step + 1, episode,
                         eps, rate, time.monotonic() - t0)
            ep_return = 0.0
            obs = env.reset()
            s = policy.features(obs)
        if (cfg.select_every and not cfg.tabular and (step + 1) % cfg.select_every == 0
                and step + 1 >= cfg.select_from * cfg.steps):
            live = learner.online.params
            if ema is not None:
                learner.online.params = ema
            score = evaluate(policy, cfg.select_episodes, seed=SELECT_SEED_BASE).success_rate
            learner.online.params = live
            log.info("step %d greedy check %.2f", step + 1, score)
            if score >= best_score:
                best, best_score = {k: v.copy() for k, v in (ema or live).items()}, score
    if best is None and ema is not None:
        best = ema
    if best is not None:
        learner.load_state_dict(best)
    if best_score >= 0:
        policy.history.append({"step": cfg.steps, "selected_score": best_score})
    return policy


@dataclass(frozen=True)
class EpisodeReport:
    episode: int
    steps: int
    outcome: str
    shaped_return: float


@dataclass
class EvalReport:
    episodes: list[EpisodeReport]

    @property
    def success_rate(self) -> float:
        return sum(e.outcome == "GOAL" for e in self.episodes) / len(self.episodes)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "steps", "outcome", "shaped_return"])
            for e in self.episodes:
                w.writerow([e.episode, e.steps, e.outcome, repr(e.shaped_return)])


def evaluate(policy: Policy, episodes: int = 50, deterministic: bool = True,
             seed: int = EVAL_SEED_BASE, env_cfg: EnvConfig | None = None,
             epsilon: float = 0.05) -> EvalReport:
    """Run ``episodes`` fresh episodes; zone layouts come from seeds seed, seed+1, ..."""
    env = NavEnv(policy.grid, env_cfg or policy.env_cfg)
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(episodes):
        obs = env.reset(seed=seed + ep)
        total, res = 0.0, None
        while True:
            if deterministic:
                a = policy.act(obs)
            else:
                a = int(rng.integers(4)) if rng.random() < epsilon else policy.act(obs)
            res = env.step(a)
            total += res.reward
            obs = res.obs
            if res.terminated or res.truncated:
                break
        out.append(EpisodeReport(ep, env.steps, res.outcome, total))
    return EvalReport(out)


class RandomPolicy:
    """Uniform random actions; the untrained baseline."""

    def __init__(self, grid: GridMap, env_cfg: EnvConfig = EnvConfig(), seed: int = 0) -> None:
        self.grid, self.env_cfg = grid, env_cfg
        self.rng = np.random.default_rng(seed)

    def act(self, obs, epsilon: float = 0.0) -> int:
        return int(self.rng.integers(4))


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
