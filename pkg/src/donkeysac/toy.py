"""One-dimensional "stay near zero" control task with a known optimum.

State ``x``; action ``a`` in [-1, 1]; ``x' = x + step_size * a``; reward ``-x'^2``.
Episodes are truncated (not terminated) after ``horizon`` steps.  Moving toward
zero at full speed is optimal: it minimises every ``|x_t|`` simultaneously.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .numcore import SeededRng
from .pipeline import ReplayBuffer, Transition
from .sac import Agent, Batch, SacConfig


@dataclass(frozen=True)
class ToyConfig:
    step_size: float = 0.5
    horizon: int = 20
    start_low: float = -2.0
    start_high: float = 2.0
    eval_starts: tuple[float, ...] = tuple(np.linspace(-2.0, 2.0, 9))


class ToyMdp:
    def __init__(self, cfg: ToyConfig = ToyConfig()):
        self.cfg = cfg
        self.x = 0.0
        self.t = 0

    def reset(self, x0: float) -> np.ndarray:
        self.x = float(x0)
        self.t = 0
        return np.array([self.x])

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        a = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        self.x += self.cfg.step_size * a
        self.t += 1
        return np.array([self.x]), -self.x * self.x, self.t >= self.cfg.horizon


def optimal_action(x: float, cfg: ToyConfig = ToyConfig()) -> float:
    return float(np.clip(-x / cfg.step_size, -1.0, 1.0))


def rollout_return(policy, x0: float, cfg: ToyConfig = ToyConfig()) -> float:
    env = ToyMdp(cfg)
    obs = env.reset(x0)
    total = 0.0
    done = False
    while not done:
        obs, r, done = env.step(policy(obs))
        total += r
    return total


def optimal_mean_return(cfg: ToyConfig = ToyConfig()) -> float:
    return float(np.mean([rollout_return(lambda o: optimal_action(o[0], cfg), x0, cfg) for x0 in cfg.eval_starts]))


def closed_form_optimal_return(x0: float, cfg: ToyConfig = ToyConfig()) -> float:
    """Sum of -max(|x0| - k*step, 0)^2 for k = 1..horizon."""
    k = np.arange(1, cfg.horizon + 1)
    return float(-np.sum(np.maximum(abs(x0) - cfg.step_size * k, 0.0) ** 2))


@dataclass
class ToyResult:
    seed: int
    optimum: float
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    solved_at: int | None = None
    seconds: float = 0.0

    @property
    def solved(self) -> bool:
        return self.solved_at is not None


def train_toy(seed: int, max_steps: int = 20_000, sac_cfg: SacConfig | None = None, cfg: ToyConfig = ToyConfig(),
              warmup: int = 1000, eval_every: int = 1000, tolerance: float = 0.1) -> ToyResult:
    """SAC with one update per environment step; stops at the first evaluation within ``tolerance``."""
    sac_cfg = sac_cfg or SacConfig(batch_size=64, lr=1e-3, alpha=0.05, hidden=64)
    root = SeededRng(seed)
    agent = Agent(sac_cfg, action_dim=1, history_dim=0, rng=root.spawn(0), obs_dim=1, dtype="float64")
    buf = ReplayBuffer((1,), 0, 1, capacity=max_steps)
    starts = root.spawn(1)
    explore = root.spawn(2)
    sampler = root.spawn(3)
    updates = root.spawn(4)
    env = ToyMdp(cfg)
    empty = np.zeros(0)
    result = ToyResult(seed, optimal_mean_return(cfg))
    t0 = time.perf_counter()
    obs = env.reset(starts.uniform(cfg.start_low, cfg.start_high))
    for step in range(1, max_steps + 1):
        if step <= warmup:
            action = explore.uniform(-1.0, 1.0, 1)
        else:
            action = agent.act(obs, empty, explore)
        next_obs, reward, truncated = env.step(action)
        buf.add(Transition(obs, empty, action, reward, next_obs, empty, False))
        obs = env.reset(starts.uniform(cfg.start_low, cfg.start_high)) if truncated else next_obs
        if step > warmup:
            batch = Batch(**buf.sample(sac_cfg.batch_size, sampler))
            agent.train_step(batch, updates.spawn(step))
        if step % eval_every == 0 and step > warmup:
            policy = lambda o: agent.act(o, empty, None, deterministic=True)  # noqa: E731
            ret = float(np.mean([rollout_return(policy, x0, cfg) for x0 in cfg.eval_starts]))
            result.evaluations.append((step, ret))
            if abs(ret - result.optimum) <= tolerance * abs(result.optimum):
                result.solved_at = step
                break
    result.seconds = time.perf_counter() - t0
    return result
