"""Soft actor-critic with an optional VAE state encoder.

Twin soft-Q critics with polyak-averaged targets, a tanh-squashed Gaussian
actor, and a joint critic+VAE optimizer whose encoder receives gradients from
the critic and reconstruction losses but never from the actor loss.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import vae as vae_mod
from .numcore import Adam, SeededRng, Tape, Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class AgentMode(str, enum.Enum):
    FIXED_PRETRAINED = "fixed_pretrained"
    INIT_PRETRAINED = "init_pretrained"
    SCRATCH = "scratch"

    @property
    def needs_pretrained(self) -> bool:
        return self is not AgentMode.SCRATCH

    @property
    def trains_vae(self) -> bool:
        return self is not AgentMode.FIXED_PRETRAINED


@dataclass
class SacConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    batch_size: int = 128
    updates_per_episode: int = 600
    lr: float = 1e-4
    hidden: int = 64
    single_critic: bool = False

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.updates_per_episode < 0 or self.hidden < 1:
            raise ValueError("batch_size, updates_per_episode and hidden must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self


class Mlp:
    """Fully connected ReLU network."""

    def __init__(self, sizes: list[int], rng: SeededRng, dtype="float32", prefix: str = ""):
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = nc.uniform_init(rng, (n_out, n_in), n_in, dtype, name=f"{prefix}fc{i}.w")
            b = nc.uniform_init(rng, (n_out,), n_in, dtype, name=f"{prefix}fc{i}.b")
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = nc.linear(x, w, b)
            if i < len(self.layers) - 1:
                x = nc.relu(x)
        return x

    def params(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}fc{i}.w"] = w.data
            out[f"{prefix}fc{i}.b"] = b.data
        return out

    def load_arrays(self, arrays, prefix: str):
        for i, (w, b) in enumerate(self.layers):
            w.data[...] = arrays[f"{prefix}fc{i}.w"]
            b.data[...] = arrays[f"{prefix}fc{i}.b"]

    def copy_from(self, other: "Mlp"):
        for (w, b), (ow, ob) in zip(self.layers, other.layers):
            w.data[...] = ow.data
            b.data[...] = ob.data

    def frozen_copy(self) -> "Mlp":
        clone = object.__new__(Mlp)
        clone.layers = [(Tensor(w.data.copy(), name=w.name), Tensor(b.data.copy(), name=b.name))
                        for w, b in self.layers]
        return clone


class Policy:
    def __init__(self, state_dim: int, action_dim: int, hidden: int, rng: SeededRng, dtype="float32"):
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.net = Mlp([state_dim, hidden, hidden, 2 * action_dim], rng, dtype, prefix="")

    def __call__(self, state: Tensor) -> tuple[Tensor, Tensor]:
        if state.shape[-1] != self.state_dim:
            raise ValueError(f"policy expects state length {self.state_dim}, got {state.shape[-1]}")
        out = self.net(state)
        a = self.action_dim
        mean = out[..., :a]
        log_std = nc.clamp(out[..., a:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def params(self) -> list[Tensor]:
        return self.net.params()


class Critics:
    """Q1/Q2 with frozen target copies (``single_critic`` keeps only Q1)."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int, rng: SeededRng, dtype="float32",
                 single: bool = False):
        sizes = [state_dim + action_dim, hidden, hidden, 1]
        self.single = single
        self.q = [Mlp(sizes, rng, dtype)]
        if not single:
            self.q.append(Mlp(sizes, rng, dtype))
        self.targets = [q.frozen_copy() for q in self.q]

    def params(self) -> list[Tensor]:
        return [p for q in self.q for p in q.params()]

    def target_params(self) -> list[Tensor]:
        return [p for q in self.targets for p in q.params()]

    def values(self, state: Tensor, action: Tensor, target: bool = False) -> list[Tensor]:
        nets = self.targets if target else self.q
        sa = nc.concat([state, action], axis=-1)
        return [nc.reshape(net(sa), sa.shape[:-1]) for net in nets]

    def min_value(self, state: Tensor, action: Tensor, target: bool = False) -> Tensor:
        qs = self.values(state, action, target)
        out = qs[0]
        for q in qs[1:]:
            out = nc.minimum(out, q)
        return out


@dataclass
class ActionSample:
    pre_tanh: Tensor
    action: Tensor
    log_prob: Tensor


def squashed_gaussian(mean: Tensor, log_std: Tensor, noise) -> ActionSample:
    """Reparameterised draw ``tanh(mean + exp(log_std) * noise)`` with its log-density."""
    noise = np.asarray(noise, dtype=mean.dtype)
    u = mean + nc.exp(log_std) * noise
    a = nc.tanh(u)
    log_normal = -0.5 * noise * noise - HALF_LOG_2PI - log_std
    correction = nc.log(1.0 - nc.square(a) + TANH_EPS)
    log_prob = nc.tsum(log_normal - correction, axis=-1)
    return ActionSample(u, a, log_prob)


def log_prob_of_pre_tanh(mean: np.ndarray, log_std: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Log-density the sampler assigns to ``tanh(u)`` (plain numpy, for diagnostics and checks)."""
    std = np.exp(log_std)
    z = (u - mean) / std
    return np.sum(-0.5 * z * z - HALF_LOG_2PI - log_std - np.log(1.0 - np.tanh(u) ** 2 + TANH_EPS), axis=-1)


def sample_action(state: Tensor, policy: Policy, rng: SeededRng | None, deterministic: bool = False) -> ActionSample:
    mean, log_std = policy(state)
    noise = np.zeros(mean.shape) if deterministic else rng.normal(mean.shape)
    return squashed_gaussian(mean, log_std, noise)


def soft_value(next_state: Tensor, policy: Policy, critics: Critics, cfg: SacConfig, rng: SeededRng) -> np.ndarray:
    """One-sample Monte Carlo estimate of ``E[min Q_target(s', a') - alpha log pi(a'|s')]``."""
    with nc.no_grad():
        sample = sample_action(next_state, policy, rng)
        q = critics.min_value(next_state, sample.action, target=True)
        return q.data - cfg.alpha * sample.log_prob.data


def bellman_targets(rewards: np.ndarray, terminals: np.ndarray, next_values: np.ndarray, gamma: float) -> np.ndarray:
    return rewards + gamma * (1.0 - terminals.astype(rewards.dtype)) * next_values


def critic_loss(state: Tensor, action, targets: np.ndarray, critics: Critics) -> Tensor:
    """Soft Bellman residual averaged over the batch and over both critics."""
    if state.shape[0] == 0:
        raise ValueError("critic_loss needs a non-empty batch")
    action = action if isinstance(action, Tensor) else Tensor(np.asarray(action, dtype=state.dtype))
    qs = critics.values(state, action)
    y = np.asarray(targets, dtype=state.dtype)
    total = None
    for q in qs:
        term = nc.mean(nc.square(q - y))
        total = term if total is None else total + term
    return total * (1.0 / len(qs))


def actor_loss(state: Tensor, policy: Policy, critics: Critics, cfg: SacConfig, rng: SeededRng) -> Tensor:
    """``mean(alpha * log pi(a|s) - min Q(s, a))`` with ``a`` reparameterised from pi."""
    if state.shape[0] == 0:
        raise ValueError("actor_loss needs a non-empty batch")
    sample = sample_action(state, policy, rng)
    q = critics.min_value(state, sample.action)
    return nc.mean(sample.log_prob * cfg.alpha - q)


def soft_update(critics: Critics, tau: float):
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for q, tq in zip(critics.q, critics.targets):
        for (w, b), (tw, tb) in zip(q.layers, tq.layers):
            for src, dst in ((w, tw), (b, tb)):
                if tau == 1.0:
                    dst.data[...] = src.data
                else:
                    dst.data *= (1.0 - tau)
                    dst.data += tau * src.data


@dataclass
class Batch:
    """Column-wise transitions; ``obs`` is images ``[B,1,H,W]`` or state vectors ``[B,D]``."""

    obs: np.ndarray
    history: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_history: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.reward)


@dataclass
class LossReport:
    critic: float
    actor: float
    vae: float | None = None
    extras: dict = field(default_factory=dict)


class Agent:
    """Actor, critics and (optionally) the VAE encoder for image observations."""

    def __init__(self, cfg: SacConfig, action_dim: int, history_dim: int, rng: SeededRng,
                 vae_cfg: vae_mod.VaeConfig | None = None, obs_dim: int | None = None,
                 mode: AgentMode = AgentMode.SCRATCH, dtype="float32"):
        cfg.validate()
        if (vae_cfg is None) == (obs_dim is None):
            raise ValueError("pass exactly one of vae_cfg (image observations) or obs_dim (vector observations)")
        self.cfg = cfg
        self.mode = AgentMode(mode)
        self.dtype = np.dtype(dtype)
        self.action_dim = action_dim
        self.history_dim = history_dim
        # independent init streams so that the VAE init never shifts actor/critic init
        self.vae = vae_mod.VaeParams(vae_cfg, rng.spawn(0), dtype) if vae_cfg is not None else None
        embed_dim = vae_cfg.latent_dim if vae_cfg is not None else obs_dim
        self.state_dim = embed_dim + history_dim
        self.policy = Policy(self.state_dim, action_dim, cfg.hidden, rng.spawn(1), dtype)
        self.critics = Critics(self.state_dim, action_dim, cfg.hidden, rng.spawn(2), dtype, cfg.single_critic)
        self.build_optimizers()

    def build_optimizers(self):
        critic_params = self.critics.params()
        if self.vae is not None and self.mode.trains_vae:
            critic_params = critic_params + self.vae.all_params()
        self.critic_opt = Adam(critic_params, lr=self.cfg.lr)
        self.actor_opt = Adam(self.policy.params(), lr=self.cfg.lr)

    # ----------------------------------------------------------- state

    def embed(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=self.dtype)
        if self.vae is None:
            return obs
        return vae_mod.embed(obs, self.vae)

    def state(self, obs: np.ndarray, history: np.ndarray) -> np.ndarray:
        return np.concatenate([self.embed(obs), np.asarray(history, dtype=self.dtype)], axis=-1)

    def act(self, obs: np.ndarray, history: np.ndarray, rng: SeededRng | None,
            deterministic: bool = False) -> np.ndarray:
        s = self.state(obs[None], np.asarray(history)[None])
        with nc.no_grad():
            sample = sample_action(Tensor(s), self.policy, rng, deterministic)
        return sample.action.data[0].astype(np.float64)

    # ----------------------------------------------------------- learning

    def critic_objective(self, batch: Batch, rng: SeededRng) -> tuple[Tensor, Tensor, Tensor | None, np.ndarray]:
        """Record J_Q (+ J_VAE when the VAE trains) on the active tape.

        Returns (total, J_Q, J_VAE or None, detached embedding of ``batch.obs``).
        """
        hist = Tensor(batch.history.astype(self.dtype, copy=False))
        next_state = Tensor(self.state(batch.next_obs, batch.next_history))
        y = bellman_targets(batch.reward.astype(self.dtype), batch.terminal,
                            soft_value(next_state, self.policy, self.critics, self.cfg, rng.spawn(0)),
                            self.cfg.gamma)
        j_vae = None
        if self.vae is None:
            emb = Tensor(batch.obs.astype(self.dtype, copy=False))
        elif self.mode.trains_vae:
            images = Tensor(batch.obs.astype(self.dtype, copy=False))
            dist = vae_mod.encode(images, self.vae)
            j_vae, _, _ = vae_mod.vae_loss(images, self.vae, rng.spawn(1), dist=dist)
            emb = dist.mu
        else:
            emb = Tensor(self.embed(batch.obs))
        state = nc.concat([emb, hist], axis=-1)
        j_q = critic_loss(state, batch.action, y, self.critics)
        total = j_q if j_vae is None else j_q + j_vae
        return total, j_q, j_vae, emb.data

    def actor_objective(self, batch: Batch, rng: SeededRng, embedding: np.ndarray | None = None) -> Tensor:
        """Record J_pi on the active tape; the encoder output enters as a constant."""
        if embedding is None:
            embedding = self.embed(batch.obs)
        state = Tensor(np.concatenate([embedding, batch.history.astype(self.dtype, copy=False)], axis=-1))
        return actor_loss(state, self.policy, self.critics, self.cfg, rng)

    def train_step(self, batch: Batch, rng: SeededRng) -> LossReport:
        with Tape() as tape:
            total, j_q, j_vae, emb = self.critic_objective(batch, rng.spawn(0))
        grads = nc.backward(total, tape)
        self.critic_opt.step(grads)

        with Tape() as tape:
            j_pi = self.actor_objective(batch, rng.spawn(1), embedding=emb)
        grads = nc.backward(j_pi, tape)
        self.actor_opt.step(grads)

        soft_update(self.critics, self.cfg.tau)
        return LossReport(critic=float(j_q.data), actor=float(j_pi.data),
                          vae=None if j_vae is None else float(j_vae.data))

    # ----------------------------------------------------------- persistence

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        out.update(self.policy.net.arrays("actor/"))
        for i, (q, tq) in enumerate(zip(self.critics.q, self.critics.targets), start=1):
            out.update(q.arrays(f"critic{i}/"))
            out.update(tq.arrays(f"target{i}/"))
        if self.vae is not None:
            out.update(self.vae.arrays("vae/"))
        out.update(self.critic_opt.state_arrays("opt/critic/"))
        out.update(self.actor_opt.state_arrays("opt/actor/"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], critic_t: int = 0, actor_t: int = 0,
                    with_optimizers: bool = True):
        self.policy.net.load_arrays(arrays, "actor/")
        for i, (q, tq) in enumerate(zip(self.critics.q, self.critics.targets), start=1):
            q.load_arrays(arrays, f"critic{i}/")
            tq.load_arrays(arrays, f"target{i}/")
        if self.vae is not None:
            self.vae.load_arrays(arrays, "vae/")
        if with_optimizers:
            self.critic_opt.load_state_arrays(arrays, "opt/critic/", critic_t)
            self.actor_opt.load_state_arrays(arrays, "opt/actor/", actor_t)
