"""Episodic training driver, checkpoints, evaluation and VAE pretraining."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .. import numcore as nc
from .. import vae as vae_mod
from ..numcore import SeededRng
from ..pipeline import ControlHistory, ReplayBuffer, Transition, preprocess
from ..remote import OfftrackDetectorConfig, RemoteEnv
from ..sac import Agent, Batch
from ..simenv import CenterlineFollower, DonkeySim, SimConfig
from .config import RunConfig

log = logging.getLogger(__name__)

PARAMS_FILE = "params.ckpt"
BUFFER_FILE = "buffer.ckpt"
STATE_FILE = "state.json"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"

# child-stream keys of the per-run root rng
_INIT, _ACT, _SAMPLE, _UPDATE = 0, 2, 3, 4


class TrainingDivergedError(RuntimeError):
    pass


class DatasetExhaustedError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    episode: int
    steps: int
    episode_return: float
    length: int
    j_q: float
    j_pi: float
    j_vae: float
    wall_seconds: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = []
        for r in reader:
            rows.append(MetricsRow(int(r[0]), int(r[1]), float(r[2]), int(r[3]), float(r[4]), float(r[5]),
                                   float(r[6]), float(r[7])))
    return rows


def _format_row(row: MetricsRow) -> list[str]:
    # repr round-trips floats exactly, so rewritten files compare equal byte for byte
    return [repr(v) if isinstance(v, float) else str(v) for v in astuple(row)]


def _write_metrics(path: Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(_format_row(row))


# ---------------------------------------------------------------- construction


def make_env(cfg: RunConfig, seed: int) -> DonkeySim | RemoteEnv:
    """Simulator profile: direct stepping.  Real-protocol profile: the same simulator behind the
    in-process remote loop (latency, jitter, camera-based off-track detection)."""
    track_seed = cfg.track_seed if cfg.track_seed >= 0 else seed
    sim = DonkeySim(cfg.sim_config(), track_seed=track_seed, noise_seed=seed)
    if cfg.env_profile == "simulator":
        return sim
    return RemoteEnv(sim, OfftrackDetectorConfig(), obs_hz=cfg.obs_hz, control_hz=cfg.control_hz,
                     latency_us=int(round(cfg.latency_ms * 1000)), jitter_us=int(round(cfg.jitter_ms * 1000)),
                     seed=seed)


def make_agent(cfg: RunConfig, seed: int, action_dim: int) -> Agent:
    mode = cfg.agent_mode()
    agent = Agent(cfg.sac_config(), action_dim, cfg.history_length * action_dim, SeededRng(seed).spawn(_INIT),
                  vae_cfg=cfg.vae_config(), mode=mode, dtype=cfg.dtype)
    if mode.needs_pretrained:
        agent.vae.load_arrays(load_vae_arrays(cfg.vae_checkpoint), "vae/")
    return agent


def make_buffer(cfg: RunConfig, action_dim: int) -> ReplayBuffer:
    p = cfg.preproc_config()
    return ReplayBuffer((1, p.output_size, p.output_size), cfg.history_length * action_dim, action_dim,
                        cfg.buffer_capacity)


def load_vae_arrays(path) -> dict[str, np.ndarray]:
    arrays = nc.load(path)
    if not any(k.startswith("vae/") for k in arrays):
        raise nc.CheckpointError(f"{path} holds no VAE parameters")
    return {k: v for k, v in arrays.items() if k.startswith("vae/")}


# ---------------------------------------------------------------- episodes


@dataclass
class EpisodeLog:
    episode_return: float
    length: int
    actions: list[np.ndarray]
    terminated_offtrack: bool


def run_episode(env, history: ControlHistory, choose: Callable[[np.ndarray, np.ndarray], np.ndarray],
                buffer: ReplayBuffer | None = None, preproc=None) -> EpisodeLog:
    """One episode from the fixed start pose; transitions go to ``buffer`` when given."""
    res = env.reset()
    history.reset()
    obs = preprocess(res.observation, preproc) if preproc else preprocess(res.observation)
    total, n, actions = 0.0, 0, []
    while True:
        hist = history.vector()
        action = np.asarray(choose(obs, hist), dtype=np.float64)
        res = env.step(action)
        history.push(action)
        next_obs = preprocess(res.observation, preproc) if preproc else preprocess(res.observation)
        # cap-terminated (truncated) transitions still bootstrap
        terminal = res.terminal and not res.info.get("truncated", False)
        if buffer is not None:
            buffer.add(Transition(obs, hist, action, res.reward, next_obs, history.vector(), terminal))
        actions.append(action)
        total += res.reward
        n += 1
        obs = next_obs
        if res.terminal:
            return EpisodeLog(total, n, actions, terminal)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, agent: Agent, buffer: ReplayBuffer | None, state: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nc.save(d / PARAMS_FILE, agent.arrays())
    if buffer is not None:
        buffer.save(d / BUFFER_FILE)
    elif (d / BUFFER_FILE).exists():
        (d / BUFFER_FILE).unlink()
    state = dict(state, critic_t=agent.critic_opt.t, actor_t=agent.actor_opt.t)
    tmp = d / (STATE_FILE + ".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
    tmp.replace(d / STATE_FILE)
    return d


def load_checkpoint_state(directory) -> dict:
    return json.loads((Path(directory) / STATE_FILE).read_text())


def restore_agent(directory, agent: Agent) -> dict:
    state = load_checkpoint_state(directory)
    agent.load_arrays(nc.load(Path(directory) / PARAMS_FILE), state["critic_t"], state["actor_t"])
    return state


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    out_dir: Path
    rows: list[MetricsRow]
    reason: str  # "episodes" | "steps" | "success" | "interrupted"


def run_dir(out_dir, cfg: RunConfig, seed: int) -> Path:
    return Path(out_dir) / f"{cfg.mode}_seed{seed}"


def run_training(cfg: RunConfig, seed: int, out_dir, resume: bool = False, stop_after: int | None = None,
                 on_episode: Callable[[MetricsRow], None] | None = None) -> RunResult:
    """Train one seed into ``out_dir`` (metrics.csv, config.txt, checkpoint/).

    ``stop_after`` ends the call after that many episodes in total, leaving a resumable
    checkpoint; it is meant for interruption tests and does not enter the config hash.
    """
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoint"
    env = make_env(cfg, seed)
    action_dim = env.action_dim
    agent = make_agent(cfg, seed, action_dim)
    buffer = make_buffer(cfg, action_dim)
    history = ControlHistory(action_dim, cfg.history_length)
    preproc = cfg.preproc_config()
    root = SeededRng(seed)
    cfg_hash = cfg.config_hash()

    rows: list[MetricsRow] = []
    episode = steps = updates = streak = 0
    wall_offset = 0.0
    if resume and (ckpt_dir / STATE_FILE).exists():
        state = restore_agent(ckpt_dir, agent)
        if state["config_hash"] != cfg_hash or state["seed"] != seed:
            raise ValueError("checkpoint was written by a different config or seed")
        if (ckpt_dir / BUFFER_FILE).exists():
            buffer.load_arrays(nc.load(ckpt_dir / BUFFER_FILE))
        elif state["episode"] > 0:
            log.warning("resuming without a replay buffer; later batches will differ from an uninterrupted run")
        episode, steps, updates, streak = state["episode"], state["steps"], state["updates"], state["streak"]
        wall_offset = state["wall_seconds"]
        env.episodes_started = state["env_episodes"]
        rows = read_metrics(out / METRICS_FILE)[:episode]
    elif out.exists() and (out / METRICS_FILE).exists() and not resume:
        shutil.rmtree(ckpt_dir, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.replace(seeds=str(seed)).to_text())
    _write_metrics(out / METRICS_FILE, rows)

    warmup = cfg.warmup()
    success_needed = cfg.success_episodes if cfg.env_profile == "real_protocol" else 0
    max_return = float(env.cfg.max_steps)
    sac = cfg.sac_config()
    t0 = time.perf_counter() - wall_offset

    def state_dict() -> dict:
        return {"episode": episode, "steps": steps, "updates": updates, "streak": streak, "seed": seed,
                "config_hash": cfg_hash, "wall_seconds": time.perf_counter() - t0,
                "env_episodes": env.episodes_started,
                "rng": {"root_seed": seed, "scheme": "counter-derived child streams",
                        "act_stream": [_ACT, episode], "sample_stream": [_SAMPLE, episode],
                        "update_stream": [_UPDATE, updates]}}

    def checkpoint(directory=ckpt_dir):
        save_checkpoint(directory, agent, buffer if cfg.save_buffer else None, state_dict())

    reason = "episodes"
    while True:
        if episode >= cfg.max_episodes:
            reason = "episodes"
            break
        if steps >= cfg.step_budget():
            reason = "steps"
            break
        if success_needed and streak >= success_needed:
            reason = "success"
            break
        if stop_after is not None and episode >= stop_after:
            reason = "interrupted"
            break
        episode += 1
        act_rng = root.spawn(_ACT).spawn(episode)
        if episode <= warmup:
            def choose(_o, _h, rng=act_rng):
                return rng.uniform(-1.0, 1.0, action_dim)
        else:
            def choose(o, h, rng=act_rng):
                return agent.act(o, h, rng)
        ep = run_episode(env, history, choose, buffer, preproc)
        steps += ep.length
        streak = streak + 1 if ep.episode_return >= max_return else 0

        losses = []
        if episode >= warmup:
            sampler = root.spawn(_SAMPLE).spawn(episode)
            for _ in range(sac.updates_per_episode):
                batch = Batch(**buffer.sample(sac.batch_size, sampler))
                updates += 1
                try:
                    rep = agent.train_step(batch, root.spawn(_UPDATE).spawn(updates))
                except nc.NonFiniteError as exc:
                    checkpoint(out / "diagnostic")
                    raise TrainingDivergedError(f"non-finite gradient at update {updates}: {exc}") from exc
                vals = (rep.critic, rep.actor, math.nan if rep.vae is None else rep.vae)
                if not (math.isfinite(rep.critic) and math.isfinite(rep.actor)
                        and (rep.vae is None or math.isfinite(rep.vae))):
                    checkpoint(out / "diagnostic")
                    raise TrainingDivergedError(f"non-finite loss at update {updates} (episode {episode}): {vals}")
                losses.append(vals)
        means = np.mean(losses, axis=0) if losses else (math.nan,) * 3
        row = MetricsRow(episode, steps, float(ep.episode_return), ep.length, float(means[0]), float(means[1]),
                         float(means[2]), round(time.perf_counter() - t0, 3))
        rows.append(row)
        with open(out / METRICS_FILE, "a", newline="") as fh:
            csv.writer(fh).writerow(_format_row(row))
        if on_episode is not None:
            on_episode(row)
        if cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    return RunResult(out, rows, reason)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    returns: list[float]
    lengths: list[int]
    max_return: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns, ddof=1)) if len(self.returns) > 1 else 0.0

    @property
    def success_rate(self) -> float:
        return float(np.mean([r >= self.max_return for r in self.returns]))

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "success_rate": self.success_rate, "episodes": len(self.returns)}


def evaluate_policy(env, choose_factory: Callable[[int], Callable], n_episodes: int,
                    history_length: int = 20) -> EvalResult:
    """``choose_factory(episode)`` returns the per-step action function for that episode."""
    history = ControlHistory(env.action_dim, history_length)
    rets, lens = [], []
    for k in range(n_episodes):
        ep = run_episode(env, history, choose_factory(k))
        rets.append(ep.episode_return)
        lens.append(ep.length)
    return EvalResult(rets, lens, float(env.cfg.max_steps))


def evaluate(checkpoint_dir, cfg: RunConfig, n_episodes: int = 5, seed: int = 0) -> EvalResult:
    """Deterministic (mean) actions of a saved agent."""
    env = make_env(cfg, seed)
    agent = make_agent(cfg.replace(mode="scratch", vae_checkpoint=""), seed, env.action_dim)
    agent.load_arrays(nc.load(Path(checkpoint_dir) / PARAMS_FILE), with_optimizers=False)
    return evaluate_policy(env, lambda _k: (lambda o, h: agent.act(o, h, None, deterministic=True)),
                           n_episodes, cfg.history_length)


def evaluate_random(cfg: RunConfig, n_episodes: int = 20, seed: int = 0) -> EvalResult:
    env = make_env(cfg, seed)
    root = SeededRng(seed).spawn(99)

    def factory(k):
        rng = root.spawn(k)
        return lambda _o, _h: rng.uniform(-1.0, 1.0, env.action_dim)

    return evaluate_policy(env, factory, n_episodes, cfg.history_length)


def evaluate_follower(cfg: RunConfig, n_episodes: int = 1, seed: int = 0) -> EvalResult:
    env = make_env(cfg, seed)
    sim = env.env if isinstance(env, RemoteEnv) else env
    follower = CenterlineFollower(sim)
    if cfg.env_profile != "simulator":
        return evaluate_policy(env, lambda _k: (lambda _o, _h: follower()[:1]), n_episodes, cfg.history_length)
    return evaluate_policy(env, lambda _k: (lambda _o, _h: follower()), n_episodes, cfg.history_length)


# ---------------------------------------------------------------- VAE pretraining


def scripted_frames(cfg: RunConfig, seed: int, track_offset: int = 10_000) -> Iterator[np.ndarray]:
    """Endless preprocessed frames from a noisy centerline follower, cycling over ``pretrain_tracks`` tracks."""
    sim_cfg: SimConfig = cfg.sim_config()
    root = SeededRng(seed).spawn(31)
    envs = [DonkeySim(sim_cfg, track_seed=track_offset + k, noise_seed=seed * 1000 + k)
            for k in range(cfg.pretrain_tracks)]
    drivers = [CenterlineFollower(e, steer_noise=cfg.pretrain_steer_noise, rng=root.spawn(k))
               for k, e in enumerate(envs)]
    preproc = cfg.preproc_config()
    per_episode = max(1, cfg.pretrain_images // (4 * cfg.pretrain_tracks))
    while True:
        for env, drive in zip(envs, drivers):
            res = env.reset()
            yield preprocess(res.observation, preproc)
            for _ in range(per_episode - 1):
                res = env.step(drive())
                yield preprocess(res.observation, preproc)
                if res.terminal:
                    break


def policy_frames(checkpoint_dir, cfg: RunConfig, seed: int, max_episodes: int = 1000) -> Iterator[np.ndarray]:
    """Frames seen by a trained agent's stochastic policy; finite (``max_episodes``)."""
    env = make_env(cfg.replace(env_profile="simulator"), seed)
    agent = make_agent(cfg.replace(mode="scratch", vae_checkpoint=""), seed, env.action_dim)
    agent.load_arrays(nc.load(Path(checkpoint_dir) / PARAMS_FILE), with_optimizers=False)
    history = ControlHistory(env.action_dim, cfg.history_length)
    preproc = cfg.preproc_config()
    root = SeededRng(seed).spawn(32)
    for k in range(max_episodes):
        rng = root.spawn(k)
        res = env.reset()
        history.reset()
        obs = preprocess(res.observation, preproc)
        yield obs
        while True:
            a = agent.act(obs, history.vector(), rng)
            res = env.step(a)
            history.push(a)
            obs = preprocess(res.observation, preproc)
            yield obs
            if res.terminal:
                break


def collect_frames(source: Iterator[np.ndarray], n: int) -> np.ndarray:
    frames = []
    for frame in source:
        frames.append(frame)
        if len(frames) == n:
            return np.stack(frames).astype(np.float32)
    raise DatasetExhaustedError(f"frame source ended after {len(frames)} of {n} frames")


@dataclass
class PretrainReport:
    images: int
    steps: int
    converged: bool
    final_loss: float
    heldout_mae: float
    seconds: float


def pretrain_vae(cfg: RunConfig, out_path, seed: int = 0, source: Iterator[np.ndarray] | None = None,
                 heldout: np.ndarray | None = None, window: int = 1000, rel_tol: float = 1e-3) -> PretrainReport:
    """Fit the VAE alone on ``pretrain_images`` frames and save its parameters.

    Stops when the mean loss of the last ``window`` steps improves on the window before it by
    less than ``rel_tol`` (relative), or after ``pretrain_max_steps``.
    """
    t0 = time.perf_counter()
    source = source if source is not None else scripted_frames(cfg, seed)
    data = collect_frames(source, cfg.pretrain_images)
    if heldout is None:
        heldout = collect_frames(scripted_frames(cfg.replace(pretrain_images=2000, pretrain_tracks=2), seed + 1,
                                                 track_offset=20_000), 500)
    root = SeededRng(seed).spawn(33)
    params = vae_mod.VaeParams(cfg.vae_config(), root.spawn(0), cfg.dtype)
    opt = nc.Adam(params.all_params(), lr=cfg.pretrain_lr)
    sampler, noise = root.spawn(1), root.spawn(2)
    losses: list[float] = []
    converged = False
    step = 0
    for step in range(1, cfg.pretrain_max_steps + 1):
        idx = sampler.integers(0, len(data), cfg.pretrain_batch)
        images = nc.Tensor(data[idx].astype(cfg.dtype, copy=False))
        with nc.Tape() as tape:
            loss, _, _ = vae_mod.vae_loss(images, params, noise.spawn(step))
        opt.step(nc.backward(loss, tape))
        losses.append(float(loss.data))
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError(f"VAE pretraining loss became non-finite at step {step}")
        if step % window == 0 and step >= 2 * window:
            prev = float(np.mean(losses[-2 * window:-window]))
            cur = float(np.mean(losses[-window:]))
            if (prev - cur) < rel_tol * abs(prev):
                converged = True
                break
    nc.save(out_path, params.arrays("vae/"))
    mae = reconstruction_mae(params, heldout)
    report = PretrainReport(len(data), step, converged, float(np.mean(losses[-min(window, len(losses)):])), mae,
                            time.perf_counter() - t0)
    Path(str(out_path) + ".json").write_text(json.dumps(asdict(report), indent=2))
    return report


def reconstruction_mae(params: vae_mod.VaeParams, images: np.ndarray, batch: int = 250) -> float:
    """Mean absolute per-pixel error of the mean reconstruction (decoder applied to the latent mean)."""
    errs = []
    dtype = params["enc.conv1.w"].dtype
    with nc.no_grad():
        for i in range(0, len(images), batch):
            x = images[i:i + batch].astype(dtype, copy=False)
            dist = vae_mod.encode(nc.Tensor(x), params)
            rec = vae_mod.decode(dist.mu, params).data
            errs.append(np.abs(rec - x).reshape(len(x), -1).mean(axis=1))
    return float(np.concatenate(errs).mean())
