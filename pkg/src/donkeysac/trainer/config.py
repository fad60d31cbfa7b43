"""Run configuration: a flat ``key = value`` text format with documented defaults."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from ..pipeline import PreprocConfig
from ..sac import AgentMode, SacConfig
from ..simenv import SimConfig, profile_config
from ..vae import VaeConfig

PROFILES = ("simulator", "real_protocol")


def _meta(doc: str) -> dict:
    return {"doc": doc}


@dataclass
class RunConfig:
    preset: str = dataclasses.field(default="paper", metadata=_meta(
        "scale preset applied before explicit keys: paper (batch 128, 600 updates, 16/32/32 channels) "
        "or desk (batch 32, 100 updates, 8/16/16 channels, higher lr)"))
    mode: str = dataclasses.field(default="scratch", metadata=_meta(
        "fixed_pretrained | init_pretrained | scratch"))
    env_profile: str = dataclasses.field(default="simulator", metadata=_meta(
        "simulator (steering + throttle, cap 1000) | real_protocol (steering only, cap 500, remote loop)"))
    seeds: str = dataclasses.field(default="0,1,2", metadata=_meta("comma-separated run seeds"))
    max_episodes: int = dataclasses.field(default=1000, metadata=_meta("episode budget"))
    max_env_steps: int = dataclasses.field(default=0, metadata=_meta(
        "environment step budget; the run stops after the episode that reaches it; "
        "0 = profile default (60000 simulator, 6000 real_protocol)"))
    gamma: float = dataclasses.field(default=0.99, metadata=_meta("discount factor"))
    alpha: float = dataclasses.field(default=0.2, metadata=_meta("entropy temperature"))
    tau: float = dataclasses.field(default=0.005, metadata=_meta("target smoothing coefficient"))
    batch_size: int = dataclasses.field(default=128, metadata=_meta("minibatch size"))
    updates_per_episode: int = dataclasses.field(default=600, metadata=_meta("gradient steps after each episode"))
    lr: float = dataclasses.field(default=1e-4, metadata=_meta("Adam learning rate (critic+VAE and actor)"))
    hidden: int = dataclasses.field(default=64, metadata=_meta("hidden units per layer (two layers)"))
    single_critic: bool = dataclasses.field(default=False, metadata=_meta("use one Q network instead of two"))
    vae_channels: str = dataclasses.field(default="16,32,32", metadata=_meta("encoder conv channels"))
    latent_dim: int = dataclasses.field(default=20, metadata=_meta("latent embedding size"))
    history_length: int = dataclasses.field(default=20, metadata=_meta("number of past actions in the state"))
    buffer_capacity: int = dataclasses.field(default=100000, metadata=_meta("replay buffer size"))
    warmup_episodes: int = dataclasses.field(default=-1, metadata=_meta(
        "uniform-random episodes before learning starts; -1 = profile default (0 simulator, 5 real_protocol)"))
    success_episodes: int = dataclasses.field(default=3, metadata=_meta(
        "stop after this many consecutive max-return episodes; 0 disables"))
    vae_checkpoint: str = dataclasses.field(default="", metadata=_meta(
        "pretrained VAE checkpoint (required by the pretrained modes)"))
    track_seed: int = dataclasses.field(default=-1, metadata=_meta("track generator seed; -1 = the run seed"))
    max_steps: int = dataclasses.field(default=0, metadata=_meta("episode cap; 0 = profile default (1000 / 500)"))
    noise_amplitude: float = dataclasses.field(default=0.02, metadata=_meta("camera noise standard deviation"))
    obs_hz: float = dataclasses.field(default=20.0, metadata=_meta("remote profile: observation rate"))
    control_hz: float = dataclasses.field(default=10.0, metadata=_meta("remote profile: control rate"))
    latency_ms: float = dataclasses.field(default=20.0, metadata=_meta("remote profile: one-way link latency"))
    jitter_ms: float = dataclasses.field(default=10.0, metadata=_meta("remote profile: extra uniform delay"))
    checkpoint_every: int = dataclasses.field(default=0, metadata=_meta(
        "write a resumable checkpoint every N episodes; 0 = only at the end"))
    save_buffer: bool = dataclasses.field(default=True, metadata=_meta(
        "include the replay buffer in checkpoints (needed for exact resume)"))
    pretrain_images: int = dataclasses.field(default=10000, metadata=_meta("VAE pretraining dataset size"))
    pretrain_batch: int = dataclasses.field(default=128, metadata=_meta("VAE pretraining batch size"))
    pretrain_lr: float = dataclasses.field(default=1e-4, metadata=_meta("VAE pretraining learning rate"))
    pretrain_max_steps: int = dataclasses.field(default=20000, metadata=_meta("VAE pretraining step cap"))
    pretrain_tracks: int = dataclasses.field(default=10, metadata=_meta("distinct tracks in the pretraining set"))
    pretrain_steer_noise: float = dataclasses.field(default=0.3, metadata=_meta(
        "steering noise of the scripted driver that records pretraining frames"))
    dtype: str = dataclasses.field(default="float32", metadata=_meta("network precision"))

    # ---------------------------------------------------------------- derived views

    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).split(",") if s.strip()]

    def agent_mode(self) -> AgentMode:
        return AgentMode(self.mode)

    def sac_config(self) -> SacConfig:
        return SacConfig(self.gamma, self.alpha, self.tau, self.batch_size, self.updates_per_episode, self.lr,
                         self.hidden, self.single_critic)

    def vae_config(self) -> VaeConfig:
        ch = tuple(int(c) for c in self.vae_channels.split(","))
        if len(ch) != 3:
            raise ValueError("vae_channels needs three comma-separated values")
        return VaeConfig(channels=ch, latent_dim=self.latent_dim)

    def sim_config(self) -> SimConfig:
        over = {"noise_amplitude": self.noise_amplitude}
        if self.max_steps:
            over["max_steps"] = self.max_steps
        return profile_config(self.env_profile, **over)

    def preproc_config(self) -> PreprocConfig:
        return PreprocConfig()

    def warmup(self) -> int:
        if self.warmup_episodes >= 0:
            return self.warmup_episodes
        return 5 if self.env_profile == "real_protocol" else 0

    def step_budget(self) -> int:
        if self.max_env_steps > 0:
            return self.max_env_steps
        return 6000 if self.env_profile == "real_protocol" else 60000

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.env_profile not in PROFILES:
            raise ValueError(f"env_profile must be one of {PROFILES}")
        mode = self.agent_mode()
        self.sac_config().validate()
        self.vae_config()
        self.sim_config().validate()
        if not self.seed_list():
            raise ValueError("at least one seed is required")
        if self.max_episodes < 1 or self.max_env_steps < 0:
            raise ValueError("budgets must be positive")
        if self.history_length < 1 or self.buffer_capacity < 1:
            raise ValueError("history_length and buffer_capacity must be positive")
        if mode.needs_pretrained and not self.vae_checkpoint:
            raise ValueError(f"mode {mode.value} requires vae_checkpoint")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    # ---------------------------------------------------------------- text format

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata.get('doc', '')}")
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def canonical(self, exclude=("seeds",)) -> str:
        return "\n".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self) if f.name not in exclude)

    def config_hash(self, exclude=("seeds",)) -> str:
        return hashlib.sha256(self.canonical(exclude).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        """Build from string values; the preset is applied first, explicit keys override it."""
        known = {f.name: f for f in fields(cls)}
        unknown = set(pairs) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        preset = pairs.get("preset", "paper")
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        values = dict(PRESETS[preset])
        values["preset"] = preset
        for k, v in pairs.items():
            values[k] = _parse(known[k], v)
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        pairs = parse_text(Path(path).read_text())
        pairs.update(overrides or {})
        return cls.from_pairs(pairs)


PRESETS: dict[str, dict] = {
    "paper": {},
    "desk": {"batch_size": 32, "updates_per_episode": 100, "lr": 3e-4, "vae_channels": "8,16,16",
             "max_env_steps": 30000, "pretrain_batch": 32, "pretrain_lr": 3e-4, "pretrain_max_steps": 6000},
}


def parse_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs[k] = v
    return pairs


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(f: dataclasses.Field, v):
    if not isinstance(v, str):
        return v
    t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if t is bool:
        low = v.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{f.name}: expected a boolean, got {v!r}")
        return low in ("true", "1", "yes")
    return t(v)
