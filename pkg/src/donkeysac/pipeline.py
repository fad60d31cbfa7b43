"""Observation preprocessing, control history and the replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import SeededRng
from .numcore import checkpoint as ckpt

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocConfig:
    input_height: int = 120
    input_width: int = 160
    crop_top_rows: int = 40
    output_size: int = 40

    def validate(self) -> "PreprocConfig":
        if not 0 <= self.crop_top_rows < self.input_height:
            raise ValueError("crop_top_rows must be smaller than the input height")
        rows = self.input_height - self.crop_top_rows
        if rows % self.output_size or self.input_width % self.output_size:
            raise ValueError("cropped frame must divide evenly into the output grid")
        return self

    @property
    def block(self) -> tuple[int, int]:
        return ((self.input_height - self.crop_top_rows) // self.output_size,
                self.input_width // self.output_size)


def preprocess(frame: np.ndarray, cfg: PreprocConfig = PreprocConfig(), dtype=np.float32) -> np.ndarray:
    """Grayscale, drop the top rows, block-average down to ``[1, n, n]`` (float32 unless ``dtype`` says otherwise).

    Accepts ``[H,W]``, ``[H,W,1]`` or ``[H,W,3]``; uint8 input is scaled to [0,1].
    """
    cfg.validate()
    img = np.asarray(frame)
    if img.ndim == 3 and img.shape[2] in (1, 3):
        pass
    elif img.ndim != 2:
        raise ValueError(f"preprocess: unsupported frame shape {img.shape}")
    if img.shape[:2] != (cfg.input_height, cfg.input_width):
        raise ValueError(f"preprocess: expected {cfg.input_height}x{cfg.input_width} frame, got {img.shape}")
    scale = 1.0 / 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) * scale
    if img.ndim == 3:
        img = img[..., 0] if img.shape[2] == 1 else img @ np.asarray(LUMA)
    crop = img[cfg.crop_top_rows:]
    bh, bw = cfg.block
    n = cfg.output_size
    out = crop.reshape(n, bh, n, bw).mean(axis=(1, 3))
    return out[None].astype(dtype)


class ControlHistory:
    """Ring of the most recent action vectors, flattened oldest-first."""

    def __init__(self, action_dim: int, length: int = 20):
        self.action_dim = action_dim
        self.length = length
        self._buf = np.zeros((length, action_dim), dtype=np.float32)

    def reset(self) -> None:
        self._buf[...] = 0.0

    def push(self, action) -> None:
        a = np.asarray(action, dtype=np.float32).reshape(-1)
        if a.shape[0] != self.action_dim:
            raise ValueError(f"history expects {self.action_dim} action values, got {a.shape[0]}")
        self._buf = np.roll(self._buf, -1, axis=0)
        self._buf[-1] = a

    def vector(self) -> np.ndarray:
        return self._buf.reshape(-1).copy()

    @property
    def size(self) -> int:
        return self.length * self.action_dim


@dataclass
class Transition:
    obs: np.ndarray
    history: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    next_history: np.ndarray
    terminal: bool


_FIELDS = ("obs", "history", "action", "reward", "next_obs", "next_history", "terminal")


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling (with replacement).

    Storage grows geometrically up to ``capacity`` so short runs do not commit
    the full allocation.
    """

    def __init__(self, obs_shape, history_dim: int, action_dim: int, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.obs_shape = tuple(obs_shape)
        self.history_dim = history_dim
        self.action_dim = action_dim
        self.capacity = capacity
        self._alloc = 0
        self._store: dict[str, np.ndarray] = {}
        self._grow(min(capacity, 1024))
        self.size = 0
        self._next = 0
        self.total_added = 0

    def _shapes(self) -> dict[str, tuple]:
        return {"obs": self.obs_shape, "history": (self.history_dim,), "action": (self.action_dim,),
                "reward": (), "next_obs": self.obs_shape, "next_history": (self.history_dim,),
                "terminal": ()}

    def _grow(self, n: int) -> None:
        new = {}
        for name, shape in self._shapes().items():
            arr = np.zeros((n,) + shape, dtype=np.float32)
            if self._alloc:
                arr[: self._alloc] = self._store[name]
            new[name] = arr
        self._store = new
        self._alloc = n

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        if self._next >= self._alloc and self._alloc < self.capacity:
            self._grow(min(self.capacity, 2 * self._alloc))
        i = self._next
        for name in _FIELDS:
            self._store[name][i] = getattr(t, name)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self._next + np.arange(self.capacity)) % self.capacity

    def get(self, k: int) -> Transition:
        """k-th oldest transition currently held."""
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = int(self._order()[k])
        s = self._store
        return Transition(s["obs"][i].copy(), s["history"][i].copy(), s["action"][i].copy(),
                          float(s["reward"][i]), s["next_obs"][i].copy(), s["next_history"][i].copy(),
                          bool(s["terminal"][i]))

    def sample_indices(self, n: int, rng: SeededRng) -> np.ndarray:
        """Uniform ages (0 = oldest); independent of the storage layout, so a reloaded buffer samples identically."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, n)

    def sample(self, n: int, rng: SeededRng) -> dict[str, np.ndarray]:
        idx = self.sample_indices(n, rng)
        if self.size == self.capacity:
            idx = (self._next + idx) % self.capacity
        return {name: self._store[name][idx] for name in _FIELDS}

    # -------------------------------------------------------------- persistence

    def arrays(self, prefix: str = "buffer/") -> dict[str, np.ndarray]:
        order = self._order()
        return {prefix + name: self._store[name][order] for name in _FIELDS}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "buffer/") -> None:
        n = arrays[prefix + "obs"].shape[0]
        if n > self.capacity:
            raise ValueError("stored buffer exceeds capacity")
        if n > self._alloc:
            self._grow(n)
        for name in _FIELDS:
            self._store[name][:n] = arrays[prefix + name]
        self.size = n
        self._next = n % self.capacity

    def save(self, path) -> None:
        ckpt.save(path, self.arrays())

    @classmethod
    def load(cls, path, capacity: int = 100_000) -> "ReplayBuffer":
        arrays = ckpt.load(path)
        obs = arrays["buffer/obs"]
        buf = cls(obs.shape[1:], arrays["buffer/history"].shape[1], arrays["buffer/action"].shape[1],
                  max(capacity, obs.shape[0]))
        buf.load_arrays(arrays)
        return buf
