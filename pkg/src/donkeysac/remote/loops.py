"""Car-side and trainer-side periodic loops.

``CarNode`` and ``ControlNode`` hold the per-tick logic and are driven either by
the discrete-event ``SimulatedSession`` (deterministic, used for training and
tests) or by the wall-clock loops ``car_loop`` / ``control_loop`` over TCP.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..numcore import SeededRng
from ..simenv import DonkeySim, StepResult
from .detector import OfftrackDetectorConfig, dark_fraction
from .protocol import (
    EPISODE_END,
    EPISODE_RESET,
    TOPIC_CTRL,
    TOPIC_EPISODE,
    TOPIC_OBS,
    ControlPayload,
    EpisodePayload,
    Frame,
    ObservationPayload,
)
from .slot import LatestSlot, SlotEntry
from .transport import Dispatcher, EventLoop, Publisher, SimulatedLink, TransportClosed, monotonic_us

log = logging.getLogger(__name__)

US = 1_000_000


class NoObservationError(RuntimeError):
    """No observation arrived within the startup window."""


def period_us(hz: float) -> int:
    if hz <= 0:
        raise ValueError("rate must be positive")
    return int(round(US / hz))


@dataclass
class LoopStats:
    ticks: int = 0
    duplicates: int = 0
    staleness_us: list[int] = field(default_factory=list)
    consumed_sequences: list[int] = field(default_factory=list)

    @property
    def duplicate_fraction(self) -> float:
        return self.duplicates / self.ticks if self.ticks else 0.0

    def summary(self) -> dict:
        s = np.asarray(self.staleness_us, dtype=np.float64) / 1000.0
        return {
            "ticks": self.ticks,
            "duplicates": self.duplicates,
            "duplicate_fraction": self.duplicate_fraction,
            "staleness_ms_mean": float(s.mean()) if s.size else float("nan"),
            "staleness_ms_max": float(s.max()) if s.size else float("nan"),
        }


class CarNode:
    """Applies the latest control every physics tick and publishes camera frames."""

    def __init__(self, env: DonkeySim, publisher: Publisher, obs_hz: float = 20.0, physics_hz: float = 100.0,
                 throttle: float = 0.0, record: bool = False):
        ratio = physics_hz / obs_hz
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("physics rate must be an integer multiple of the observation rate")
        self.env = env
        self.pub = publisher
        self.obs_every = int(round(ratio))
        self.physics_dt = 1.0 / physics_hz
        self.default_throttle = throttle
        self.control = LatestSlot()
        self.dispatcher = Dispatcher()
        self.dispatcher.on(TOPIC_CTRL, self._on_control)
        self.dispatcher.on(TOPIC_EPISODE, self._on_episode)
        self.active = False
        self.published = 0
        self.record = record
        self.applied: list[tuple[int, int]] = []  # (time, control sequence or 0)
        self.control_log: list[tuple[int, int]] = []  # (decode time, sequence)
        self._k = 0

    def _on_control(self, frame: Frame, received_at: int) -> None:
        value = ControlPayload.decode(frame.payload)
        if self.control.write(frame, value, received_at) and self.record:
            self.control_log.append((received_at, frame.sequence))

    def _on_episode(self, frame: Frame, received_at: int) -> None:
        msg = EpisodePayload.decode(frame.payload)
        if msg.kind == EPISODE_RESET:
            self.env.reset()
            self.control.clear()
            self.active = True
            self._k = 0
            # acknowledge: the frame timestamp marks the reset instant
            self.pub.publish(TOPIC_EPISODE, msg.encode())
        else:
            self.active = False

    def action(self) -> np.ndarray:
        entry = self.control.read()
        steer, thr = (entry.value.steering, entry.value.throttle) if entry else (0.0, self.default_throttle)
        return np.array([steer, thr]) if self.env.action_dim == 2 else np.array([steer])

    def tick(self, now: int) -> None:
        """One physics step; every ``obs_every``-th tick also captures and publishes a frame."""
        if not self.active:
            return
        if self._k % self.obs_every == 0:
            self.publish_observation(now)
        entry = self.control.read()
        if self.record:
            self.applied.append((now, entry.frame.sequence if entry else 0))
        self.env.apply_action(self.action())
        self.env.physics(self.physics_dt)
        self._k += 1

    def publish_observation(self, now: int) -> None:
        payload = ObservationPayload.from_frame(self.env.render(), now)
        self.pub.publish(TOPIC_OBS, payload.encode())
        self.published += 1


class ControlNode:
    """Trainer side: keeps the newest observation and publishes controls."""

    def __init__(self, publisher: Publisher, stats: LoopStats | None = None):
        self.pub = publisher
        self.obs = LatestSlot()
        self.acks = LatestSlot()
        self.dispatcher = Dispatcher()
        self.dispatcher.on(TOPIC_OBS, self._on_obs)
        self.dispatcher.on(TOPIC_EPISODE, self._on_ack)
        self.stats = stats if stats is not None else LoopStats()
        self._last_seq: int | None = None

    def _on_obs(self, frame: Frame, received_at: int) -> None:
        self.obs.write(frame, ObservationPayload.decode(frame.payload), received_at)

    def _on_ack(self, frame: Frame, received_at: int) -> None:
        self.acks.write(frame, EpisodePayload.decode(frame.payload), received_at)

    def consume(self, now: int) -> SlotEntry:
        """Read the latest observation for a control tick and record staleness/duplication."""
        entry = self.obs.read()
        if entry is None:
            raise NoObservationError("no observation available")
        self.stats.ticks += 1
        self.stats.staleness_us.append(now - entry.value.capture_timestamp)
        seq = entry.frame.sequence
        if seq == self._last_seq:
            self.stats.duplicates += 1
        self.stats.consumed_sequences.append(seq)
        self._last_seq = seq
        return entry

    def send_control(self, action) -> Frame:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        thr = float(a[1]) if a.shape[0] > 1 else 0.0
        return self.pub.publish(TOPIC_CTRL, ControlPayload(float(a[0]), thr).encode())

    def send_episode(self, kind: int, episode: int) -> Frame:
        return self.pub.publish(TOPIC_EPISODE, EpisodePayload(kind, episode).encode())

    def tick(self, now: int, policy: Callable[[SlotEntry], np.ndarray]) -> np.ndarray:
        entry = self.consume(now)
        action = policy(entry)
        self.send_control(action)
        return action


class SimulatedSession:
    """Car and trainer connected through jittered simulated links on one event loop."""

    def __init__(self, env: DonkeySim, obs_hz: float = 20.0, control_hz: float = 10.0, latency_us: int = 20_000,
                 jitter_us: int = 10_000, seed: int | SeededRng = 0, physics_hz: float = 100.0,
                 throttle: float = 0.0, record: bool = False, stats: LoopStats | None = None):
        self.loop = EventLoop()
        rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
        self.uplink = SimulatedLink(self.loop, latency_us, jitter_us, rng.spawn(0))
        self.downlink = SimulatedLink(self.loop, latency_us, jitter_us, rng.spawn(1))
        clock = lambda: self.loop.now  # noqa: E731
        self.car = CarNode(env, Publisher(self.uplink, clock), obs_hz, physics_hz, throttle, record)
        self.trainer = ControlNode(Publisher(self.downlink, clock), stats)
        self.uplink.on_receive = self.trainer.dispatcher
        self.downlink.on_receive = self.car.dispatcher
        self.obs_period = period_us(obs_hz)
        self.control_period = period_us(control_hz)
        self.physics_period = period_us(physics_hz)
        self._physics_k = 0
        self.loop.schedule(0, self._car_tick)

    def _car_tick(self) -> None:
        # absolute schedule: tick k fires at exactly k * period
        self.car.tick(self.loop.now)
        self._physics_k += 1
        self.loop.schedule(self._physics_k * self.physics_period, self._car_tick)

    @property
    def max_latency_us(self) -> int:
        return self.uplink.max_delay_us

    def start_episode(self, episode: int, timeout_us: int = US) -> SlotEntry:
        """Ask the car to reset and wait for the first post-reset observation."""
        sent_at = self.loop.now
        self.trainer.send_episode(EPISODE_RESET, episode)

        def waiting():
            ack = self.trainer.acks.read()
            if ack is None or ack.frame.send_timestamp < sent_at or ack.value.episode != episode:
                return True
            obs = self.trainer.obs.read()
            return obs is None or obs.value.capture_timestamp < ack.frame.send_timestamp

        if not self.loop.run_while(waiting, self.loop.now + timeout_us):
            raise NoObservationError(f"no observation within {timeout_us / 1000:.0f} ms of episode start")
        return self.trainer.obs.read()

    def end_episode(self, episode: int) -> None:
        self.trainer.send_episode(EPISODE_END, episode)

    def run_control(self, duration_us: int, policy: Callable[[SlotEntry], np.ndarray], episode: int = 0) -> LoopStats:
        """Start an episode, then tick the control loop on an absolute schedule for ``duration_us``."""
        self.start_episode(episode)
        start = self.loop.now
        k = 0
        while k * self.control_period < duration_us:
            self.loop.run_until(start + k * self.control_period)
            self.trainer.tick(self.loop.now, policy)
            k += 1
        self.loop.run_until(start + duration_us)
        return self.trainer.stats


class RemoteEnv:
    """Episode interface over a ``SimulatedSession``: each ``step`` is one control tick.

    The episode ends when the camera-based detector or the geometric check says the
    car has left the track (the geometric check stands in for the human supervisor).
    """

    def __init__(self, env: DonkeySim, detector: OfftrackDetectorConfig = OfftrackDetectorConfig(),
                 obs_hz: float = 20.0, control_hz: float = 10.0, latency_us: int = 20_000, jitter_us: int = 10_000,
                 seed: int = 0, throttle: float = 0.0):
        self.env = env
        self.detector = detector.validate()
        self._session_args = dict(obs_hz=obs_hz, control_hz=control_hz, latency_us=latency_us,
                                  jitter_us=jitter_us, throttle=throttle)
        self._root = SeededRng(seed)
        self.stats = LoopStats()
        self.session: SimulatedSession | None = None
        self.episode = 0
        self._tick_at = 0
        self.done = True

    @property
    def action_dim(self) -> int:
        return self.env.action_dim

    @property
    def cfg(self):
        return self.env.cfg

    @property
    def track(self):
        return self.env.track

    @property
    def episodes_started(self) -> int:
        return self.episode

    @episodes_started.setter
    def episodes_started(self, n: int) -> None:
        self.episode = int(n)
        self.env.episodes_started = int(n)

    def reset(self, seed: int | None = None) -> StepResult:
        """Each episode runs on a fresh session whose link jitter is derived from the episode index,
        so an episode's timing never depends on earlier episodes."""
        self.episode += 1
        rng = self._root.spawn(self.episode if seed is None else 1_000_000 + seed)
        self.session = SimulatedSession(self.env, seed=rng, stats=self.stats, **self._session_args)
        entry = self.session.start_episode(self.episode)
        self._tick_at = self.session.loop.now
        self.done = False
        img = entry.value.image().astype(np.float64) / 255.0
        return StepResult(img, 0.0, False, {"progress": 0.0, "on_track": True, "steps": 0})

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() on a finished episode; call reset()")
        s = self.session
        s.trainer.send_control(action)
        self._tick_at += s.control_period
        s.loop.run_until(self._tick_at)
        entry = s.trainer.consume(s.loop.now)
        img = entry.value.image().astype(np.float64) / 255.0
        frac = dark_fraction(img, self.detector)
        detector_off = frac < self.detector.min_fraction
        geometric_on = self.env.is_on_track()
        result = self.env.finish_step(img, on_track=geometric_on and not detector_off)
        result.info.update({"detector_offtrack": detector_off, "geometric_on_track": geometric_on,
                            "staleness_us": s.trainer.stats.staleness_us[-1]})
        if result.terminal:
            self.done = True
            s.end_episode(self.episode)
        return result


# ------------------------------------------------------------------ wall-clock loops


def run_periodic(period_s: float, fn: Callable[[int], None], should_stop: Callable[[], bool],
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep,
                 max_ticks: int | None = None) -> int:
    """Call ``fn(k)`` at ``start + k * period`` (absolute deadlines, no drift).

    Ticks whose deadline has already passed by more than one period are skipped.
    Returns the number of skipped ticks.
    """
    start = clock()
    k = 0
    skipped = 0
    done = 0
    while not should_stop() and (max_ticks is None or done < max_ticks):
        deadline = start + k * period_s
        now = clock()
        if now < deadline:
            sleep(deadline - now)
        fn(k)
        done += 1
        k += 1
        behind = clock() - (start + k * period_s)
        if behind > period_s:
            n = int(behind // period_s)
            k += n
            skipped += n
    return skipped


def car_loop(connect: Callable[[], object], env: DonkeySim, obs_hz: float = 20.0,
             stop: threading.Event | None = None, max_reconnects: int = 3, duration_s: float | None = None,
             throttle: float = 0.0) -> CarNode:
    """Car side over a real channel: physics + capture at ``obs_hz``; reconnects a bounded number of times."""
    stop = stop or threading.Event()
    attempts = 0
    deadline = None if duration_s is None else time.monotonic() + duration_s
    node = None
    while True:
        channel = connect()
        pub = Publisher(channel, monotonic_us)
        if node is None:
            node = CarNode(env, pub, obs_hz, physics_hz=obs_hz, throttle=throttle)
        else:
            node.pub = pub
        channel.on_receive = node.dispatcher
        channel.start()

        def should_stop():
            return stop.is_set() or channel.closed.is_set() or (deadline is not None and time.monotonic() >= deadline)

        try:
            run_periodic(1.0 / obs_hz, lambda k: node.tick(monotonic_us()), should_stop)
        except TransportClosed:
            pass
        if stop.is_set() or (deadline is not None and time.monotonic() >= deadline):
            channel.close()
            return node
        attempts += 1
        log.warning("car transport lost (%s); reconnect %d/%d", channel.error, attempts, max_reconnects)
        if attempts > max_reconnects:
            raise TransportClosed(f"transport lost and {max_reconnects} reconnect attempts exhausted")


def control_loop(channel, policy: Callable[[SlotEntry], np.ndarray], control_hz: float = 10.0,
                 n_ticks: int | None = None, stop: Callable[[SlotEntry], bool] | None = None,
                 startup_timeout_s: float = 1.0, node: ControlNode | None = None) -> ControlNode:
    """Trainer side over a real channel. ``stop(entry)`` is checked after each tick (episode end)."""
    if node is None:
        node = ControlNode(Publisher(channel, monotonic_us))
        channel.on_receive = node.dispatcher
        channel.start()
    t0 = time.monotonic()
    while node.obs.read() is None:
        if time.monotonic() - t0 > startup_timeout_s:
            raise NoObservationError(f"no observation within {startup_timeout_s:.1f} s")
        time.sleep(0.001)
    finished = threading.Event()

    def tick(_k):
        entry = node.obs.read()
        node.tick(monotonic_us(), policy)
        if stop is not None and stop(entry):
            finished.set()

    run_periodic(1.0 / control_hz, tick, finished.is_set, max_ticks=n_ticks)
    return node
