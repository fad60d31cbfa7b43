"""Top-down 2D driving simulator with a perspective camera.

Closed tracks are generated from a perturbed circle of control points,
smoothed by a periodic cubic spline and resampled to uniform arc length.  The
car follows a kinematic bicycle model; the on-board camera is rendered by
casting each pixel ray onto the ground plane.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .numcore import SeededRng

REWARD_ALIVE = 1.0
REWARD_CRASH = -10.0


class TrackGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraConfig:
    width: int = 160
    height: int = 120
    mount_height: float = 0.2  # metres above ground
    pitch_deg: float = 20.0  # downward tilt
    hfov_deg: float = 100.0
    forward_offset: float = 0.0  # camera position ahead of the car reference point
    max_range: float = 30.0

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def horizon_row(self) -> float:
        cy = (self.height - 1) / 2.0
        return cy - self.focal * math.tan(math.radians(self.pitch_deg))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    wheelbase: float = 0.26
    max_steer: float = 0.4
    fixed_speed: float = 0.5
    throttle_control: bool = False
    min_speed: float = 0.3
    max_speed: float = 1.0
    speed_time_constant: float = 0.3
    realworld_dynamics: bool = False
    throttle_deadzone: float = 0.4
    max_steps: int = 1000
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise_amplitude: float = 0.02
    # track
    track_mode: str = "random"  # random | circle | stadium
    base_radius: float = 2.0
    radius_jitter: float = 0.3
    min_control_points: int = 8
    max_control_points: int = 16
    min_length: float = 6.0
    max_length: float = 20.0
    min_curvature_radius: float = 0.8
    half_width: float = 0.3
    track_intensity: float = 0.3
    ground_intensity: float = 0.7
    sky_intensity: float = 0.9
    spacing: float = 0.02
    stadium_straight: float = 60.0
    raster_resolution: float = 0.01

    def validate(self) -> "SimConfig":
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.track_intensity < self.ground_intensity:
            raise ValueError("the track must be darker than the ground")
        if self.track_mode not in ("random", "circle", "stadium"):
            raise ValueError(f"unknown track_mode {self.track_mode!r}")
        return self


@dataclass
class CarState:
    position: np.ndarray
    heading: float
    speed: float
    steering_angle: float = 0.0


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    info: dict


# ---------------------------------------------------------------- geometry


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance from each point ``[P,2]`` to each segment ``a[i]-b[i]``.

    Returns ``(distance [P,S], projection parameter t [P,S], closest points [P,S,2])``.
    """
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-18)
    ap = points[:, None, :] - a[None]
    t = np.clip(np.einsum("psk,sk->ps", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    return d, t, closest


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Proper intersection test for segment pairs (vectorised over leading axes)."""
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


class Track:
    """Closed centerline polyline (first point repeated at the end)."""

    def __init__(self, centerline: np.ndarray, half_width: float, track_intensity: float,
                 ground_intensity: float, raster_resolution: float = 0.01):
        pts = np.asarray(centerline, dtype=np.float64)
        if not np.array_equal(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[:1]])
        self.centerline = pts
        self.half_width = float(half_width)
        self.track_intensity = float(track_intensity)
        self.ground_intensity = float(ground_intensity)
        seg = np.diff(pts, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.cum_len = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum_len[-1])
        self._raster_resolution = raster_resolution
        self._raster = None

    @property
    def start_heading(self) -> float:
        d = self.centerline[1] - self.centerline[0]
        return math.atan2(d[1], d[0])

    def project(self, point) -> tuple[float, float]:
        """(distance to centerline, arc-length position of the closest point)."""
        p = np.asarray(point, dtype=np.float64).reshape(1, 2)
        d, t, _ = segment_distances(p, self.centerline[:-1], self.centerline[1:])
        i = int(np.argmin(d[0]))
        return float(d[0, i]), float(self.cum_len[i] + t[0, i] * self.seg_len[i])

    def distance(self, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.empty(len(pts))
        a, b = self.centerline[:-1], self.centerline[1:]
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = segment_distances(pts[s:s + chunk], a, b)[0].min(axis=1)
        return out

    def contains(self, point) -> bool:
        return self.project(point)[0] <= self.half_width

    # -------------------------------------------------------- raster for rendering

    def raster(self):
        """Boolean on-track grid covering the track bounding box (built once)."""
        if self._raster is None:
            res = self._raster_resolution
            margin = self.half_width + 2 * res
            lo = self.centerline.min(axis=0) - margin
            hi = self.centerline.max(axis=0) + margin
            nx = int(math.ceil((hi[0] - lo[0]) / res)) + 1
            ny = int(math.ceil((hi[1] - lo[1]) / res)) + 1
            dense = self.resample(res / 4.0)
            tree = cKDTree(dense)
            xs = lo[0] + res * np.arange(nx)
            ys = lo[1] + res * np.arange(ny)
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            d, _ = tree.query(np.stack([gx.ravel(), gy.ravel()], axis=1),
                              distance_upper_bound=self.half_width + res)
            mask = (d <= self.half_width).reshape(nx, ny)
            self._raster = (lo, res, mask)
        return self._raster

    def on_track_fast(self, points: np.ndarray) -> np.ndarray:
        lo, res, mask = self.raster()
        ij = np.rint((points - lo) / res).astype(np.int64)
        ok = (ij[..., 0] >= 0) & (ij[..., 1] >= 0) & (ij[..., 0] < mask.shape[0]) & (ij[..., 1] < mask.shape[1])
        out = np.zeros(points.shape[:-1], dtype=bool)
        out[ok] = mask[ij[ok][:, 0], ij[ok][:, 1]]
        return out

    def resample(self, spacing: float) -> np.ndarray:
        n = max(int(math.ceil(self.length / spacing)), 3)
        s = np.linspace(0.0, self.length, n, endpoint=False)
        return self.point_at(s)

    def point_at(self, s) -> np.ndarray:
        s = np.mod(np.asarray(s, dtype=np.float64), self.length)
        i = np.clip(np.searchsorted(self.cum_len, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = (s - self.cum_len[i]) / np.maximum(self.seg_len[i], 1e-12)
        return self.centerline[i] + t[..., None] * (self.centerline[i + 1] - self.centerline[i])

    def export_text(self) -> str:
        lines = [f"# half_width {self.half_width:.6f}", "# x y"]
        lines += [f"{x:.9f} {y:.9f}" for x, y in self.centerline]
        return "\n".join(lines) + "\n"


def _uniform_closed(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a closed polyline (without repeated end point) to uniform arc length."""
    closed = np.vstack([points, points[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(round(cum[-1] / spacing)), 8)
    s = np.linspace(0.0, cum[-1], n, endpoint=False)
    x = np.interp(s, cum, closed[:, 0])
    y = np.interp(s, cum, closed[:, 1])
    return np.stack([x, y], axis=1)


def _polyline_self_intersects(pts: np.ndarray) -> bool:
    """O(n^2) brute force over non-adjacent segments of a closed polyline."""
    closed = np.vstack([pts, pts[:1]])
    a, b = closed[:-1], closed[1:]
    n = len(a)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    return bool(np.any(segments_intersect(a[i], b[i], a[j], b[j])))


def _max_curvature(pts: np.ndarray) -> float:
    prev = np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0)
    a = np.linalg.norm(pts - prev, axis=1)
    b = np.linalg.norm(nxt - pts, axis=1)
    c = np.linalg.norm(nxt - prev, axis=1)
    cross = np.abs((pts[:, 0] - prev[:, 0]) * (nxt[:, 1] - prev[:, 1]) - (pts[:, 1] - prev[:, 1]) * (nxt[:, 0] - prev[:, 0]))
    return float(np.max(2.0 * cross / np.maximum(a * b * c, 1e-18)))


def _too_close_to_itself(pts: np.ndarray, clearance: float, spacing: float) -> bool:
    """True when two parts of the loop that are far apart along the track come within ``clearance``."""
    tree = cKDTree(pts)
    n = len(pts)
    window = int(math.ceil(clearance * math.pi / spacing)) + 1
    for i, j in tree.query_pairs(clearance):
        gap = min(abs(i - j), n - abs(i - j))
        if gap > window:
            return True
    return False


def generate_track(seed: int, cfg: SimConfig) -> Track:
    cfg.validate()
    if cfg.track_mode == "circle":
        n = max(int(round(2 * math.pi * cfg.base_radius / cfg.spacing)), 16)
        ang = 2 * math.pi * np.arange(n) / n
        pts = cfg.base_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return Track(pts, cfg.half_width, cfg.track_intensity, cfg.ground_intensity, cfg.raster_resolution)
    if cfg.track_mode == "stadium":
        return Track(_stadium(cfg), cfg.half_width, cfg.track_intensity, cfg.ground_intensity,
                     cfg.raster_resolution)

    root = SeededRng(seed)
    for attempt in range(100):
        rng = root.spawn(attempt)
        n = int(rng.integers(cfg.min_control_points, cfg.max_control_points + 1))
        ang = 2 * math.pi * (np.arange(n) + rng.uniform(-0.3, 0.3, n)) / n
        radius = cfg.base_radius * (1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, n))
        # periodic radius-versus-angle spline keeps the loop star-shaped around the origin
        spline = CubicSpline(np.append(ang, ang[0] + 2 * math.pi), np.append(radius, radius[0]),
                             bc_type="periodic")
        theta = ang[0] + np.linspace(0.0, 2 * math.pi, 20000, endpoint=False)
        r = spline(theta)
        if np.any(r <= cfg.half_width):
            continue
        dense = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts = _uniform_closed(dense, cfg.spacing)
        length = float(np.sum(np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)))
        if not cfg.min_length <= length <= cfg.max_length:
            continue
        if _max_curvature(pts) > 1.0 / cfg.min_curvature_radius:
            continue
        if _polyline_self_intersects(pts):
            continue
        if _too_close_to_itself(pts, 2 * cfg.half_width + 0.2, cfg.spacing):
            continue
        return Track(pts, cfg.half_width, cfg.track_intensity, cfg.ground_intensity, cfg.raster_resolution)
    raise TrackGenerationError(f"no valid track after 100 attempts (seed {seed}); check the generation parameters")


def _stadium(cfg: SimConfig) -> np.ndarray:
    r, L, h = cfg.base_radius, cfg.stadium_straight, cfg.spacing
    n_straight = max(int(round(L / h)), 1)
    n_arc = max(int(round(math.pi * r / h)), 8)
    bottom = np.stack([np.linspace(0, L, n_straight, endpoint=False), np.full(n_straight, 0.0)], axis=1)
    a = np.linspace(-math.pi / 2, math.pi / 2, n_arc, endpoint=False)
    right = np.stack([L + r * np.cos(a), r + r * np.sin(a)], axis=1)
    top = np.stack([np.linspace(L, 0, n_straight, endpoint=False), np.full(n_straight, 2 * r)], axis=1)
    a = np.linspace(math.pi / 2, 3 * math.pi / 2, n_arc, endpoint=False)
    left = np.stack([r * np.cos(a), r + r * np.sin(a)], axis=1)
    return np.vstack([bottom, right, top, left])


# ---------------------------------------------------------------- camera


class GroundCamera:
    """Per-pixel ground-plane offsets (car frame) for a pitched pinhole camera."""

    def __init__(self, cam: CameraConfig, supersample: int = 1):
        self.cam = cam
        ss = supersample
        f = cam.focal
        cx = (cam.width - 1) / 2.0
        cy = (cam.height - 1) / 2.0
        off = (np.arange(ss) + 0.5) / ss - 0.5
        rows = (np.arange(cam.height)[:, None] + off[None, :]).reshape(-1)
        cols = (np.arange(cam.width)[:, None] + off[None, :]).reshape(-1)
        r, c = np.meshgrid(rows, cols, indexing="ij")
        y_down = (r - cy) / f
        x_right = (c - cx) / f
        th = math.radians(cam.pitch_deg)
        fwd = math.cos(th) - y_down * math.sin(th)
        left = -x_right
        up = -math.sin(th) - y_down * math.cos(th)
        ground = up < -1e-9
        t = np.where(ground, cam.mount_height / np.where(ground, -up, 1.0), 0.0)
        gx = t * fwd + cam.forward_offset
        gy = t * left
        within = ground & (np.hypot(gx, gy) <= cam.max_range)
        self.ground = ground
        self.within = within
        self.offsets = np.stack([gx[within], gy[within]], axis=1)
        self.shape = r.shape
        self.supersample = ss

    def world_points(self, car: CarState) -> np.ndarray:
        ch, sh = math.cos(car.heading), math.sin(car.heading)
        x = car.position[0] + ch * self.offsets[:, 0] - sh * self.offsets[:, 1]
        y = car.position[1] + sh * self.offsets[:, 0] + ch * self.offsets[:, 1]
        return np.stack([x, y], axis=1)

    def track_mask(self, car: CarState, track: Track, exact: bool = False) -> np.ndarray:
        """Boolean image (at supersampled resolution) of pixels that see the track."""
        pts = self.world_points(car)
        hit = track.distance(pts) <= track.half_width if exact else track.on_track_fast(pts)
        out = np.zeros(self.shape, dtype=bool)
        out[self.within] = hit
        return out


def render_camera(car: CarState, track: Track, cfg: SimConfig, rng: SeededRng | None = None,
                  camera: GroundCamera | None = None) -> np.ndarray:
    """Grayscale ``[height, width]`` frame in [0, 1]."""
    camera = camera or GroundCamera(cfg.camera)
    mask = camera.track_mask(car, track)
    frame = np.where(camera.ground, track.ground_intensity, cfg.sky_intensity)
    frame[mask] = track.track_intensity
    if rng is not None and cfg.noise_amplitude > 0:
        frame = frame + cfg.noise_amplitude * rng.normal(frame.shape)
    return np.clip(frame, 0.0, 1.0)


# ---------------------------------------------------------------- environment


class DonkeySim:
    """Episodic environment: fixed start pose, sparse +1 / -10 reward."""

    def __init__(self, cfg: SimConfig | None = None, track_seed: int = 0, noise_seed: int | None = None,
                 track: Track | None = None):
        self.cfg = (cfg or SimConfig()).validate()
        self.track_seed = track_seed
        self.track = track if track is not None else generate_track(track_seed, self.cfg)
        self.camera = GroundCamera(self.cfg.camera)
        self._noise_root = SeededRng(track_seed if noise_seed is None else noise_seed).spawn(7)
        self._episode = 0
        self.car: CarState | None = None
        self.steps = 0
        self.done = True
        self.clamped_actions = 0
        self.rng = self._noise_root.spawn(0)

    @property
    def action_dim(self) -> int:
        return 2 if self.cfg.throttle_control else 1

    @property
    def episodes_started(self) -> int:
        """Episode counter that selects the per-episode noise stream; settable for resuming."""
        return self._episode

    @episodes_started.setter
    def episodes_started(self, n: int) -> None:
        self._episode = int(n)

    def reset(self, seed: int | None = None) -> StepResult:
        """Start pose: first centerline point, heading along the first segment."""
        if seed is None:
            self.rng = self._noise_root.spawn(self._episode)
        else:
            self.rng = SeededRng(seed).spawn(7)
        self._episode += 1
        speed = self.cfg.fixed_speed
        self._speed_factor = 1.0
        if self.cfg.realworld_dynamics and not self.cfg.throttle_control:
            # battery charge sets a slightly different cruising speed each episode
            self._speed_factor = float(1.0 + self.rng.uniform(-0.15, 0.15))
            speed *= self._speed_factor
        self.car = CarState(self.track.centerline[0].copy(), self.track.start_heading, speed, 0.0)
        self.steps = 0
        self.done = False
        self.clamped_actions = 0
        self._progress = 0.0
        self._last_s = 0.0
        return StepResult(self.render(), 0.0, False, self._info(True))

    def render(self) -> np.ndarray:
        return render_camera(self.car, self.track, self.cfg, self.rng, self.camera)

    def is_on_track(self) -> bool:
        return self.track.contains(self.car.position)

    def apply_action(self, action) -> None:
        a = np.atleast_1d(np.asarray(action, dtype=np.float64))
        if a.shape[0] != self.action_dim:
            raise ValueError(f"expected {self.action_dim} action value(s), got {a.shape[0]}")
        clipped = np.clip(a, -1.0, 1.0)
        if np.any(clipped != a):
            self.clamped_actions += 1
        cfg, car = self.cfg, self.car
        car.steering_angle = float(clipped[0]) * cfg.max_steer
        if cfg.throttle_control:
            thr = (float(clipped[1]) + 1.0) / 2.0
            if cfg.realworld_dynamics:
                if thr < cfg.throttle_deadzone:
                    target, tc = 0.0, cfg.speed_time_constant
                else:
                    target, tc = cfg.max_speed, cfg.speed_time_constant / 4.0
            else:
                target, tc = cfg.min_speed + thr * (cfg.max_speed - cfg.min_speed), cfg.speed_time_constant
            car.speed += (target - car.speed) * min(1.0, cfg.dt / tc)
        elif cfg.realworld_dynamics:
            car.speed = cfg.fixed_speed * self._speed_factor * float(1.0 + self.rng.uniform(-0.05, 0.05))

    def physics(self, dt: float) -> None:
        car, cfg = self.car, self.cfg
        car.heading += (car.speed / cfg.wheelbase) * math.tan(car.steering_angle) * dt
        car.position = car.position + car.speed * dt * np.array([math.cos(car.heading), math.sin(car.heading)])

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() on a finished episode; call reset()")
        self.apply_action(action)
        self.physics(self.cfg.dt)
        return self.finish_step(self.render())

    def finish_step(self, observation: np.ndarray, on_track: bool | None = None) -> StepResult:
        self.steps += 1
        dist, s = self.track.project(self.car.position)
        ds = (s - self._last_s + self.track.length / 2) % self.track.length - self.track.length / 2
        self._progress += ds
        self._last_s = s
        on = dist <= self.track.half_width if on_track is None else on_track
        if not on:
            reward, self.done = REWARD_CRASH, True
        else:
            reward = REWARD_ALIVE
            self.done = self.steps >= self.cfg.max_steps
        info = self._info(on)
        info["truncated"] = on and self.done
        return StepResult(observation, reward, self.done, info)

    def _info(self, on_track: bool) -> dict:
        return {
            "progress": self._progress / self.track.length,
            "on_track": bool(on_track),
            "steps": self.steps,
            "clamped": self.clamped_actions,
            "speed": self.car.speed,
        }


class CenterlineFollower:
    """Pure-pursuit driver with privileged access to the track geometry."""

    def __init__(self, env: DonkeySim, lookahead: float = 0.35, steer_noise: float = 0.0,
                 rng: SeededRng | None = None):
        self.env = env
        self.lookahead = lookahead
        self.steer_noise = steer_noise
        self.rng = rng

    def __call__(self, *_args) -> np.ndarray:
        env = self.env
        car = env.car
        _, s = env.track.project(car.position)
        target = env.track.point_at(s + self.lookahead)
        d = target - car.position
        alpha = math.atan2(d[1], d[0]) - car.heading
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        ld = max(float(np.hypot(*d)), 1e-6)
        delta = math.atan2(2.0 * env.cfg.wheelbase * math.sin(alpha), ld)
        steer = delta / env.cfg.max_steer
        if self.steer_noise and self.rng is not None:
            steer += self.steer_noise * float(self.rng.normal())
        steer = float(np.clip(steer, -1.0, 1.0))
        if env.cfg.throttle_control:
            return np.array([steer, -1.0])
        return np.array([steer])


def write_pgm(path, frame: np.ndarray) -> None:
    """Dump a [0,1] grayscale frame as binary PGM (P5)."""
    img = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, then exactly one whitespace byte before the pixels
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError("16-bit PGM is not supported")
    pix = data[m.end():m.end() + w * h]
    if len(pix) != w * h:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def profile_config(name: str, **overrides) -> SimConfig:
    """Named environment profiles: ``simulator`` (throttle+steering, cap 1000) and
    ``real_protocol`` (steering only at constant speed, cap 500, shorter track)."""
    if name == "simulator":
        cfg = SimConfig(throttle_control=True, max_steps=1000)
    elif name == "real_protocol":
        cfg = SimConfig(throttle_control=False, max_steps=500, realworld_dynamics=True,
                        base_radius=1.4, radius_jitter=0.15, min_curvature_radius=0.7,
                        min_length=6.0, max_length=11.0)
    else:
        raise ValueError(f"unknown env profile {name!r}")
    return replace(cfg, **overrides)
