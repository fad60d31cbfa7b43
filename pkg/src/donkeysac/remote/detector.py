"""Off-track detection by thresholding the dark track in the near field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OfftrackDetectorConfig:
    threshold: float = 0.5  # pixels darker than this count as track
    min_fraction: float = 0.5  # off track when the dark share of the ROI falls below this
    roi_start: float = 0.9  # ROI = rows from this fraction of the height to the bottom

    def validate(self) -> "OfftrackDetectorConfig":
        for name in ("threshold", "min_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.roi_start < 1.0:
            raise ValueError("roi_start must lie in [0, 1)")
        return self


def dark_fraction(frame: np.ndarray, cfg: OfftrackDetectorConfig) -> float:
    img = np.asarray(frame)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    roi = img[int(img.shape[0] * cfg.roi_start):]
    return float(np.mean(roi < cfg.threshold))


def detect_offtrack(frame: np.ndarray, cfg: OfftrackDetectorConfig = OfftrackDetectorConfig()) -> bool:
    """True when too little of the region of interest looks like track."""
    cfg.validate()
    return dark_fraction(frame, cfg) < cfg.min_fraction


def edge_poses(track, n: int, rng, offset_band: float = 0.3, heading_band: float = 0.4) -> list:
    """Car poses whose lateral offset lies within ``offset_band`` of a track edge (either side),
    with heading perturbed by up to ``heading_band`` radians from the local tangent."""
    from ..simenv import CarState

    poses = []
    for _ in range(n):
        s = rng.uniform(0.0, track.length)
        p = track.point_at(s)
        d = track.point_at(s + 0.01) - p
        h = float(np.arctan2(d[1], d[0]))
        normal = np.array([-np.sin(h), np.cos(h)])
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        off = side * rng.uniform(track.half_width - offset_band, track.half_width + offset_band)
        poses.append(CarState(p + off * normal, h + rng.uniform(-heading_band, heading_band), 0.5))
    return poses


def detector_agreement(n_poses: int = 500, seed: int = 0, track_seed: int = 0,
                       cfg: OfftrackDetectorConfig = OfftrackDetectorConfig(), sim_cfg=None) -> float:
    """Share of edge-straddling poses where the camera detector agrees with the geometric on-track test."""
    from ..numcore import SeededRng
    from ..simenv import GroundCamera, generate_track, profile_config, render_camera

    sim_cfg = sim_cfg or profile_config("real_protocol")
    track = generate_track(track_seed, sim_cfg)
    rng = SeededRng(seed)
    camera = GroundCamera(sim_cfg.camera)
    poses = edge_poses(track, n_poses, rng.spawn(0))
    noise = rng.spawn(1)
    agree = 0
    for car in poses:
        frame = render_camera(car, track, sim_cfg, noise, camera)
        agree += detect_offtrack(frame, cfg) == (not track.contains(car.position))
    return agree / n_poses
