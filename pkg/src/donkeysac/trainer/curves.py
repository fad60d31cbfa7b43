"""Learning-curve aggregation across seeds: CSV table plus an SVG band plot."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .run import CONFIG_FILE, MetricsRow, read_metrics

CURVE_HEADER = ["mode", "step", "mean_return", "std_return", "n_seeds"]
# keys allowed to differ between runs that are plotted together
_VARYING = ("seeds", "mode", "vae_checkpoint")


@dataclass
class CurveRow:
    mode: str
    step: int
    mean_return: float
    std_return: float
    n_seeds: int


def return_at_steps(rows: list[MetricsRow], step_points: np.ndarray, smooth: int = 1) -> np.ndarray:
    """Return of the latest episode finished at or before each step point (NaN before the first one).

    ``smooth`` > 1 replaces episode returns by their trailing moving average first.
    """
    steps = np.array([r.steps for r in rows])
    rets = np.array([r.episode_return for r in rows], dtype=np.float64)
    if smooth > 1 and len(rets):
        c = np.cumsum(np.insert(rets, 0, 0.0))
        k = np.arange(1, len(rets) + 1)
        lo = np.maximum(k - smooth, 0)
        rets = (c[k] - c[lo]) / (k - lo)
    idx = np.searchsorted(steps, step_points, side="right") - 1
    out = np.full(len(step_points), np.nan)
    ok = idx >= 0
    out[ok] = rets[idx[ok]]
    return out


def _load_run(path) -> tuple[RunConfig, list[MetricsRow]]:
    p = Path(path)
    metrics = p if p.is_file() else p / "metrics.csv"
    cfg_path = metrics.parent / CONFIG_FILE
    if not cfg_path.exists():
        raise FileNotFoundError(f"no {CONFIG_FILE} next to {metrics}")
    return RunConfig.from_file(cfg_path), read_metrics(metrics)


def aggregate(runs: list[tuple[RunConfig, list[MetricsRow]]], bucket: int = 1000,
              smooth: int = 1) -> list[CurveRow]:
    """Per mode and step bucket: mean and sample standard deviation of return across seeds.

    Buckets end at multiples of ``bucket`` up to the shortest run of each mode, so every
    seed contributes to every bucket.
    """
    if not runs:
        raise ValueError("at least one metrics file is required")
    ref = runs[0][0].config_hash(exclude=_VARYING)
    for cfg, _ in runs[1:]:
        if cfg.config_hash(exclude=_VARYING) != ref:
            raise ValueError("metrics files come from different configurations")
    by_mode: dict[str, list[list[MetricsRow]]] = {}
    for cfg, rows in runs:
        if not rows:
            raise ValueError("empty metrics file")
        by_mode.setdefault(cfg.mode, []).append(rows)
    out: list[CurveRow] = []
    for mode in sorted(by_mode):
        seeds = by_mode[mode]
        last = min(r[-1].steps for r in seeds)
        points = np.arange(bucket, last + 1, bucket)
        if len(points) == 0:
            points = np.array([last])
        table = np.stack([return_at_steps(r, points, smooth) for r in seeds])
        for j, step in enumerate(points):
            col = table[:, j]
            col = col[~np.isnan(col)]
            mean = float(col.mean()) if col.size else float("nan")
            std = float(col.std(ddof=1)) if col.size > 1 else 0.0
            out.append(CurveRow(mode, int(step), mean, std, int(col.size)))
    return out


def write_curves_csv(rows: list[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r.mode, r.step, repr(r.mean_return), repr(r.std_return), r.n_seeds])


def plot_curves(rows: list[CurveRow], path, title: str = "Return vs environment steps") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for mode in sorted({r.mode for r in rows}):
        sel = [r for r in rows if r.mode == mode]
        x = np.array([r.step for r in sel])
        m = np.array([r.mean_return for r in sel])
        s = np.array([r.std_return for r in sel])
        (line,) = ax.plot(x, m, label=mode.replace("_", " "))
        ax.fill_between(x, m - s, m + s, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_curves(paths, out_csv, out_svg=None, bucket: int = 1000, smooth: int = 1) -> list[CurveRow]:
    """``paths``: run directories or metrics.csv files (each with its config.txt alongside)."""
    rows = aggregate([_load_run(p) for p in paths], bucket, smooth)
    write_curves_csv(rows, out_csv)
    if out_svg is not None:
        plot_curves(rows, out_svg)
    return rows
