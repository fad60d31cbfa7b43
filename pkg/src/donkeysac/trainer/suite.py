"""Full comparison experiment: VAE pretraining, every mode on every seed, baseline, curves and summary."""

from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np

from ..sac import AgentMode
from .config import RunConfig
from .curves import emit_curves
from .run import MetricsRow, PretrainReport, evaluate_random, pretrain_vae, read_metrics, run_dir, run_training

MODES = tuple(m.value for m in AgentMode)
_PACKAGE = Path(__file__).resolve().parents[1]
# modules whose code determines training results (the CLI and plotting do not)
_BEHAVIOUR_MODULES = ("numcore", "vae.py", "sac.py", "simenv.py", "pipeline.py", "remote", "trainer/run.py",
                      "trainer/config.py", "trainer/suite.py")


def code_fingerprint() -> str:
    """Hash of the behaviour-relevant source with docstrings and comments removed."""
    h = hashlib.sha256()
    files = []
    for name in _BEHAVIOUR_MODULES:
        p = _PACKAGE / name
        files.extend(sorted(p.rglob("*.py")) if p.is_dir() else [p])
    for f in files:
        tree = ast.parse(f.read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                    and isinstance(getattr(body[0], "value", None), ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
        h.update(str(f.relative_to(_PACKAGE)).encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    k = np.arange(1, v.size + 1)
    lo = np.maximum(k - window, 0)
    return (c[k] - c[lo]) / (k - lo)


def steps_to_threshold(rows: list[MetricsRow], threshold: float, window: int = 5) -> int | None:
    """Environment steps at the first episode whose trailing ``window``-episode mean reaches ``threshold``."""
    ma = moving_average([r.episode_return for r in rows], window)
    hit = np.nonzero(ma >= threshold)[0]
    return int(rows[hit[0]].steps) if hit.size else None


def final_mean(rows: list[MetricsRow], n: int = 10) -> float:
    return float(np.mean([r.episode_return for r in rows[-n:]]))


def best_moving_average(rows: list[MetricsRow], window: int = 5, within_steps: int | None = None) -> float:
    sel = [r for r in rows if within_steps is None or r.steps <= within_steps]
    ma = moving_average([r.episode_return for r in sel], window)
    return float(ma.max()) if ma.size else float("nan")


def run_suite(cfg: RunConfig, out_dir, modes=MODES, baseline_episodes: int = 20,
              log: Callable[[str], None] = print) -> dict:
    """Runs (or resumes) everything under ``out_dir`` and writes ``summary.json``.

    Refuses a directory whose recorded code fingerprint differs from the current one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = code_fingerprint()
    marker = out / "code_fingerprint.txt"
    if marker.exists() and marker.read_text().strip() != fingerprint:
        raise ValueError(f"{out} holds results produced by different code; use a fresh directory")
    marker.write_text(fingerprint + "\n")
    (out / "suite_config.txt").write_text(cfg.to_text())
    seeds = cfg.seed_list()
    vae_path = out / "vae_pretrained.ckpt"
    needs_vae = any(AgentMode(m).needs_pretrained for m in modes)
    report = None
    if needs_vae:
        report_path = Path(str(vae_path) + ".json")
        if vae_path.exists() and report_path.exists():
            report = PretrainReport(**json.loads(report_path.read_text()))
        else:
            log("pretraining VAE ...")
            report = pretrain_vae(cfg, vae_path, seed=0)
        log(f"VAE: {report.steps} steps, converged={report.converged}, held-out MAE={report.heldout_mae:.4f}")

    runs: dict[str, dict[int, list[MetricsRow]]] = {}
    paths = []
    for mode in modes:
        mcfg = cfg.replace(mode=mode, vae_checkpoint=str(vae_path) if AgentMode(mode).needs_pretrained else "")
        for seed in seeds:
            d = run_dir(out, mcfg, seed)
            t0 = time.perf_counter()
            res = run_training(mcfg, seed, d, resume=True)
            runs.setdefault(mode, {})[seed] = res.rows
            paths.append(d)
            last = res.rows[-1] if res.rows else None
            log(f"{mode} seed {seed}: {len(res.rows)} episodes, {last.steps if last else 0} steps, "
                f"best MA5 {best_moving_average(res.rows):.1f}, final10 {final_mean(res.rows) if last else 0:.1f} "
                f"({time.perf_counter() - t0:.0f} s this call)")

    baseline = evaluate_random(cfg, baseline_episodes, seed=0)
    curves = emit_curves(paths, out / "curves.csv", out / "curves.svg")
    max_return = float(cfg.sim_config().max_steps)
    summary = {
        "config_hash": cfg.config_hash(),
        "code_fingerprint": fingerprint,
        "random_baseline_mean": baseline.mean,
        "max_return": max_return,
        "vae": asdict(report) if report else None,
        "curve_rows": len(curves),
        "modes": {},
    }
    for mode, per_seed in runs.items():
        summary["modes"][mode] = {
            str(seed): {
                "episodes": len(rows),
                "steps": rows[-1].steps if rows else 0,
                "best_ma5": best_moving_average(rows, 5, cfg.step_budget()),
                "max_return": max((r.episode_return for r in rows), default=float("nan")),
                "steps_to_half": steps_to_threshold(rows, 0.5 * max_return),
                "final10": final_mean(rows) if rows else float("nan"),
            }
            for seed, rows in per_seed.items()
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_runs(out_dir, mode: str, seeds) -> dict[int, list[MetricsRow]]:
    return {s: read_metrics(Path(out_dir) / f"{mode}_seed{s}" / "metrics.csv") for s in seeds}
