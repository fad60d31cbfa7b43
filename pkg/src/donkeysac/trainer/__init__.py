"""Training protocol, the three agent configurations, VAE pretraining, metrics, curves and the CLI."""

from .config import PRESETS, RunConfig, parse_text
from .curves import CurveRow, aggregate, emit_curves, plot_curves, return_at_steps
from .run import (
    METRICS_HEADER,
    DatasetExhaustedError,
    EvalResult,
    MetricsRow,
    PretrainReport,
    RunResult,
    TrainingDivergedError,
    collect_frames,
    evaluate,
    evaluate_follower,
    evaluate_policy,
    evaluate_random,
    load_checkpoint_state,
    make_agent,
    make_env,
    policy_frames,
    pretrain_vae,
    read_metrics,
    reconstruction_mae,
    run_dir,
    run_episode,
    run_training,
    scripted_frames,
)
from .suite import best_moving_average, final_mean, moving_average, run_suite, steps_to_threshold

__all__ = [name for name in dir() if not name.startswith("_")]
