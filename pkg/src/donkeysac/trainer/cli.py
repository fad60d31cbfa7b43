"""Command-line entry point: ``donkeysac <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..pipeline import ControlHistory, preprocess
from ..remote import (EPISODE_END, EPISODE_RESET, ControlNode, OfftrackDetectorConfig, Publisher, TcpServer,
                      car_loop, connect, control_loop, detect_offtrack, monotonic_us)
from ..simenv import DonkeySim
from .config import PRESETS, RunConfig
from .curves import emit_curves
from .run import (PARAMS_FILE, evaluate, evaluate_follower, evaluate_random, make_agent, policy_frames,
                  pretrain_vae, run_dir, run_training, scripted_frames)
from .suite import run_suite


def _overrides(args) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if getattr(args, "preset", None):
        pairs["preset"] = args.preset
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for flag, key in (("seeds", "seeds"), ("mode", "mode"), ("env_profile", "env_profile"),
                      ("vae_checkpoint", "vae_checkpoint")):
        val = getattr(args, flag, None)
        if val is not None:
            pairs[key] = val
    return pairs


def load_config(args) -> RunConfig:
    over = _overrides(args)
    if args.config:
        return RunConfig.from_file(args.config, over)
    return RunConfig.from_pairs(over)


def _add_config_flags(p: argparse.ArgumentParser, run_flags: bool = True) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="scale preset (applied before file keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--env-profile", dest="env_profile", choices=["simulator", "real_protocol"])
    if run_flags:
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--mode", choices=["fixed_pretrained", "init_pretrained", "scratch"])
        p.add_argument("--vae-checkpoint", dest="vae_checkpoint")


def cmd_config(args) -> int:
    sys.stdout.write(load_config(args).to_text())
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args).validate()
    for seed in cfg.seed_list():
        d = run_dir(args.out, cfg, seed)

        def report(row, seed=seed):
            print(f"[{cfg.mode} seed {seed}] episode {row.episode:4d} steps {row.steps:6d} "
                  f"return {row.episode_return:7.1f} J_Q {row.j_q:.4g} J_pi {row.j_pi:.4g} J_VAE {row.j_vae:.4g}",
                  flush=True)

        res = run_training(cfg, seed, d, resume=args.resume, on_episode=report)
        print(f"seed {seed}: stopped ({res.reason}) after {len(res.rows)} episodes -> {d}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    source = policy_frames(args.from_checkpoint, cfg, args.seed) if args.from_checkpoint else scripted_frames(
        cfg, args.seed)
    report = pretrain_vae(cfg, args.out, seed=args.seed, source=source)
    print(json.dumps(asdict(report), indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    if args.policy == "agent":
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required for --policy agent")
        res = evaluate(args.checkpoint, cfg, args.episodes, args.seed)
    elif args.policy == "random":
        res = evaluate_random(cfg, args.episodes, args.seed)
    else:
        res = evaluate_follower(cfg, args.episodes, args.seed)
    print(json.dumps(dict(res.summary(), returns=res.returns), indent=2))
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = emit_curves(args.runs, out / "curves.csv", out / "curves.svg", bucket=args.bucket, smooth=args.smooth)
    print(f"{len(rows)} rows -> {out / 'curves.csv'}, plot -> {out / 'curves.svg'}")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args).replace(mode="scratch", vae_checkpoint="")
    summary = run_suite(cfg, args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_remote_car(args) -> int:
    cfg = load_config(args).replace(env_profile="real_protocol")
    env = DonkeySim(cfg.sim_config(), track_seed=cfg.track_seed if cfg.track_seed >= 0 else args.seed,
                    noise_seed=args.seed)
    stop = threading.Event()
    node = car_loop(lambda: connect(args.host, args.port), env, obs_hz=cfg.obs_hz, stop=stop,
                    duration_s=args.duration)
    print(f"car published {node.published} frames")
    return 0


def cmd_remote_trainer(args) -> int:
    """Serve one car; drive it with a saved agent (or the zero action) for a number of episodes."""
    cfg = load_config(args).replace(env_profile="real_protocol", mode="scratch", vae_checkpoint="")
    agent = None
    if args.checkpoint:
        agent = make_agent(cfg, args.seed, 1)
        agent.load_arrays(nc.load(Path(args.checkpoint) / PARAMS_FILE), with_optimizers=False)
    history = ControlHistory(1, cfg.history_length)
    detector = OfftrackDetectorConfig()
    server = TcpServer(args.bind, args.port)
    print(f"listening on {args.bind}:{server.port}", flush=True)
    channel = server.accept(timeout=args.accept_timeout)
    node = ControlNode(Publisher(channel, monotonic_us))
    channel.on_receive = node.dispatcher
    channel.start()
    preproc = cfg.preproc_config()
    try:
        for episode in range(1, args.episodes + 1):
            history.reset()
            node.obs.clear()
            node.send_episode(EPISODE_RESET, episode)
            ticks = []

            def policy(entry):
                frame = entry.value.image()
                if agent is None:
                    a = np.zeros(1)
                else:
                    a = agent.act(preprocess(frame, preproc), history.vector(), None, deterministic=True)
                history.push(a)
                ticks.append(a)
                return a

            def stop(entry):
                return detect_offtrack(entry.value.image(), detector) or len(ticks) >= cfg.sim_config().max_steps

            control_loop(channel, policy, cfg.control_hz, stop=stop, startup_timeout_s=args.startup_timeout,
                         node=node)
            node.send_episode(EPISODE_END, episode)
            print(f"episode {episode}: {len(ticks)} control ticks; {node.stats.summary()}", flush=True)
    finally:
        channel.close()
        server.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="donkeysac", description="SAC with a VAE state encoder for lane keeping")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the fully resolved configuration (all keys, documented)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("train", help="train one run per seed")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory (one sub-directory per mode and seed)")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("pretrain", help="pretrain the VAE on recorded frames")
    _add_config_flags(p, run_flags=False)
    p.add_argument("--out", required=True, help="VAE checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-checkpoint", help="record frames with a trained agent instead of the scripted driver")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("evaluate", help="deterministic rollouts of a saved agent or a reference policy")
    _add_config_flags(p, run_flags=False)
    p.add_argument("--checkpoint", help="checkpoint directory holding params.ckpt")
    p.add_argument("--policy", choices=["agent", "random", "follower"], default="agent")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("plot", help="aggregate metrics across seeds into curves.csv and curves.svg")
    p.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bucket", type=int, default=1000, help="step bucket width")
    p.add_argument("--smooth", type=int, default=1, help="trailing moving-average window in episodes")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("experiment", help="pretrain, train all modes on all seeds, plot and summarize")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("remote-car", help="car side of the remote loop over TCP")
    _add_config_flags(p, run_flags=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None, help="seconds to run (default: until disconnected)")
    p.set_defaults(fn=cmd_remote_car)

    p = sub.add_parser("remote-trainer", help="trainer side of the remote loop over TCP")
    _add_config_flags(p, run_flags=False)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--checkpoint", help="agent checkpoint directory (default: zero steering)")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--accept-timeout", type=float, default=60.0)
    p.add_argument("--startup-timeout", type=float, default=2.0)
    p.set_defaults(fn=cmd_remote_trainer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, nc.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
