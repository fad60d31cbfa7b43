import json
import math
from dataclasses import replace

import numpy as np
import pytest

from donkeysac import numcore as nc
from donkeysac import vae as vae_mod
from donkeysac.numcore import SeededRng
from donkeysac.sac import AgentMode
from donkeysac.trainer import cli
from donkeysac.trainer.config import PRESETS, RunConfig, parse_text
from donkeysac.trainer.curves import aggregate, emit_curves, return_at_steps
from donkeysac.trainer.run import (BUFFER_FILE, PARAMS_FILE, STATE_FILE, DatasetExhaustedError, MetricsRow,
                                   TrainingDivergedError, collect_frames, evaluate, evaluate_follower,
                                   evaluate_random, load_checkpoint_state, make_agent, pretrain_vae, read_metrics,
                                   run_training, scripted_frames)
from donkeysac.trainer.suite import best_moving_average, code_fingerprint, moving_average, steps_to_threshold

TINY = dict(vae_channels="4,4,4", latent_dim=4, hidden=8, batch_size=8, updates_per_episode=2, max_episodes=3,
            max_steps=40, buffer_capacity=2000, history_length=4, seeds="0")


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def without_wall(rows):
    return [replace(r, wall_seconds=0.0) for r in rows]


@pytest.fixture(scope="module")
def vae_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("vae") / "vae.ckpt"
    params = vae_mod.VaeParams(tiny().vae_config(), SeededRng(123), "float32")
    nc.save(path, params.arrays("vae/"))
    return path


# ---------------------------------------------------------------- configuration


def test_text_round_trip(tmp_path):
    cfg = tiny(gamma=0.95, single_critic=True, mode="scratch")
    p = tmp_path / "c.txt"
    p.write_text(cfg.to_text())
    assert RunConfig.from_file(p) == cfg
    assert "single_critic = true" in cfg.to_text()
    assert all(line.startswith("# ") and len(line) > 2 for line in cfg.to_text().splitlines()[::2])


def test_unknown_key_and_bad_values_rejected():
    with pytest.raises(ValueError):
        RunConfig.from_pairs({"gama": "0.9"})
    with pytest.raises(ValueError):
        RunConfig.from_pairs({"preset": "huge"})
    with pytest.raises(ValueError):
        RunConfig(mode="fixed_pretrained").validate()  # needs a VAE checkpoint
    with pytest.raises(ValueError):
        RunConfig(env_profile="moon").validate()


def test_preset_then_explicit_override():
    cfg = RunConfig.from_pairs({"preset": "desk", "batch_size": "16"})
    assert cfg.batch_size == 16 and cfg.lr == PRESETS["desk"]["lr"] and cfg.updates_per_episode == 100
    assert RunConfig.from_pairs({}) == RunConfig()


def test_defaults_match_reference_hyperparameters():
    cfg = RunConfig()
    s = cfg.sac_config()
    assert (s.gamma, s.alpha, s.tau, s.batch_size, s.updates_per_episode, s.lr) == (0.99, 0.2, 0.005, 128, 600, 1e-4)
    assert cfg.vae_config().latent_dim == 20 and cfg.history_length == 20
    assert cfg.sim_config().max_steps == 1000
    assert RunConfig(env_profile="real_protocol").sim_config().max_steps == 500


def test_config_hash_ignores_seeds_only():
    a = tiny(seeds="0,1,2")
    assert a.config_hash() == tiny(seeds="7").config_hash()
    assert a.config_hash() != tiny(gamma=0.98).config_hash()


def test_parse_text_ignores_comments():
    assert parse_text("# c\n\nlr = 0.5  \n") == {"lr": "0.5"}


def test_warmup_defaults_by_profile():
    assert RunConfig().warmup() == 0
    assert RunConfig(env_profile="real_protocol").warmup() == 5
    assert RunConfig(warmup_episodes=2).warmup() == 2
    assert RunConfig().step_budget() == 60000 and RunConfig(env_profile="real_protocol").step_budget() == 6000
    assert RunConfig(max_env_steps=10).step_budget() == 10


# ---------------------------------------------------------------- training runs


def test_same_seed_gives_identical_metrics(tmp_path):
    a = run_training(tiny(), 0, tmp_path / "a").rows
    b = run_training(tiny(), 0, tmp_path / "b").rows
    assert len(a) == 3 and without_wall(a) == without_wall(b)
    c = run_training(tiny(), 1, tmp_path / "c").rows
    assert without_wall(a) != without_wall(c)


def test_resume_is_bit_identical(tmp_path):
    full = run_training(tiny(max_episodes=4), 0, tmp_path / "full")
    part = run_training(tiny(max_episodes=4), 0, tmp_path / "resumed", stop_after=2)
    assert part.reason == "interrupted" and len(part.rows) == 2
    rest = run_training(tiny(max_episodes=4), 0, tmp_path / "resumed", resume=True)
    assert without_wall(rest.rows) == without_wall(full.rows)
    assert without_wall(read_metrics(tmp_path / "resumed" / "metrics.csv")) == without_wall(full.rows)
    a = nc.load(tmp_path / "full" / "checkpoint" / PARAMS_FILE)
    b = nc.load(tmp_path / "resumed" / "checkpoint" / PARAMS_FILE)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_refuses_a_different_config(tmp_path):
    run_training(tiny(), 0, tmp_path / "r", stop_after=1)
    with pytest.raises(ValueError):
        run_training(tiny(gamma=0.9), 0, tmp_path / "r", resume=True)


def test_step_budget_and_bookkeeping(tmp_path):
    cfg = tiny(max_episodes=1000, max_env_steps=60)
    res = run_training(cfg, 2, tmp_path / "b")
    assert res.reason == "steps"
    lengths = [r.length for r in res.rows]
    assert [r.steps for r in res.rows] == list(np.cumsum(lengths))
    assert res.rows[-1].steps >= 60 and res.rows[-2].steps < 60
    for r in res.rows:
        assert r.episode_return in (r.length - 1 - 10, r.length)
        assert (r.episode_return == r.length) == (r.length == 40)


def test_updates_per_episode_are_counted(tmp_path):
    run_training(tiny(updates_per_episode=3), 0, tmp_path / "u")
    state = load_checkpoint_state(tmp_path / "u" / "checkpoint")
    assert state["updates"] == 9 and state["critic_t"] == 9 and state["actor_t"] == 9
    assert (tmp_path / "u" / "checkpoint" / BUFFER_FILE).exists()


def test_warmup_episodes_do_not_update(tmp_path):
    rows = run_training(tiny(warmup_episodes=3, max_episodes=3), 0, tmp_path / "w").rows
    assert math.isnan(rows[0].j_q) and math.isnan(rows[1].j_q) and math.isfinite(rows[2].j_q)
    real = run_training(tiny(env_profile="real_protocol", max_episodes=2), 0, tmp_path / "rp")
    assert all(math.isnan(r.j_q) for r in real.rows)
    assert load_checkpoint_state(tmp_path / "rp" / "checkpoint")["updates"] == 0


def test_fixed_mode_leaves_the_vae_untouched(tmp_path, vae_ckpt):
    ref = nc.load(vae_ckpt)
    fixed = run_training(tiny(mode="fixed_pretrained", vae_checkpoint=str(vae_ckpt)), 0, tmp_path / "f")
    after = nc.load(tmp_path / "f" / "checkpoint" / PARAMS_FILE)
    assert all(np.array_equal(after[k], v) for k, v in ref.items())
    assert all(math.isnan(r.j_vae) for r in fixed.rows)
    run_training(tiny(mode="init_pretrained", vae_checkpoint=str(vae_ckpt)), 0, tmp_path / "i")
    joint = nc.load(tmp_path / "i" / "checkpoint" / PARAMS_FILE)
    assert any(not np.array_equal(joint[k], v) for k, v in ref.items())


def test_modes_share_everything_but_the_encoder(tmp_path, vae_ckpt):
    agents = {m: make_agent(tiny(mode=m.value, vae_checkpoint=str(vae_ckpt)), 0, 1) for m in AgentMode}
    arrays = {m: a.arrays() for m, a in agents.items()}
    for m in AgentMode:
        for k, v in arrays[AgentMode.SCRATCH].items():
            if not k.startswith(("vae/", "opt/")):
                assert np.array_equal(arrays[m][k], v), (m, k)
    # during warm-up the first episode is driven by the same random actions in every mode
    first = {}
    for m in AgentMode:
        cfg = tiny(mode=m.value, vae_checkpoint=str(vae_ckpt), warmup_episodes=2, max_episodes=1)
        first[m] = without_wall(run_training(cfg, 0, tmp_path / m.value).rows)[0]
    assert len({(r.episode_return, r.length) for r in first.values()}) == 1


def test_non_finite_loss_aborts_with_diagnostics(tmp_path, monkeypatch):
    from donkeysac.sac import Agent

    real = Agent.train_step

    def broken(self, batch, rng):
        rep = real(self, batch, rng)
        return replace(rep, critic=float("nan"))

    monkeypatch.setattr(Agent, "train_step", broken)
    with pytest.raises(TrainingDivergedError):
        run_training(tiny(), 0, tmp_path / "nan")
    assert (tmp_path / "nan" / "diagnostic" / STATE_FILE).exists()


# ---------------------------------------------------------------- analysis helpers


def rows_from(returns, lengths=None):
    lengths = lengths or [100] * len(returns)
    steps = np.cumsum(lengths)
    return [MetricsRow(i + 1, int(s), float(r), int(n), 0.0, 0.0, 0.0, 0.0)
            for i, (s, r, n) in enumerate(zip(steps, returns, lengths))]


def test_moving_average_and_thresholds():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    rows = rows_from([0, 0, 1000, 1000, 1000, 1000, 1000])
    assert steps_to_threshold(rows, 500, window=5) == 400  # partial window: (0+0+1000+1000)/4
    assert steps_to_threshold(rows, 2000) is None
    assert best_moving_average(rows, 5) == 1000.0
    assert best_moving_average(rows, 5, within_steps=300) == pytest.approx(1000 / 3)


def test_return_at_steps_holds_the_latest_episode():
    rows = rows_from([1, 2, 3], [10, 10, 10])
    assert np.allclose(return_at_steps(rows, np.array([5, 10, 25, 30])), [np.nan, 1, 2, 3], equal_nan=True)


def test_aggregate_mean_and_sample_std():
    cfgs = [tiny(seeds=str(s)) for s in range(3)]
    runs = [(c, rows_from([v] * 10)) for c, v in zip(cfgs, (100.0, 200.0, 300.0))]
    out = aggregate(runs, bucket=100)
    assert len(out) == 10
    assert all(r.mean_return == 200.0 and r.std_return == pytest.approx(100.0) and r.n_seeds == 3 for r in out)
    single = aggregate(runs[:1], bucket=250)
    assert [r.step for r in single] == [250, 500, 750, 1000] and all(r.std_return == 0.0 for r in single)


def test_aggregate_rejects_mixed_configs():
    runs = [(tiny(), rows_from([1.0])), (tiny(gamma=0.5), rows_from([1.0]))]
    with pytest.raises(ValueError):
        aggregate(runs)


def test_emit_curves_writes_csv_and_svg(tmp_path):
    for s in (0, 1):
        run_training(tiny(max_episodes=2), s, tmp_path / f"scratch_seed{s}")
    rows = emit_curves([tmp_path / "scratch_seed0", tmp_path / "scratch_seed1"], tmp_path / "c.csv",
                       tmp_path / "c.svg", bucket=10)
    assert rows and (tmp_path / "c.csv").read_text().startswith("mode,step,mean_return,std_return,n_seeds")
    assert "<svg" in (tmp_path / "c.svg").read_text()


def test_fingerprint_is_stable():
    assert code_fingerprint() == code_fingerprint() and len(code_fingerprint()) == 16


# ---------------------------------------------------------------- evaluation and pretraining


def test_reference_policies():
    follower = evaluate_follower(RunConfig(), 1, seed=0)
    assert follower.returns == [1000.0] and follower.success_rate == 1.0
    rnd = evaluate_random(tiny(max_steps=0), 5, seed=0)
    assert rnd.mean < 200
    assert evaluate_random(tiny(), 3, seed=4).returns == evaluate_random(tiny(), 3, seed=4).returns


def test_evaluate_saved_agent_is_deterministic(tmp_path):
    run_training(tiny(max_episodes=1), 0, tmp_path / "e")
    a = evaluate(tmp_path / "e" / "checkpoint", tiny(), 2, seed=0)
    b = evaluate(tmp_path / "e" / "checkpoint", tiny(), 2, seed=0)
    assert a.returns == b.returns and len(a.returns) == 2


def test_small_pretraining_is_reproducible(tmp_path):
    cfg = tiny(pretrain_images=48, pretrain_batch=8, pretrain_max_steps=12, pretrain_tracks=2)
    held = collect_frames(scripted_frames(cfg, 5), 16)
    ra = pretrain_vae(cfg, tmp_path / "a.ckpt", seed=0, heldout=held, window=4)
    rb = pretrain_vae(cfg, tmp_path / "b.ckpt", seed=0, heldout=held, window=4)
    a, b = nc.load(tmp_path / "a.ckpt"), nc.load(tmp_path / "b.ckpt")
    assert all(np.array_equal(a[k], b[k]) for k in a) and ra.heldout_mae == rb.heldout_mae
    assert ra.images == 48 and 8 <= ra.steps <= 12 and 0 < ra.heldout_mae < 1
    assert json.loads((tmp_path / "a.ckpt.json").read_text())["steps"] == ra.steps


def test_finite_frame_source_runs_dry():
    with pytest.raises(DatasetExhaustedError):
        collect_frames(iter([np.zeros((1, 40, 40))] * 3), 4)


# ---------------------------------------------------------------- command line


def tiny_flags():
    return [f"--set={k}={v}" for k, v in TINY.items() if k != "seeds"]


def test_cli_config_prints_every_key(capsys):
    assert cli.main(["config", "--preset", "desk"]) == 0
    out = capsys.readouterr().out
    assert "batch_size = 32" in out and "preset = desk" in out


def test_cli_train_plot_evaluate(tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["train", "--seeds", "0,1", "--out", str(out), *tiny_flags(), "--set", "max_episodes=2"]) == 0
    assert len(read_metrics(out / "scratch_seed1" / "metrics.csv")) == 2
    assert cli.main(["plot", str(out / "scratch_seed0"), str(out / "scratch_seed1"), "--out", str(tmp_path / "p"),
                     "--bucket", "20"]) == 0
    assert (tmp_path / "p" / "curves.svg").exists() and (tmp_path / "p" / "curves.csv").exists()
    capsys.readouterr()
    assert cli.main(["evaluate", "--checkpoint", str(out / "scratch_seed0" / "checkpoint"), "--episodes", "1",
                     *tiny_flags()]) == 0
    assert json.loads(capsys.readouterr().out)["episodes"] == 1


def test_cli_reports_bad_input():
    assert cli.main(["config", "--set", "nonsense=1"]) == 2
    assert cli.main(["evaluate", "--checkpoint", "/nonexistent", "--episodes", "1"]) == 2
