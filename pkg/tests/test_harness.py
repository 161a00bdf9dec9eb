import csv
import json

import numpy as np
import pytest

from tsclab import agent, cli, harness, netsim
from tsclab.config import VARIANTS, ConfigError, ExperimentConfig
from tsclab.diffnet import NumericError, load_checkpoint, save_checkpoint

# config -----------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    {"horizon": 3601},
    {"control_interval": 0},
    {"iterations": -1},
    {"seeds": []},
    {"variant": "everything"},
    {"variant": "classical:webster"},
    {"flow": "replay"},
    {"reward_weight": 1.0},
    {"q_scale": 0},
    {"eval_mode": "mode"},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.n_steps == 720 and cfg.classical_kind is None
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(p) == cfg
    assert ExperimentConfig.load(None) == cfg


def test_config_unknown_field_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_classical_variant_parsed():
    assert ExperimentConfig(variant="classical:maxpressure").classical_kind == "maxpressure"


# training and testing ---------------------------------------------------------------------


def test_zero_iterations_return_initial_parameters(short_cfg, tmp_path):
    cfg = short_cfg(iterations=0)
    res = harness.meta_train(cfg, 0, tmp_path / "run")
    init = harness.init_models(cfg, 0).params()
    assert res.metrics == []
    assert all(np.array_equal(init[k], v) for k, v in res.models.params().items())
    assert (tmp_path / "run" / "checkpoint.json").exists()
    with (tmp_path / "run" / "metrics.csv").open() as fh:
        assert next(csv.reader(fh)) == list(harness.METRIC_FIELDS)


def test_one_iteration_smoke(short_cfg, tmp_path):
    cfg = short_cfg()
    res = harness.meta_train(cfg, 0, tmp_path)
    (rec,) = res.metrics
    assert rec.iteration == 1 and np.isfinite(rec.avg_travel_time_s)
    assert np.isfinite(rec.elbo_loss) and np.isfinite(rec.policy_loss)
    assert rec.int_reward == 0.0  # a single intersection has no neighbors
    assert len(res.learner.vae_buffer) == 1
    back = harness.read_metrics(tmp_path / "metrics.csv")
    assert back[0].deterministic_row() == rec.deterministic_row()


def test_classical_variant_cannot_be_trained(short_cfg):
    with pytest.raises(ConfigError):
        harness.meta_train(short_cfg(variant="classical:random"))


def test_training_is_deterministic(short_cfg):
    cfg = short_cfg(2, 2, iterations=2)
    a = harness.meta_train(cfg, 5)
    b = harness.meta_train(cfg, 5)
    assert [r.deterministic_row() for r in a.metrics] == [r.deterministic_row() for r in b.metrics]


def test_frozen_policy_test_reproduces_training_episode(short_cfg):
    cfg = short_cfg(2, 2, policy_lr=0.0)
    res = harness.meta_train(cfg, 0)
    fresh = harness.init_models(cfg, 0)
    (rec,) = harness.meta_test(fresh, cfg, [0], mode="sample")
    assert rec.avg_travel_time_s == res.metrics[0].avg_travel_time_s
    assert rec.ext_reward == res.metrics[0].ext_reward


def test_meta_test_leaves_parameters_untouched(short_cfg):
    cfg = short_cfg(2, 2)
    models = harness.init_models(cfg, 0)
    before = {k: v.copy() for k, v in models.params().items()}
    harness.meta_test(models, cfg, [0, 1], mode="sample")
    harness.meta_test(models, cfg, [0], mode="greedy")
    after = models.params()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_baseline_variant_has_no_world_model(short_cfg):
    cfg = short_cfg(variant="baseline")
    models = harness.init_models(cfg, 0)
    assert models.vae is None
    res = harness.meta_train(cfg, 0)
    assert np.isnan(res.metrics[0].elbo_loss)
    assert len(res.learner.vae_buffer) == 0


def test_variant_reward_terms():
    assert harness.VARIANT_TERMS["baseline"] is None and harness.VARIANT_TERMS["latent"] is None
    assert harness.VARIANT_TERMS["latent+tran_rs"] == agent.IntrinsicTerms(reward=False, obs=True)
    assert harness.VARIANT_TERMS["latent+rew_rs"] == agent.IntrinsicTerms(reward=True, obs=False)
    assert set(harness.VARIANT_TERMS) == set(VARIANTS)


@pytest.mark.parametrize("variant,expect_int", [("latent", False), ("latent+tran_rs", True),
                                                ("full", True)])
def test_intrinsic_reward_only_for_shaped_variants(short_cfg, variant, expect_int):
    res = harness.meta_train(short_cfg(2, 2, variant=variant), 0)
    assert (res.metrics[0].int_reward < 0) == expect_int


def test_rollout_buffers_never_exceed_capacity(short_cfg):
    res = harness.meta_train(short_cfg(2, 2, rollout_capacity=7), 0)
    assert res.learner.max_rollout_len == 7
    assert all(len(b) == 0 for b in res.learner.buffers)
    # 60 steps in chunks of 7 (the last one cut short by the episode end)
    assert len(res.learner.ppo_stats) == 9


# checkpoints -------------------------------------------------------------------------


def _checkpoint(short_cfg, tmp_path):
    cfg = short_cfg(2, 2)
    harness.meta_train(cfg.replace(iterations=0), 0, tmp_path)
    return cfg, tmp_path / "checkpoint.json"


@pytest.mark.parametrize("drop", ["actor.", "critic.", "encoder."])
def test_checkpoint_missing_groups_rejected(short_cfg, tmp_path, drop):
    cfg, path = _checkpoint(short_cfg, tmp_path)
    params, meta = load_checkpoint(path)
    save_checkpoint(path, {k: v for k, v in params.items() if not k.startswith(drop)}, meta)
    with pytest.raises(harness.CheckpointError):
        harness.meta_test(path, cfg, [0])


def test_checkpoint_without_decoders_still_tests(short_cfg, tmp_path):
    cfg, path = _checkpoint(short_cfg, tmp_path)
    full = harness.meta_test(path, cfg, [0])
    params, meta = load_checkpoint(path)
    save_checkpoint(path, {k: v for k, v in params.items() if not k.startswith("dec_")}, meta)
    assert harness.meta_test(path, cfg, [0])[0].deterministic_row() == full[0].deterministic_row()


def test_missing_or_corrupt_checkpoint(tmp_path, short_cfg):
    with pytest.raises(harness.CheckpointError):
        harness.load_models(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(harness.CheckpointError):
        harness.load_models(bad)


def test_checkpoint_bytes_stable(short_cfg, tmp_path):
    cfg, path = _checkpoint(short_cfg, tmp_path)
    models, meta = harness.load_models(path)
    harness.save_models(tmp_path / "again.json", models, meta)
    assert harness.file_digest(path) == harness.file_digest(tmp_path / "again.json")


def test_checkpoint_transfers_to_larger_grid(short_cfg, tmp_path):
    _, path = _checkpoint(short_cfg, tmp_path)
    before = harness.file_digest(path)
    recs = harness.meta_test(path, short_cfg(3, 3), [0, 1])
    assert len(recs) == 2 and all(np.isfinite(r.avg_travel_time_s) for r in recs)
    assert harness.file_digest(path) == before


# classical controllers and ablation ---------------------------------------------------------


def test_classical_runs_average_over_seeds(short_cfg):
    cfg = short_cfg(2, 2, seeds=[0, 1, 2])
    recs = harness.run_classical(cfg, "maxpressure")
    assert [r.seed for r in recs] == [0, 1, 2]
    assert harness.mean_travel_time(recs) == pytest.approx(np.mean([r.avg_travel_time_s for r in recs]))
    with pytest.raises(ConfigError):
        harness.run_classical(cfg, "webster")


def test_classical_without_vehicles_has_no_travel_time(short_cfg):
    cfg = short_cfg(rate=0.0)
    with pytest.raises(netsim.SimError):
        harness.run_classical(cfg, "fixedtime")


def test_small_ablation_shape(short_cfg, tmp_path):
    cfg = short_cfg(1, 2, horizon=100.0)
    table = harness.run_ablation(cfg, seeds=[0], scenarios=["replay"])
    assert list(table.rows) == list(VARIANTS)
    assert all(len(v) == 1 and np.isfinite(v[0]) for v in table.rows.values())
    assert table.int_reward["latent"] == 0.0 and table.int_reward["baseline"] == 0.0
    assert table.int_reward["full"] > 0.0
    md = table.to_markdown().splitlines()
    assert len(md) == 2 + len(VARIANTS)
    table.to_csv(tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + len(VARIANTS)


def test_plot_writes_png(short_cfg, tmp_path):
    res = harness.meta_train(short_cfg(iterations=2), 0)
    harness.plot_metrics(res.metrics, tmp_path / "p.png", {"random": 80.0})
    assert (tmp_path / "p.png").read_bytes()[:4] == b"\x89PNG"


# command line --------------------------------------------------------------------------------


def _write_cfg(cfg, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return str(p)


def test_cli_train_eval_baseline(short_cfg, tmp_path, capsys):
    conf = _write_cfg(short_cfg(), tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", conf, "--out", str(out), "--quiet", "--plot"]) == 0
    with (out / "metrics.csv").open() as fh:
        assert next(csv.reader(fh)) == list(harness.METRIC_FIELDS)
    assert (out / "training.png").exists()
    assert cli.main(["eval", "--ckpt", str(out / "checkpoint.json"), "--config", conf,
                     "--out", str(tmp_path / "eval.csv")]) == 0
    assert len(harness.read_metrics(tmp_path / "eval.csv")) == 1
    assert cli.main(["baseline", "--kind", "random", "--config", conf, "--seeds", "0", "1"]) == 0
    assert "mean over 2 seed(s)" in capsys.readouterr().out


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"horizon": 7}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", "--ckpt", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["baseline", "--kind", "nonsense"]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_numeric_failure_exit_3(short_cfg, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(harness, "meta_train", boom)
    conf = _write_cfg(short_cfg(), tmp_path)
    assert cli.main(["train", "--config", conf, "--out", str(tmp_path)]) == 3


def test_cli_gradcheck_threshold(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_gradient_checks", lambda seed: {"elbo": 1e-6, "ppo": 1e-7})
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(cli, "run_gradient_checks", lambda seed: {"elbo": 3e-3, "ppo": 1e-7})
    assert cli.main(["gradcheck"]) == 3
