import json
import os

import numpy as np
import pytest

import flowcritic.studies as studies
from flowcritic.agent import TrainingError
from flowcritic.data import GMM_MEANS, bandit_true_q, make_bandit_dataset
from flowcritic.nn import load_checkpoint
from flowcritic.runio import ConfigError, RunConfig, read_metrics
from flowcritic.studies import (
    action_grid_2d,
    bandit_action_grid,
    eval_density,
    gap_region_excess,
    high_mode_concentration,
    load_agent_from_checkpoint,
    load_or_generate_dataset,
    mode_coverage,
    run_bandit_compare,
    run_density_study,
    run_finetune,
    run_tabular_verify,
    run_train,
    tabular_property_suite,
)

TINY_TRAIN = {
    "steps": 10, "batch_size": 16, "proxy_steps": 20, "log_every": 2,
    "actor_widths": "8,8", "critic_widths": "8,8", "proxy_widths": "8,8",
}
TINY_DATA = {"kind": "bandit", "n": 200}


def test_action_grid_shape_and_corners():
    grid = action_grid_2d(5)
    assert grid.shape == (25, 2)
    assert np.array_equal(grid[0], [-1.5, -1.5])
    assert np.array_equal(grid[-1], [1.5, 1.5])
    # x varies fastest
    assert np.array_equal(grid[1], [-0.75, -1.5])


def test_mode_coverage_counts_neighborhoods():
    near = GMM_MEANS + 0.01
    far = np.zeros((4, 2))
    assert mode_coverage(near) == 1.0
    assert mode_coverage(far) == 0.0
    assert mode_coverage(np.vstack([near, far])) == 0.5


def test_high_mode_concentration():
    a = np.array([-0.5, -0.45, -0.64, 0.5])
    assert high_mode_concentration(a) == 0.75


class _OffsetCritic:
    """Returns true Q plus a constant, making the gap excess that constant."""

    def __init__(self, offset):
        self.offset = offset

    def online_np(self, states, actions):
        return bandit_true_q(actions[:, 0]) + self.offset


def test_gap_region_excess_exact_on_synthetic_critic():
    assert gap_region_excess(_OffsetCritic(1.25)) == pytest.approx(1.25, abs=1e-12)
    assert gap_region_excess(_OffsetCritic(-2.0)) == pytest.approx(-2.0, abs=1e-12)


def test_bandit_action_grid_covers_box():
    grid = bandit_action_grid(41)
    assert grid.shape == (41, 1)
    assert grid[0, 0] == -1.0 and grid[-1, 0] == 1.0


def test_load_or_generate_dataset_paths(tmp_path):
    config = RunConfig(tag="train", seed=5, data={"kind": "bandit", "n": 50})
    ds = load_or_generate_dataset(config, default_kind="bandit")
    assert len(ds) == 50
    # same config, same bytes
    again = load_or_generate_dataset(config, default_kind="bandit")
    assert np.array_equal(ds.actions, again.actions)
    with pytest.raises(ConfigError):
        load_or_generate_dataset(RunConfig(tag="train", data={"kind": "maze"}), "bandit")


def test_tabular_property_suite_small():
    suite = tabular_property_suite(seed=3, n_instances=9)
    assert suite["all_pass"]
    assert len(suite["per_instance"]) == 9
    gammas = {row["gamma"] for row in suite["per_instance"]}
    assert gammas == {0.5, 0.9, 0.99}
    for prop in suite["properties"].values():
        assert prop["pass"]
        assert np.isfinite(prop["worst"])


def test_run_tabular_verify_artifacts(tmp_path):
    report = run_tabular_verify(
        RunConfig(tag="tabular-verify", seed=1, run={"instances": 6}),
        out_override=str(tmp_path),
    )
    assert report.passed
    rows = read_metrics(str(tmp_path / "contraction_factors.csv"))
    assert len(rows) == 6
    doc = json.load(open(report.summary_path))
    assert doc["summary"]["all_pass"]
    assert set(doc["summary"]["properties"]) == {
        "contraction", "fixed_point_cross_check", "split_unbiased",
        "split_conservative", "improvement_support", "occupancy_identity",
    }


DENSITY_RUN = {
    "proxy_steps": 100, "proxy_widths": "16,16", "widths": "16,16",
    "gaussian_steps": 80, "cvae_steps": 80, "ddpm_steps": 80,
    "grid_res": 7, "samples": 40, "elbo_draws": 4, "holdout": 40, "batch_size": 64,
}


def test_run_density_study_artifacts(tmp_path):
    config = RunConfig(tag="density-study", seed=0, data={"kind": "gmm2d", "n": 400}, run=dict(DENSITY_RUN))
    report = run_density_study(config, out_override=str(tmp_path))
    doc = json.load(open(report.summary_path))
    summary = doc["summary"]
    assert set(summary["contrast_gap"]) == {"flow", "gaussian", "cvae", "ddpm"}
    assert summary["failures"] == {}
    rows = read_metrics(str(tmp_path / "density_grid.csv"))
    assert len(rows) == 4 * 7 * 7
    for name in ("flow", "gaussian", "cvae", "ddpm"):
        assert sum(1 for r in rows if r["model"] == name) == 49
        assert len(read_metrics(str(tmp_path / f"samples_{name}.csv"))) == 40
    assert set(summary["checks"]) >= {"gaussian_peak_near_center", "flow_contrast_exceeds_ddpm"}


def test_run_density_study_survives_one_model_failing(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingError("cvae loss diverged")

    monkeypatch.setattr(studies, "cvae_fit", boom)
    config = RunConfig(tag="density-study", seed=0, data={"kind": "gmm2d", "n": 300}, run=dict(DENSITY_RUN))
    report = run_density_study(config, out_override=str(tmp_path))
    summary = json.load(open(report.summary_path))["summary"]
    assert summary["failures"] == {"cvae": "cvae loss diverged"}
    assert "cvae" not in summary["contrast_gap"]
    assert "gaussian" in summary["contrast_gap"]
    assert not report.passed
    assert not os.path.exists(tmp_path / "samples_cvae.csv")


def test_run_density_study_rejects_bandit_data(tmp_path):
    config = RunConfig(tag="density-study", seed=0, data={"kind": "bandit", "n": 100})
    with pytest.raises(ConfigError):
        run_density_study(config, out_override=str(tmp_path))


def test_run_bandit_compare_artifacts(tmp_path):
    config = RunConfig(
        tag="bandit-compare", seed=0, data={"kind": "bandit", "n": 300},
        run={"steps": 40, "proxy_steps": 40, "batch_size": 32, "widths": "8,8",
             "samples": 60, "grid_res": 21, "behavior_steps": 40},
    )
    report = run_bandit_compare(config, out_override=str(tmp_path))
    summary = json.load(open(report.summary_path))["summary"]
    assert set(summary["methods"]) == {"agent", "fql-weak", "fql-strong", "cql", "svr"}
    for block in summary["methods"].values():
        assert np.isfinite(block["gap_region_excess"])
        assert 0.0 <= block["high_mode_concentration"] <= 1.0
    q_rows = read_metrics(str(tmp_path / "q_curves.csv"))
    assert len(q_rows) == 5 * 21
    samples = read_metrics(str(tmp_path / "actor_samples.csv"))
    assert len(samples) == 5 * 60
    ratios = read_metrics(str(tmp_path / "svr_is_ratio.csv"))
    assert len(ratios) == 21
    assert all(0.0 <= r["ratio"] <= 1e4 for r in ratios)
    assert set(summary["checks"]) == {
        "svr_ratio_reaches_clip", "agent_concentrates_on_high_mode",
        "agent_gap_below_fql", "cql_underestimates_gap",
    }


def _checkpoint_tensors(path):
    tensors, meta = load_checkpoint(str(path))
    return tensors, meta


def test_run_train_resume_is_bitwise(tmp_path):
    data, algo = dict(TINY_DATA), dict(TINY_TRAIN)
    ref = tmp_path / "ref"
    split = tmp_path / "split"

    run_train(RunConfig(tag="train", seed=3, data=data, algo=algo, run={}), out_override=str(ref))

    first = dict(algo, steps=4)
    run_train(RunConfig(tag="train", seed=3, data=data, algo=first, run={"checkpoint_every": 4}),
              out_override=str(split))
    run_train(RunConfig(tag="train", seed=3, data=data, algo=algo, run={"resume": True}),
              out_override=str(split))

    ta, ma = _checkpoint_tensors(ref / "checkpoint.json")
    tb, mb = _checkpoint_tensors(split / "checkpoint.json")
    assert set(ta) == set(tb)
    for key in ta:
        assert np.array_equal(ta[key], tb[key]), key
    assert ma["rng_state"] == mb["rng_state"]
    assert ma["opt_t"] == mb["opt_t"]
    assert (ref / "metrics.csv").read_text() == (split / "metrics.csv").read_text()


def test_run_train_metrics_row_count(tmp_path):
    algo = dict(TINY_TRAIN, steps=10, log_every=2)
    run_train(RunConfig(tag="train", seed=0, data=dict(TINY_DATA), algo=algo, run={}),
              out_override=str(tmp_path))
    rows = read_metrics(str(tmp_path / "metrics.csv"))
    assert [r["step"] for r in rows] == [2, 4, 6, 8, 10]


def test_checkpoint_loads_without_training_state(tmp_path):
    run_train(RunConfig(tag="train", seed=1, data=dict(TINY_DATA), algo=dict(TINY_TRAIN), run={}),
              out_override=str(tmp_path))
    agent, proxy, _, meta = load_agent_from_checkpoint(str(tmp_path / "checkpoint.json"))
    assert meta["step"] == 10
    states = np.zeros((8, 1))
    actions = agent.actor.sample_np(states, np.random.default_rng(0))
    assert actions.shape == (8, 1)
    assert np.all(np.abs(actions) <= 1.0)
    q = agent.critics.online_np(states, actions)
    assert q.shape == (8,) and np.all(np.isfinite(q))


@pytest.fixture()
def offline_checkpoint(tmp_path):
    out = tmp_path / "offline"
    run_train(RunConfig(tag="train", seed=2, data=dict(TINY_DATA), algo=dict(TINY_TRAIN), run={}),
              out_override=str(out))
    return str(out / "checkpoint.json")


def test_run_finetune_resume_is_bitwise(tmp_path, offline_checkpoint):
    algo = {"steps": 8, "batch_size": 16, "log_every": 2}
    base_run = {"checkpoint": offline_checkpoint}
    ref = tmp_path / "ref"
    split = tmp_path / "split"

    run_finetune(RunConfig(tag="finetune", seed=9, data=dict(TINY_DATA), algo=dict(algo), run=dict(base_run)),
                 out_override=str(ref))

    first = dict(algo, steps=3)
    run_finetune(RunConfig(tag="finetune", seed=9, data=dict(TINY_DATA), algo=first,
                           run=dict(base_run, checkpoint_every=3)),
                 out_override=str(split))
    run_finetune(RunConfig(tag="finetune", seed=9, data=dict(TINY_DATA), algo=dict(algo),
                           run=dict(base_run, resume=True)),
                 out_override=str(split))

    ta, ma = _checkpoint_tensors(ref / "checkpoint.json")
    tb, mb = _checkpoint_tensors(split / "checkpoint.json")
    assert set(ta) == set(tb)
    for key in ta:
        assert np.array_equal(ta[key], tb[key]), key
    assert ma["rng_state"] == mb["rng_state"]
    assert ma["replay_tail"] == mb["replay_tail"] == 8
    assert ma["concentration_start"] == mb["concentration_start"]
    assert (ref / "metrics.csv").read_text() == (split / "metrics.csv").read_text()

    ref_doc = json.load(open(ref / "finetune_report.json"))
    split_doc = json.load(open(split / "finetune_report.json"))
    assert ref_doc["summary"]["concentration_final"] == split_doc["summary"]["concentration_final"]
    assert split_doc["summary"]["resumed_from"] == 3


def test_run_finetune_requires_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        run_finetune(RunConfig(tag="finetune", seed=0, data=dict(TINY_DATA), algo={"steps": 2}, run={}),
                     out_override=str(tmp_path))


def test_run_finetune_rejects_gmm_data(tmp_path, offline_checkpoint):
    config = RunConfig(tag="finetune", seed=0, data={"kind": "gmm2d", "n": 100},
                       algo={"steps": 2}, run={"checkpoint": offline_checkpoint})
    with pytest.raises(ConfigError):
        run_finetune(config, out_override=str(tmp_path))


def test_eval_density_scores_dataset(tmp_path, offline_checkpoint):
    dataset = make_bandit_dataset(120, np.random.default_rng(8))
    summary = eval_density(offline_checkpoint, dataset, str(tmp_path / "ed"))
    assert summary["n"] == 120
    assert np.isfinite(summary["mean"]) and np.isfinite(summary["std"])
    rows = read_metrics(summary["csv"])
    assert len(rows) == 120
