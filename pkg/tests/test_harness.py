import csv
import json

import numpy as np
import pytest

import lightplace.harness as harness
from lightplace.cli import main
from lightplace.environment import generate_scenario
from lightplace.grid import GridMap
from lightplace.harness import (
    EpisodeConfig,
    HarnessError,
    RunLog,
    paired_improvements,
    rmse,
    run_episode,
    run_study,
    sign_test,
    study_systems,
    summarize,
)
from lightplace.lighting import LightField
from lightplace.planner import PlannerParams

FAST = PlannerParams(num_rollouts=8, max_depth=4)


@pytest.fixture(scope="module")
def scen():
    return generate_scenario(0, 0, "A")


def test_rmse_closed_forms(open_grid):
    a = LightField.from_free(open_grid, np.linspace(0, 1, open_grid.num_free))
    assert rmse(a, a) == 0.0
    assert rmse(a + LightField.from_free(open_grid, np.full(open_grid.num_free, 0.3)), a) == pytest.approx(0.3)
    g = GridMap.build(2, 1, 0.35)
    assert rmse(LightField(g, [[3.0, 4.0]]), LightField.zeros(g)) == pytest.approx(3.5355, abs=1e-4)
    with pytest.raises(HarnessError):
        rmse(a, LightField.zeros(g))


def test_first_step_curve_flat_without_noise(scen):
    rl = run_episode(scen, EpisodeConfig("factor_graph", "first_step", max_steps=6, sigma_sim=0.0, planner=FAST))
    assert rl.ok
    curve = rl.metrics["rmse_curve"]
    assert len(set(curve)) == 1
    assert rl.metrics["final_rmse"] == curve[-1]
    assert rl.metrics["reconfigurations"] == 0


def test_episode_is_deterministic_and_auditable(scen, tmp_path):
    cfg = EpisodeConfig("factor_graph", "every_n", n=2, max_steps=5, planner=FAST)
    a = run_episode(scen, cfg)
    b = run_episode(scen, cfg)
    assert a.without_timings() == b.without_timings()
    assert [s["step"] for s in a.steps] == list(range(6))
    assert a.metrics == a.recompute_metrics()
    assert a.metrics["reconfigurations"] == 2
    assert a.metrics["cumulative_triggers"] == [0, 0, 1, 1, 2, 2]
    a.save(tmp_path / "r.json")
    back = RunLog.load(tmp_path / "r.json")
    assert back.to_dict() == json.loads(a.to_json())
    for s in a.steps[1:]:
        cell = tuple(s["cell"])
        assert scen.grid.is_free(cell)


def test_gp_episode_and_logprob_records(scen):
    rl = run_episode(scen, EpisodeConfig("residual_gp", "logprob", alpha=1.07, max_steps=4, planner=FAST))
    assert rl.ok
    assert rl.steps[0]["reconfigured"] and rl.steps[0]["log_lik_after"] is not None
    for s in rl.steps[1:]:
        if s["reconfigured"]:
            assert s["log_lik"] < s["threshold"]


def test_module_error_recorded(scen, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("planner exploded")

    monkeypatch.setattr(harness, "plan", boom)
    rl = run_episode(scen, EpisodeConfig(max_steps=3, planner=FAST))
    assert not rl.ok
    assert rl.error["type"] == "RuntimeError" and rl.error["step"] == 1
    assert [s["step"] for s in rl.steps] == [0]


def test_config_validation_and_round_trip():
    with pytest.raises(HarnessError):
        EpisodeConfig(model="kriging")
    with pytest.raises(ValueError):
        EpisodeConfig(trigger="logprob", alpha=0.5)
    cfg = EpisodeConfig("residual_gp", "every_n", n=7, planner=FAST)
    assert EpisodeConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(HarnessError):
        EpisodeConfig.from_dict({"modle": "factor_graph"})


def test_study_systems():
    assert set(study_systems("model_comparison")) == {"factor_graph", "residual_gp"}
    sweep = study_systems("trigger_sweep")
    assert set(sweep) == {"first_step", "last_step", "every_5", "every_10", "every_20", "logprob_1", "logprob_1.07", "logprob_1.2"}
    assert all(c.model == "factor_graph" for c in sweep.values())
    levels = study_systems("system_levels")
    assert (levels["proposed"].model, levels["proposed"].trigger, levels["proposed"].alpha) == ("factor_graph", "logprob", 1.07)
    assert (levels["baseline"].model, levels["baseline"].trigger, levels["baseline"].n) == ("residual_gp", "every_n", 10)
    with pytest.raises(HarnessError):
        study_systems("nonsense")


def test_single_trial_study_summary_and_audit(tmp_path):
    res = run_study("model_comparison", 1, 1, max_steps=3, rollouts=5, out_dir=tmp_path)
    assert len(res.rows) == 2 and all(r["error"] is None for r in res.rows)
    for row, summ in zip(res.rows, res.summary):
        assert summ["n"] == 1
        assert summ["median"] == summ["q1"] == summ["q3"] == row["final_rmse"]
    # every summary number is recomputable from the per-trial logs on disk
    rows = []
    for path in sorted((tmp_path / "runs").glob("*.json")):
        rl = RunLog.load(path)
        system = path.stem.split("_", 3)[3]
        rows.append({"level": rl.level, "env_seed": rl.env_seed, "start_seed": rl.start_seed,
                     "system": system, "final_rmse": rl.recompute_metrics()["final_rmse"]})
    recomputed = {(s["level"], s["system"]): s["median"] for s in summarize(rows)}
    with open(tmp_path / "summary.csv") as fh:
        for s in csv.DictReader(fh):
            assert float(s["median"]) == pytest.approx(recomputed[(s["level"], s["system"])], rel=1e-12)
    imp = list(csv.DictReader(open(tmp_path / "improvement.csv")))
    assert imp[0]["reference"] == "residual_gp" and imp[0]["compared"] == "factor_graph"


def test_paired_improvement_and_sign_test():
    rows = []
    for env, (ref, new) in enumerate([(2.0, 1.0), (1.0, 1.1), (4.0, 3.0)]):
        rows.append({"level": "A", "env_seed": env, "start_seed": 0, "system": "base", "final_rmse": ref})
        rows.append({"level": "A", "env_seed": env, "start_seed": 0, "system": "new", "final_rmse": new})
    imp = [p["improvement"] for p in paired_improvements(rows, "base", "new")]
    assert imp == pytest.approx([0.5, -0.1, 0.25])
    assert sign_test([1, 1, 1, 1]) == pytest.approx(1 / 16)
    assert sign_test([0.0, 0.0]) == 1.0


def test_failed_trial_kept_and_excluded(monkeypatch):
    def failing(trial):
        rl = RunLog(trial.env_seed, trial.start_seed, trial.level, trial.config.to_dict(), 0)
        rl.error = {"type": "X", "message": "nope", "step": 0}
        return trial, rl

    monkeypatch.setattr(harness, "_run_trial", failing)
    res = run_study("system_levels", 1, 1, levels=("A",))
    assert all(r["error"] == "X: nope" for r in res.rows)
    assert all(s["n"] == 0 for s in res.summary)


def test_cli_run_and_render(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--steps", "2", "--rollouts", "5", "--trigger", "every_n", "--n", "1", "--out-dir", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["reconfigurations"] == 2
    for name in ("runlog.json", "metrics.csv", "desired.csv", "desired.pgm", "achieved.csv", "achieved.pgm"):
        assert (out / name).exists()
    assert json.loads((out / "runlog.json").read_text())["schema_version"] == 1
    assert main(["render", "--field", "unknown", "--out-dir", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "unknown_A_0_0.pgm").exists()


def test_cli_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "residual_gp", "trigger": "first_step", "max_steps": 2}))
    assert main(["run", "--config", str(cfg), "--rollouts", "5", "--out-dir", str(tmp_path / "o")]) == 0
    log = json.loads((tmp_path / "o" / "runlog.json").read_text())
    assert log["config"]["model"] == "residual_gp" and log["max_steps"] == 2


def test_cli_errors_are_structured(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError" and err["command"] == "run"
