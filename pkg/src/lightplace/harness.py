"""Closed-loop episodes and the comparison studies built on them."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .belief import BeliefParams, FactorGraphBelief
from .environment import Scenario, Simulator, generate_scenario, noise_seed
from .gp_baseline import GPParams, ResidualGPBelief
from .grid import Cell
from .lighting import ROBOT_REFLECTIONS, EmitterConfig, LightField, LightingParams, render_field
from .placement import ExactSourceModel, InterpolatedSourceModel, PlacementProblem, optimize_placement
from .planner import PlannerParams, plan
from .trigger import TriggerState, cumulative_counts, should_reconfigure

log = logging.getLogger(__name__)

RUNLOG_SCHEMA_VERSION = 1
MODELS = ("factor_graph", "residual_gp")
STUDIES = ("model_comparison", "trigger_sweep", "system_levels")


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    model: str = "factor_graph"
    trigger: str = "logprob"
    alpha: float = 1.07
    n: int = 10
    strict_trigger: bool = False
    max_steps: int | None = None  # None: the scenario's budget
    planner: PlannerParams = field(default_factory=PlannerParams)
    belief: BeliefParams | None = None  # None: defaults scaled to the scenario's P
    gp: GPParams | None = None
    sigma_sim: float | None = None  # None: 0.01 P
    placement_budget: int | None = None
    placement_restarts: int = 1
    source_model: str = "interpolated"

    def __post_init__(self):
        if self.model not in MODELS:
            raise HarnessError(f"unknown model {self.model!r}")
        if self.source_model not in ("interpolated", "exact"):
            raise HarnessError(f"unknown source_model {self.source_model!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise HarnessError("max_steps must be >= 0")
        if self.sigma_sim is not None and self.sigma_sim < 0:
            raise HarnessError("sigma_sim must be >= 0")
        self.make_trigger(1)  # validates kind and parameters

    def make_trigger(self, max_steps: int) -> TriggerState:
        return TriggerState(self.trigger, n=self.n, alpha=self.alpha, max_steps=max_steps, strict=self.strict_trigger)

    @property
    def label(self) -> str:
        return f"{self.model}+{self.make_trigger(1).label}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = None if math.isinf(self.alpha) else self.alpha
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        if "planner" in d and isinstance(d["planner"], dict):
            d["planner"] = PlannerParams(**d["planner"])
        if isinstance(d.get("belief"), dict):
            d["belief"] = BeliefParams(**d["belief"])
        if isinstance(d.get("gp"), dict):
            d["gp"] = GPParams(**d["gp"])
        if "alpha" in d and d["alpha"] is None:
            d["alpha"] = math.inf
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise HarnessError(f"unknown episode config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunLog:
    env_seed: int
    start_seed: int
    level: str
    config: dict
    max_steps: int
    steps: list[dict] = field(default_factory=list)
    configurations: list[dict] = field(default_factory=list)
    desired: list[float] = field(default_factory=list)
    achieved: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: dict | None = None
    schema_version: int = RUNLOG_SCHEMA_VERSION

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        if d.get("schema_version") != RUNLOG_SCHEMA_VERSION:
            raise HarnessError(f"unsupported runlog schema {d.get('schema_version')}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunLog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def without_timings(self) -> dict:
        d = self.to_dict()
        d.pop("timings")
        return d

    def recompute_metrics(self) -> dict:
        """Metrics from the stored fields and step records alone."""
        desired = np.array(self.desired)
        achieved_by_config = [np.array(c["achieved"]) for c in self.configurations]
        curve = [_rmse(achieved_by_config[s["config_index"]], desired) for s in self.steps]
        return {
            "final_rmse": _rmse(np.array(self.achieved), desired),
            "rmse_curve": curve,
            "cumulative_triggers": cumulative_counts(
                [{"step": s["step"]} for s in self.steps if s["reconfigured"]], self.max_steps
            ),
            "reconfigurations": sum(1 for s in self.steps if s["reconfigured"] and s["step"] > 0),
        }


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse(achieved: LightField, desired: LightField) -> float:
    """Root-mean-square difference over free cells."""
    if achieved.grid.shape != desired.grid.shape or not np.array_equal(achieved.grid.free_mask, desired.grid.free_mask):
        raise HarnessError("rmse needs fields on the same grid")
    return _rmse(achieved.free_values, desired.free_values)


# ---------------------------------------------------------------------------
# Episode
# ---------------------------------------------------------------------------


class _Episode:
    def __init__(self, scenario: Scenario, config: EpisodeConfig):
        self.sc = scenario
        self.cfg = config
        self.grid = scenario.grid
        P = scenario.params.lighting.P
        self.robot_params = LightingParams(max_reflections=ROBOT_REFLECTIONS, P=P)
        self.sim = Simulator(scenario, config.sigma_sim)
        if config.model == "factor_graph":
            self.belief = FactorGraphBelief(self.grid, config.belief or BeliefParams.for_power(P))
        else:
            self.belief = ResidualGPBelief(self.grid, config.gp or GPParams.for_grid(self.grid.spacing, P))
        if config.source_model == "interpolated":
            self.source_model = InterpolatedSourceModel(self.grid, self.robot_params)
        else:
            self.source_model = ExactSourceModel(self.grid, self.robot_params)
        self.rng = np.random.default_rng(np.random.SeedSequence([scenario.env_seed, scenario.start_seed, 53]))
        self._analytic_cache: dict[bytes, LightField] = {}

    def analytic(self, config: EmitterConfig) -> LightField:
        key = config.key()
        if key not in self._analytic_cache:
            self._analytic_cache[key] = render_field(config, self.grid.obstacles, self.grid, self.robot_params)
        return self._analytic_cache[key]

    def place(self, config: EmitterConfig, step: int):
        problem = PlacementProblem(
            self.sc.desired_field,
            self.belief.current.unknown_field(),
            self.grid,
            len(config),
            params=self.robot_params,
            source_model=self.source_model,
        )
        seed = int(np.random.SeedSequence([self.sc.env_seed, self.sc.start_seed, step, 71]).generate_state(1)[0])
        return optimize_placement(
            problem, config, self.cfg.placement_budget, seed=seed, restarts=self.cfg.placement_restarts
        )


def run_episode(scenario: Scenario, config: EpisodeConfig | None = None) -> RunLog:
    """Move, sense, update and maybe reconfigure for ``max_steps`` steps.

    Step 0 senses at the start cell and places emitters for every trigger kind.
    Module errors end the episode early with a structured ``error`` record.
    """
    config = config or EpisodeConfig()
    max_steps = scenario.max_steps if config.max_steps is None else config.max_steps
    runlog = RunLog(scenario.env_seed, scenario.start_seed, scenario.level, config.to_dict(), max_steps)
    runlog.desired = scenario.desired_field.free_values.tolist()
    timings = {"plan": 0.0, "solve": 0.0, "placement": 0.0, "render": 0.0}
    t_start = time.perf_counter()
    step = 0
    try:
        ep = _Episode(scenario, config)
        trigger = config.make_trigger(max_steps)
        emitters = scenario.initial_config
        cell: Cell = scenario.start_cell
        queue: list[str] = []

        def solve():
            t0 = time.perf_counter()
            b = ep.belief.solve()
            ll = ep.belief.log_likelihood_of(scenario.desired_field)
            timings["solve"] += time.perf_counter() - t0
            return b, ll

        def record_config(step, placement=None):
            t0 = time.perf_counter()
            truth = ep.sim.total_field(emitters)
            timings["render"] += time.perf_counter() - t0
            runlog.configurations.append(
                {
                    "step": step,
                    "emitters": emitters.to_dict(),
                    "achieved": truth.free_values.tolist(),
                    "objective": None if placement is None else placement.objective,
                    "initial_objective": None if placement is None else placement.initial_objective,
                    "evaluations": None if placement is None else placement.evaluations,
                    "warning": None if placement is None else placement.warning,
                }
            )

        def reconfigure(step):
            nonlocal emitters
            t0 = time.perf_counter()
            result = ep.place(emitters, step)
            timings["placement"] += time.perf_counter() - t0
            emitters = result.config
            ep.belief.on_reconfigure(ep.analytic(emitters))
            record_config(step, result)
            return solve()[1]

        record_config(None)
        ep.belief.rebuild_priors(ep.analytic(emitters))
        for step in range(max_steps + 1):
            rec: dict = {"step": step}
            if step > 0:
                if not queue:
                    t0 = time.perf_counter()
                    result = plan(ep.belief.current, cell, config.planner, seed=ep.rng)
                    timings["plan"] += time.perf_counter() - t0
                    queue = result.actions[: result.execute]
                    rec["plan"] = {"actions": result.actions, "execute": result.execute}
                action = queue.pop(0)
                cell = ep.grid.step(cell, action)
                rec["action"] = action
            m = ep.sim.measure(emitters, cell, noise_seed(scenario.env_seed, scenario.start_seed, step), step)
            ep.belief.add_measurement(m)
            _, ll = solve()
            rec.update(cell=list(cell), measurement=m.value, log_lik=ll)
            if step == 0:
                fire, rec["threshold"] = True, None
                ll_after = reconfigure(0)
                trigger.start(ll_after)
            else:
                rec["threshold"] = _finite_or_none(trigger.threshold()) if trigger.kind == "logprob" else None
                fire = should_reconfigure(trigger, ll, step)
                if fire:
                    ll_after = reconfigure(step)
                    trigger.observe(ll_after)
                    queue = []
            rec["reconfigured"] = fire
            rec["log_lik_after"] = ll_after if fire else None
            rec["config_index"] = len(runlog.configurations) - 1
            runlog.steps.append(rec)
        runlog.achieved = runlog.configurations[-1]["achieved"]
        runlog.metrics = runlog.recompute_metrics()
    except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
        log.exception("episode aborted at step %d", step)
        runlog.error = {
            "type": type(exc).__name__,
            "message": str(exc),
            "step": step,
            "traceback": traceback.format_exc(),
        }
    runlog.timings = {k: round(v, 4) for k, v in timings.items()}
    runlog.timings["total"] = round(time.perf_counter() - t_start, 4)
    return runlog


def _finite_or_none(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def write_episode_outputs(runlog: RunLog, scenario: Scenario, out_dir: str | Path) -> None:
    """runlog.json, per-step metrics.csv and the desired/achieved fields as CSV and PGM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runlog.save(out / "runlog.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "row", "col", "measurement", "log_lik", "reconfigured", "rmse", "cumulative_triggers"])
        curve = runlog.metrics.get("rmse_curve", [])
        cum = runlog.metrics.get("cumulative_triggers", [])
        for s in runlog.steps:
            t = s["step"]
            w.writerow(
                [t, *s["cell"], s["measurement"], s["log_lik"], int(s["reconfigured"]),
                 curve[t] if t < len(curve) else "", cum[t] if t < len(cum) else ""]
            )
    grid = scenario.grid
    fields = {"desired": scenario.desired_field}
    if runlog.achieved:
        fields["achieved"] = LightField.from_free(grid, np.array(runlog.achieved))
    for name, f in fields.items():
        f.to_csv(out / f"{name}.csv")
        f.to_pgm(out / f"{name}.pgm")


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def study_systems(study: str) -> dict[str, EpisodeConfig]:
    if study == "model_comparison":
        return {
            "factor_graph": EpisodeConfig("factor_graph", "every_n", n=10),
            "residual_gp": EpisodeConfig("residual_gp", "every_n", n=10),
        }
    if study == "trigger_sweep":
        out = {
            "first_step": EpisodeConfig("factor_graph", "first_step"),
            "last_step": EpisodeConfig("factor_graph", "last_step"),
        }
        for n in (5, 10, 20):
            out[f"every_{n}"] = EpisodeConfig("factor_graph", "every_n", n=n)
        for a in (1.0, 1.07, 1.2):
            out[f"logprob_{a:g}"] = EpisodeConfig("factor_graph", "logprob", alpha=a)
        return out
    if study == "system_levels":
        return {
            "proposed": EpisodeConfig("factor_graph", "logprob", alpha=1.07),
            "baseline": EpisodeConfig("residual_gp", "every_n", n=10),
        }
    raise HarnessError(f"unknown study {study!r}; choose from {STUDIES}")


# (reference, compared) pairs for the improvement table
STUDY_PAIRS = {
    "model_comparison": [("residual_gp", "factor_graph")],
    "trigger_sweep": [("every_10", s) for s in ("first_step", "last_step", "every_5", "every_20", "logprob_1", "logprob_1.07", "logprob_1.2")],
    "system_levels": [("baseline", "proposed")],
}


@dataclass(frozen=True)
class Trial:
    level: str
    env_seed: int
    start_seed: int
    system: str
    config: EpisodeConfig


def _run_trial(trial: Trial) -> tuple[Trial, RunLog]:
    try:
        scenario = generate_scenario(trial.env_seed, trial.start_seed, trial.level)
    except Exception as exc:  # noqa: BLE001
        rl = RunLog(trial.env_seed, trial.start_seed, trial.level, trial.config.to_dict(), trial.config.max_steps or 0)
        rl.error = {"type": type(exc).__name__, "message": str(exc), "step": None}
        return trial, rl
    return trial, run_episode(scenario, trial.config)


def trial_row(study: str, trial: Trial, runlog: RunLog) -> dict:
    return {
        "study": study,
        "level": trial.level,
        "env_seed": trial.env_seed,
        "start_seed": trial.start_seed,
        "system": trial.system,
        "final_rmse": runlog.metrics.get("final_rmse") if runlog.ok else None,
        "reconfigurations": runlog.metrics.get("reconfigurations") if runlog.ok else None,
        "wall_time": runlog.timings.get("total"),
        "error": None if runlog.ok else f"{runlog.error['type']}: {runlog.error['message']}",
    }


def summarize(rows: list[dict]) -> list[dict]:
    """Median and quartiles of final RMSE per (level, system) over successful trials."""
    groups: dict[tuple, list[float]] = {}
    order: list[tuple] = []
    for r in rows:
        key = (r["level"], r["system"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        if r["final_rmse"] is not None:
            groups[key].append(r["final_rmse"])
    out = []
    for level, system in order:
        v = np.array(groups[(level, system)])
        q1, med, q3 = (np.percentile(v, [25, 50, 75]) if len(v) else (math.nan,) * 3)
        out.append({"level": level, "system": system, "n": len(v), "median": float(med), "q1": float(q1), "q3": float(q3)})
    return out


def paired_improvements(rows: list[dict], reference: str, compared: str) -> list[dict]:
    """Per matched scenario: (reference - compared) / reference on final RMSE."""
    by_key = {(r["level"], r["env_seed"], r["start_seed"], r["system"]): r["final_rmse"] for r in rows}
    out = []
    for (level, env, start, system), ref in sorted(by_key.items(), key=lambda kv: kv[0][:3]):
        if system != reference:
            continue
        cmp_ = by_key.get((level, env, start, compared))
        if ref is None or cmp_ is None or ref == 0:
            continue
        out.append({"level": level, "env_seed": env, "start_seed": start, "reference": ref, "compared": cmp_,
                    "improvement": (ref - cmp_) / ref})
    return out


def sign_test(improvements: list[float]) -> float:
    """One-sided sign-test p-value for "improvement > 0"; ties are dropped."""
    wins = sum(1 for x in improvements if x > 0)
    losses = sum(1 for x in improvements if x < 0)
    if wins + losses == 0:
        return 1.0
    return float(stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def improvement_table(rows: list[dict], study: str) -> list[dict]:
    out = []
    levels = sorted({r["level"] for r in rows})
    for reference, compared in STUDY_PAIRS[study]:
        for level in levels:
            pairs = [p for p in paired_improvements(rows, reference, compared) if p["level"] == level]
            if not pairs:
                continue
            imp = [p["improvement"] for p in pairs]
            out.append(
                {
                    "level": level,
                    "reference": reference,
                    "compared": compared,
                    "pairs": len(imp),
                    "median_improvement": float(np.median(imp)),
                    "wins": sum(1 for x in imp if x > 0),
                    "losses": sum(1 for x in imp if x < 0),
                    "sign_test_p": sign_test(imp),
                }
            )
    return out


@dataclass
class StudyResult:
    study: str
    rows: list[dict]
    summary: list[dict]
    improvements: list[dict]
    runlogs: list[RunLog]


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_systems(
    configs: dict[str, EpisodeConfig],
    levels: tuple[str, ...],
    env_count: int,
    seed_count: int,
    max_steps: int | None = None,
    rollouts: int | None = None,
    workers: int = 1,
    env_offset: int = 0,
) -> list[tuple[Trial, RunLog]]:
    """Every named system on every (level, env, start seed); paired by construction."""
    if env_count < 1 or seed_count < 1:
        raise HarnessError("env_count and seed_count must be >= 1")
    trials = []
    for level in levels:
        for env in range(env_offset, env_offset + env_count):
            for seed in range(seed_count):
                for name, cfg in configs.items():
                    if max_steps is not None:
                        cfg = replace(cfg, max_steps=max_steps)
                    if rollouts is not None:
                        cfg = replace(cfg, planner=replace(cfg.planner, num_rollouts=rollouts))
                    trials.append(Trial(level, env, seed, name, cfg))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_trial, trials))
    return [_run_trial(t) for t in trials]


def run_study(
    study: str,
    env_count: int,
    seed_count: int,
    levels: tuple[str, ...] | None = None,
    max_steps: int | None = None,
    rollouts: int | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    systems: list[str] | None = None,
    env_offset: int = 0,
) -> StudyResult:
    """Run every system of ``study`` on ``env_count x seed_count`` scenarios per level.

    Systems share scenarios and noise seeds, so comparisons are paired.  Failed
    trials are kept with an error message and left out of the aggregates.
    """
    configs = study_systems(study)
    if systems is not None:
        missing = set(systems) - set(configs)
        if missing:
            raise HarnessError(f"systems {sorted(missing)} are not part of {study}")
        configs = {k: v for k, v in configs.items() if k in systems}
    if levels is None:
        levels = ("A", "B", "C") if study == "system_levels" else ("A",)
    results = run_systems(configs, levels, env_count, seed_count, max_steps, rollouts, workers, env_offset)
    rows = [trial_row(study, t, rl) for t, rl in results]
    summary = summarize(rows)
    improvements = improvement_table(rows, study)
    runlogs = [rl for _, rl in results]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        for t, rl in results:
            rl.save(out / "runs" / f"{t.level}_{t.env_seed}_{t.start_seed}_{t.system}.json")
        _write_csv(out / "trials.csv", rows)
        _write_csv(out / "summary.csv", summary)
        _write_csv(out / "improvement.csv", improvements)
    return StudyResult(study, rows, summary, improvements, runlogs)
