"""Command line: ``lightplace run | study | render``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .environment import generate_scenario
from .harness import MODELS, STUDIES, EpisodeConfig, run_episode, run_study, write_episode_outputs
from .lighting import render_field
from .trigger import KINDS


def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env-seed", type=int, default=0)
    p.add_argument("--start-seed", type=int, default=0)
    p.add_argument("--level", choices=("A", "B", "C"), default="A")
    p.add_argument("--out-dir", type=Path, default=Path("out"))


def _episode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--trigger", choices=KINDS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--strict-trigger", action="store_true", default=None)
    p.add_argument("--config", type=Path, help="JSON file with episode config fields")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightplace", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one closed-loop episode")
    _scenario_args(run)
    _episode_args(run)

    study = sub.add_parser("study", help="run a named comparison study")
    study.add_argument("name", choices=STUDIES)
    study.add_argument("--envs", type=int, default=5)
    study.add_argument("--seeds", type=int, default=5)
    study.add_argument("--levels", nargs="+", choices=("A", "B", "C"))
    study.add_argument("--steps", type=int)
    study.add_argument("--rollouts", type=int)
    study.add_argument("--workers", type=int, default=1)
    study.add_argument("--out-dir", type=Path, default=Path("out"))

    render = sub.add_parser("render", help="write a scenario field as CSV and PGM")
    _scenario_args(render)
    render.add_argument("--field", choices=("desired", "unknown", "initial", "truth"), default="desired")
    return parser


def episode_config(args: argparse.Namespace) -> EpisodeConfig:
    base = EpisodeConfig.from_dict(json.loads(args.config.read_text())) if args.config else EpisodeConfig()
    flags = {
        "model": args.model,
        "trigger": args.trigger,
        "alpha": args.alpha,
        "n": args.n,
        "max_steps": args.steps,
        "strict_trigger": args.strict_trigger,
    }
    cfg = replace(base, **{k: v for k, v in flags.items() if v is not None})
    if args.rollouts is not None:
        cfg = replace(cfg, planner=replace(cfg.planner, num_rollouts=args.rollouts))
    return cfg


def _cmd_run(args) -> dict:
    scenario = generate_scenario(args.env_seed, args.start_seed, args.level)
    runlog = run_episode(scenario, episode_config(args))
    write_episode_outputs(runlog, scenario, args.out_dir)
    if not runlog.ok:
        raise RuntimeError(f"episode failed at step {runlog.error['step']}: {runlog.error['message']}")
    return {"out_dir": str(args.out_dir), "final_rmse": runlog.metrics["final_rmse"],
            "reconfigurations": runlog.metrics["reconfigurations"]}


def _cmd_study(args) -> dict:
    result = run_study(
        args.name, args.envs, args.seeds, levels=tuple(args.levels) if args.levels else None,
        max_steps=args.steps, rollouts=args.rollouts, out_dir=args.out_dir, workers=args.workers,
    )
    failed = sum(1 for r in result.rows if r["error"])
    return {"out_dir": str(args.out_dir), "trials": len(result.rows), "failed": failed,
            "summary": result.summary, "improvements": result.improvements}


def _cmd_render(args) -> dict:
    sc = generate_scenario(args.env_seed, args.start_seed, args.level)
    if args.field == "desired":
        field = sc.desired_field
    elif args.field == "unknown":
        field = sc.unknown_field
    elif args.field == "initial":
        field = render_field(sc.initial_config, sc.obstacles, sc.grid, sc.params.lighting)
    else:
        field = render_field(sc.initial_config, sc.obstacles, sc.grid, sc.params.lighting) + sc.unknown_field
    args.out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.out_dir / f"{args.field}_{args.level}_{args.env_seed}_{args.start_seed}"
    field.to_csv(stem.with_suffix(".csv"))
    field.to_pgm(stem.with_suffix(".pgm"))
    return {"csv": str(stem.with_suffix(".csv")), "pgm": str(stem.with_suffix(".pgm"))}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    handler = {"run": _cmd_run, "study": _cmd_study, "render": _cmd_render}[args.command]
    try:
        out = handler(args)
    except Exception as exc:  # noqa: BLE001 - reported as structured JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(out, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
