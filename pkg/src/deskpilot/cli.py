"""Command-line entry point.

Subcommands: collect, fit-pilot, train, eval, distill, serve, replay.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import copilot as cp
from . import harness
from .config import load_config, make_env_factory, novice_profile
from .pilots import DemoDataset, KnnConfig, ScriptedPilot, fit_weights
from .tasks import progression


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="workbench YAML config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", default=None, help="override the task kind")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskpilot",
        description="desk-scale shared-autonomy workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="generate demonstrations into a demo file")
    _add_common(p)
    p.add_argument("--pilot", default="expert",
                   help="expert|novice|laggy|noisy|knn|bc (default expert)")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--demos", default=None, help="source demos for knn/bc pilots")
    p.add_argument("--checkpoint", default=None,
                   help="collect with copilot assistance from this checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-pilot", help="fit kNN distance weights from demos")
    _add_common(p)
    p.add_argument("--demos", required=True)
    p.add_argument("--out", required=True, help="output kNN pilot settings (JSON)")

    p = sub.add_parser("train", help="train the residual copilot")
    _add_common(p)
    p.add_argument("--pilot", default="novice")
    p.add_argument("--demos", default=None)
    p.add_argument("--steps", type=int, default=None, help="override total env steps")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--curve", default=None, help="optional learning-curve JSON")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="run the cross-pilot evaluation matrix")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="checkpoint path or 'none'; repeatable")
    p.add_argument("--pilots", default="laggy,noisy,expert,bc,knn")
    p.add_argument("--tasks", default=None, help="comma-separated task kinds")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--demos", default=None, help="demo file for knn/bc pilots")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--report", default=None, help="optional JSON report path")
    p.add_argument("--progression-mode", default="final", choices=["final", "max"])

    p = sub.add_parser("distill", help="data-quality comparison of two demo sets")
    _add_common(p)
    p.add_argument("--assisted", required=True)
    p.add_argument("--unassisted", required=True)
    p.add_argument("--mode", default="matched_successes",
                   choices=["matched_attempts", "matched_successes"])
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out", default=None, help="optional JSON report path")

    p = sub.add_parser("serve", help="start the live teleoperation service")
    _add_common(p)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="directory for recorded demos")
    p.add_argument("--pilot", default="human", choices=["human", "scripted"])

    p = sub.add_parser("replay", help="re-simulate a demo file and verify states")
    _add_common(p)
    p.add_argument("--demos", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint for assisted records (default: header path)")

    return parser


def _make_pilot_factory(args, cfg, env_factory):
    demos = DemoDataset.load(args.demos) if args.demos else None

    def factory(seed: int):
        return harness.make_pilot(
            args.pilot,
            env_factory().spec,
            seed=seed,
            demos=demos,
            knn_cfg=cfg.knn,
            novice_aim_sigma=cfg.pilots.novice_aim_sigma,
        )

    return factory


def cmd_collect(args) -> int:
    cfg = load_config(args.config, task=args.task)
    env_factory = make_env_factory(cfg)
    env = env_factory()
    pilot_factory = _make_pilot_factory(args, cfg, env_factory)
    pilot = pilot_factory(args.seed)
    ckpt = cp.PolicyCheckpoint.load(args.checkpoint) if args.checkpoint else None
    data = harness.collect_demos(
        env,
        pilot,
        episodes=args.episodes,
        seed=args.seed,
        copilot=ckpt,
        collector=args.pilot,
        checkpoint_path=args.checkpoint,
    )
    data.save(args.out)
    n_succ = sum(
        1 for ep in data.episodes
        if "success" in harness.episode_events(env_factory(), ep, copilot=ckpt)
    )
    print(f"wrote {len(data)} episodes ({data.num_records} records, "
          f"{n_succ} successful) to {args.out}")
    return 0


def cmd_fit_pilot(args) -> int:
    cfg = load_config(args.config, task=args.task)
    data = DemoDataset.load(args.demos)
    if len(data.episodes) < 2:
        print("error: fitting weights needs at least two episodes", file=sys.stderr)
        return 2
    weights = fit_weights(data, seed=args.seed)
    doc = {
        "demos": str(args.demos),
        "weights": list(weights),
        "k": cfg.knn.k,
        "temperature": cfg.knn.temperature,
        "chunk_min": cfg.knn.chunk_min,
        "chunk_max": cfg.knn.chunk_max,
    }
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(f"fitted weights {weights} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, task=args.task)
    env_factory = make_env_factory(cfg)
    pilot_factory = _make_pilot_factory(args, cfg, env_factory)
    ppo = cfg.ppo
    if args.steps is not None:
        ppo.total_steps = args.steps
    ckpt, curve = cp.train(
        lambda: env_factory(),
        pilot_factory,
        ppo,
        scale=cfg.residual_scale,
        seed=args.seed,
        verbose=not args.quiet,
    )
    ckpt.save(args.out)
    if args.curve:
        Path(args.curve).write_text(
            json.dumps(
                [
                    {
                        "iteration": c.iteration,
                        "env_steps": c.env_steps,
                        "mean_progression": c.mean_progression,
                        "success_rate": c.success_rate,
                        "mean_reward": c.mean_reward,
                    }
                    for c in curve
                ],
                indent=1,
            )
        )
    print(f"checkpoint -> {args.out} "
          f"(final eval progression {curve[-1].mean_progression:.3f})")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        print("error: eval needs at least one --checkpoint (or 'none')",
              file=sys.stderr)
        return 2
    cfg = load_config(args.config, task=args.task)
    env_factory = make_env_factory(cfg)
    copilots = [None if c == "none" else c for c in args.checkpoint]
    tasks = (args.tasks or cfg.task.kind).split(",")
    spec = harness.MatrixSpec(
        copilots=copilots,
        pilots=args.pilots.split(","),
        tasks=tasks,
        episodes=args.episodes,
        seed=args.seed,
        progression_mode=args.progression_mode,
    )
    demos = DemoDataset.load(args.demos) if args.demos else None
    results = harness.run_matrix(spec, env_factory, demos=demos, knn_cfg=cfg.knn)
    harness.matrix_to_csv(results, args.out)
    if args.report:
        harness.matrix_to_report(results, args.report)
    for c in results:
        print(f"{c.copilot:>24s} x {c.pilot:<7s} x {c.task:<4s} "
              f"prog {c.mean_progression:.3f}±{c.std_progression:.3f} "
              f"succ {c.success_rate:.2f} n={c.episodes}")
    print(f"matrix -> {args.out}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config, task=args.task)
    env_factory = make_env_factory(cfg)
    assisted = DemoDataset.load(args.assisted)
    unassisted = DemoDataset.load(args.unassisted)
    try:
        report = harness.distill_and_compare(
            assisted, unassisted, lambda: env_factory(), mode=args.mode,
            eval_episodes=args.episodes, seed=args.seed,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for arm in report.arms:
        print(f"{arm.label:>10s}: trained on {arm.train_episodes} successes; "
              f"grasp {arm.grasp_successes}/{arm.eval_episodes}, "
              f"insert {arm.insert_successes}/{arm.eval_episodes}, "
              f"mean progression {arm.mean_progression:.3f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {
                    "mode": report.mode,
                    "arms": [vars(a) for a in report.arms],
                },
                indent=1,
            )
        )
    return 0


def cmd_serve(args) -> int:
    from .teleopd import serve

    cfg = load_config(args.config, task=args.task)
    serve(cfg, checkpoint=args.checkpoint, record_dir=args.out, port=args.port,
          pilot_source=args.pilot)
    return 0


def cmd_replay(args) -> int:
    cfg = load_config(args.config, task=args.task)
    env_factory = make_env_factory(cfg)
    data = DemoDataset.load(args.demos)
    if data.task_kind != env_factory().spec.kind:
        print(f"error: demo file is for task {data.task_kind!r}, config builds "
              f"{env_factory().spec.kind!r}", file=sys.stderr)
        return 2
    ckpt = cp.PolicyCheckpoint.load(args.checkpoint) if args.checkpoint else None
    report = harness.replay_demo(data, env_factory(), copilot=ckpt)
    for i, ev in enumerate(report.events):
        print(f"episode {i}: events {ev}")
    print(f"max state deviation: {report.max_state_deviation:.3e}")
    if not report.ok:
        print("REPLAY MISMATCH (deviation above 1e-9)", file=sys.stderr)
        return 1
    print("replay OK")
    return 0


COMMANDS = {
    "collect": cmd_collect,
    "fit-pilot": cmd_fit_pilot,
    "train": cmd_train,
    "eval": cmd_eval,
    "distill": cmd_distill,
    "serve": cmd_serve,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
