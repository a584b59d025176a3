"""Command-line front door: dataset generation, experiment runs, sweeps,
evaluation, point-set transfer, and the annotation service.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import evaluation, segmodel, synthgen
from .driver import ExperimentConfig, Runner
from .errors import ApisLabError, ConfigError, GenerationExhausted
from .sweep import run_sweep

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _runs_root(args) -> str:
    if getattr(args, "runs_root", None):
        return args.runs_root
    return os.environ.get("APIS_RUN_ROOT", "runs")


def _load_data(data_dir: str):
    train, train_truths = synthgen.read_dataset(os.path.join(data_dir, "train"))
    test, test_truths = synthgen.read_dataset(os.path.join(data_dir, "test"))
    return train, train_truths, test, test_truths


def _scene_config(args) -> synthgen.SceneConfig:
    return synthgen.SceneConfig(
        image_size=args.image_size,
        instances_min=args.instances_min,
        instances_max=args.instances_max,
        noise_sigma=args.noise_sigma,
        min_visible_area=args.min_visible_area,
    )


def cmd_gen_data(args) -> int:
    if args.train < 1:
        raise ConfigError("--train must be >= 1")
    if args.test < 1:
        raise ConfigError("--test must be >= 1")
    config = _scene_config(args)
    train, train_truths, test, test_truths = synthgen.generate_dataset(args.seed, args.train, args.test, config)
    synthgen.write_dataset(os.path.join(args.out, "train"), train, train_truths)
    synthgen.write_dataset(os.path.join(args.out, "test"), test, test_truths)
    print(f"train: {args.train} images, Q = {train.q_total}")
    print(f"test: {args.test} images, Q = {test.q_total}")
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    merged: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            merged = json.load(f)
    overrides = {
        "name": args.name,
        "strategy": args.strategy,
        "mode": args.mode,
        "afis_metric": args.metric,
        "steps": args.steps,
        "seed": args.seed,
        "schedule": args.schedule,
        "num_heads": args.heads,
        "budget_points": args.budget_points,
        "subset_mode": args.subset_mode,
        "from_scratch": args.from_scratch,
        "transfer_source": getattr(args, "source", None),
    }
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if "name" not in merged:
        merged["name"] = f"{merged.get('strategy', 'entropy')}_seed{merged.get('seed', 0)}"
    return ExperimentConfig.from_json(merged)


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    data = _load_data(args.data)
    run_dir = os.path.join(_runs_root(args), cfg.name)
    report = Runner(cfg, *data, run_dir=run_dir).run()
    print(f"run directory: {run_dir}")
    if report.error:
        print(f"aborted after step {report.completed_steps}: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    final = report.metrics[-1]
    print(f"final step {final['step']}: test_map = {final['test_map']:.4f}, mean_iou = {final['test_mean_iou']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 2:
        raise ConfigError("--seeds must list at least 2 seeds")
    strategies = args.strategies.split(",")
    schedules = args.schedules.split(",") if args.schedules else None
    base = ExperimentConfig(steps=args.steps, schedule=schedules[0] if schedules else "default")
    data = _load_data(args.data)
    out_dir = os.path.join(_runs_root(args), args.name)
    report = run_sweep(
        base, strategies, seeds, *data, out_dir=out_dir,
        schedules=schedules, transfer_heads=args.transfer_heads,
    )
    print(f"sweep directory: {out_dir}")
    print(json.dumps(report["directional"], indent=1, sort_keys=True))
    if report["failures"]:
        print(f"{len(report['failures'])} run(s) failed", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    params = segmodel.load_checkpoint(args.checkpoint)
    _, _, test, test_truths = _load_data(args.data)
    report = evaluation.dataset_map(params, test, test_truths)
    print(json.dumps(
        {
            "test_map": report.map,
            "test_mean_iou": report.mean_iou,
            "ap_small": report.ap_small,
            "ap_medium": report.ap_medium,
            "ap_large": report.ap_large,
        },
        indent=1,
    ))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--name", default=None, help="run name (directory under the runs root)")
    p.add_argument("--strategy", default=None)
    p.add_argument("--mode", default=None, choices=["A", "M", "S"])
    p.add_argument("--metric", default=None, help="AFIS metric")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--schedule", default=None, choices=list(("short", "default", "long")))
    p.add_argument("--heads", type=int, default=None, help="anchor head count K_A")
    p.add_argument("--budget-points", type=int, default=None, help="per-step point budget (instance subset)")
    p.add_argument("--subset-mode", default=None, choices=["random", "min_det_loss"])
    p.add_argument("--from-scratch", action="store_true", default=None)
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    p.add_argument("--runs-root", default=None, help="overrides $APIS_RUN_ROOT")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apislab")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--instances-min", type=int, default=1)
    g.add_argument("--instances-max", type=int, default=6)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--min-visible-area", type=int, default=25)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run one experiment")
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("transfer", help="re-train a target config on a source run's point sets")
    _add_run_flags(t)
    t.add_argument("--source", required=True, help="source run directory with points_step_<s>.json")
    t.set_defaults(func=cmd_run, strategy_override="transfer")

    s = sub.add_parser("sweep", help="run a strategies x seeds cross product")
    s.add_argument("--data", required=True)
    s.add_argument("--name", default="sweep")
    s.add_argument("--strategies", required=True, help="comma-separated strategy tokens")
    s.add_argument("--seeds", required=True, help="comma-separated seed list (>= 2)")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--schedules", default=None, help="comma-separated schedules to compare")
    s.add_argument("--transfer-heads", type=int, default=None, help="also run transfer to this head count")
    s.add_argument("--runs-root", default=None)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("serve", help="start the human-annotation HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "strategy_override", None):
        args.strategy = args.strategy_override
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationExhausted as e:
        print(f"generation failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ApisLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
