"""Multi-seed sweeps: strategy x seed (x schedule) cross products, aggregate
per-step statistics, pairwise differences, and soft directional reports."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import replace

import numpy as np

from .driver import ExperimentConfig, Runner

SUMMARY_METRICS = ("test_map", "test_mean_iou", "new_point_misclass_ratio", "mean_boundary_dist")


def run_sweep(
    base: ExperimentConfig,
    strategies: list[str],
    seeds: list[int],
    train,
    train_truths,
    test,
    test_truths,
    out_dir: str,
    schedules: list[str] | None = None,
    transfer_heads: int | None = None,
) -> dict:
    """Run every (strategy, seed[, schedule]) combination and aggregate.

    Returns the aggregate report; writes per-run directories plus
    ``sweep_summary.csv`` and ``sweep_report.json`` under ``out_dir``.
    Individual run failures are recorded and the sweep continues.
    """
    os.makedirs(out_dir, exist_ok=True)
    schedules = schedules or [base.schedule]
    runs: dict[tuple[str, str, int], list[dict]] = {}
    failures: list[dict] = []
    for schedule in schedules:
        for strategy in strategies:
            for seed in seeds:
                label = strategy if len(schedules) == 1 else f"{strategy}@{schedule}"
                name = f"{strategy}_{schedule}_s{seed}"
                cfg = replace(base, name=name, strategy=strategy, seed=seed, schedule=schedule)
                try:
                    rep = Runner(
                        cfg, train, train_truths, test, test_truths,
                        run_dir=os.path.join(out_dir, name),
                    ).run()
                    runs[(label, strategy, seed)] = rep.metrics
                except Exception as e:  # keep sweeping past individual failures
                    failures.append({"run": name, "error": str(e)})

    if transfer_heads is not None:
        target = replace(base, num_heads=transfer_heads)
        for seed in seeds:
            source_dir = os.path.join(out_dir, f"entropy_{schedules[0]}_s{seed}")
            for label, cfg in (
                (f"transfer@K{transfer_heads}", replace(target, name=f"transfer_K{transfer_heads}_s{seed}", strategy="transfer", seed=seed, transfer_source=source_dir)),
                (f"entropy@K{transfer_heads}", replace(target, name=f"entropy_K{transfer_heads}_s{seed}", strategy="entropy", seed=seed)),
                (f"random@K{transfer_heads}", replace(target, name=f"random_K{transfer_heads}_s{seed}", strategy="random", seed=seed)),
            ):
                try:
                    rep = Runner(
                        cfg, train, train_truths, test, test_truths,
                        run_dir=os.path.join(out_dir, cfg.name),
                    ).run()
                    runs[(label, cfg.strategy, seed)] = rep.metrics
                except Exception as e:
                    failures.append({"run": cfg.name, "error": str(e)})

    labels = sorted({k[0] for k in runs})
    summary_rows = []
    per_label: dict[str, dict[str, np.ndarray]] = {}
    for label in labels:
        series = [m for (lb, _, _), m in sorted(runs.items()) if lb == label]
        steps = min(len(m) for m in series)
        stats: dict[str, np.ndarray] = {}
        for metric in SUMMARY_METRICS:
            arr = np.array([[m[i][metric] for i in range(steps)] for m in series])
            stats[metric] = arr
            for step in range(steps):
                summary_rows.append(
                    {
                        "kind": "strategy",
                        "a": label,
                        "b": "",
                        "step": step,
                        "metric": metric,
                        "n": arr.shape[0],
                        "mean": float(arr[:, step].mean()),
                        "sd": float(arr[:, step].std(ddof=1)) if arr.shape[0] > 1 else 0.0,
                    }
                )
        per_label[label] = stats
    for i, la in enumerate(labels):
        for lb in labels[i + 1 :]:
            steps = min(per_label[la]["test_map"].shape[1], per_label[lb]["test_map"].shape[1])
            for metric in SUMMARY_METRICS:
                for step in range(steps):
                    diff = per_label[la][metric][:, step].mean() - per_label[lb][metric][:, step].mean()
                    summary_rows.append(
                        {"kind": "diff", "a": la, "b": lb, "step": step, "metric": metric,
                         "n": 0, "mean": float(diff), "sd": 0.0}
                    )

    with open(os.path.join(out_dir, "sweep_summary.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["kind", "a", "b", "step", "metric", "n", "mean", "sd"])
        writer.writeheader()
        writer.writerows(summary_rows)

    report = {
        "labels": labels,
        "seeds": seeds,
        "failures": failures,
        "directional": _directional_reports(per_label, schedules, transfer_heads, runs),
    }
    with open(os.path.join(out_dir, "sweep_report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    return report


def _mean_final_map(stats: dict[str, np.ndarray]) -> float:
    return float(stats["test_map"][:, -1].mean())


def _directional_reports(per_label, schedules, transfer_heads, runs) -> dict:
    """Soft (non-blocking) directional observations recorded for review."""
    out: dict = {}
    if len(schedules) > 1:
        gaps = {}
        for schedule in schedules:
            ea, ra = f"entropy@{schedule}", f"random@{schedule}"
            if ea in per_label and ra in per_label:
                gaps[schedule] = _mean_final_map(per_label[ea]) - _mean_final_map(per_label[ra])
        out["schedule_gap_entropy_minus_random"] = gaps
        if "short" in gaps and "long" in gaps:
            out["long_widens_gap"] = bool(gaps["long"] > gaps["short"])
    if transfer_heads is not None:
        tk, ek, rk = (f"{p}@K{transfer_heads}" for p in ("transfer", "entropy", "random"))
        if all(k in per_label for k in (tk, ek, rk)):
            t, e, r = (_mean_final_map(per_label[k]) for k in (tk, ek, rk))
            out["transfer_final_map"] = {"transfer": t, "native_entropy": e, "random": r}
            out["transfer_between_native_and_random"] = bool(r <= t <= e or e <= t <= r)
            out["transfer_above_random"] = bool(t >= r)
    # Size-bucket gap at the final step, entropy vs random (single-schedule labels).
    bucket_gap = {}
    for bucket in ("ap_small", "ap_medium", "ap_large"):
        vals = {}
        for strategy in ("entropy", "random"):
            label = strategy if strategy in per_label else f"{strategy}@{schedules[0]}"
            series = [m for (lb, _, _), m in sorted(runs.items()) if lb == label]
            if series:
                vals[strategy] = float(np.mean([m[-1][bucket] for m in series]))
        if len(vals) == 2:
            bucket_gap[bucket] = vals["entropy"] - vals["random"]
    if bucket_gap:
        out["bucket_gap_entropy_minus_random"] = bucket_gap
        if len(bucket_gap) == 3:
            out["largest_gap_on_large_bucket"] = bool(
                bucket_gap["ap_large"] >= max(bucket_gap["ap_small"], bucket_gap["ap_medium"])
            )
    return out
