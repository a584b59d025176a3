"""The active-learning state machine: initialization, per-step
selection -> annotation -> fine-tuning, APIS and AFIS experiment runners,
point-set transfer runs, and run-directory bookkeeping."""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import evaluation, segmodel, selection, uncertainty
from .core import (
    BudgetLedger,
    Dataset,
    PointAnnotation,
    PointSet,
    budget_equivalent_masks,
    empty_point_set,
    merge_point_set,
    read_point_set,
    write_point_set,
)
from .errors import ConfigError, EmptyDomain, MissingPointSets
from .oracle import Annotator, PointQuery, SimulatedOracle
from .segmodel import FeatureCache, ModelParams, TrainSchedule, standard_schedule
from .selection import SelectionDomain

FINETUNE_ITERS = {"short": 333, "default": 1000, "long": 3000}
DEFAULT_INIT_ITERS = 3000

METRICS_COLUMNS = (
    "step",
    "n_points",
    "n_masks",
    "budget_seconds",
    "train_iters_cum",
    "test_mean_iou",
    "test_map",
    "ap_small",
    "ap_medium",
    "ap_large",
    "point_acc",
    "new_point_misclass_ratio",
    "mean_boundary_dist",
)


def _tag(name: str) -> int:
    """Stable integer key for a purpose tag, for splittable rng streams."""
    return zlib.crc32(name.encode())


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Splittable rng keyed by (run seed, purpose tag, step, ids...)."""
    ints = [seed] + [_tag(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(ints))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    strategy: str = "entropy"  # point strategy, afis-image, afis-instance, or "transfer"
    mode: str = "A"  # prediction set source: A | M | S
    afis_metric: str = "mean-entropy"
    steps: int = 5
    seed: int = 0
    num_heads: int = segmodel.DEFAULT_NUM_HEADS
    l2: float = segmodel.DEFAULT_L2
    replicas: int = segmodel.DEFAULT_REPLICAS
    scales: tuple[float, ...] = segmodel.DEFAULT_SCALES
    init_iters: int = DEFAULT_INIT_ITERS
    schedule: str = "default"  # fine-tune length: short | default | long
    batch_size: int = 256
    from_scratch: bool = False
    budget_points: int | None = None  # per-step point budget; None means one per instance
    subset_mode: str = "random"  # random | min_det_loss, used when budget_points < Q
    t_point: float = 0.9
    t_mask: float = 79.2
    transfer_source: str | None = None  # run directory providing frozen point sets

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.strategy not in selection.POINT_STRATEGIES + selection.AFIS_STRATEGIES + ("transfer",):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.mode not in ("A", "M", "S"):
            raise ConfigError(f"unknown prediction mode {self.mode!r}")
        if self.schedule not in FINETUNE_ITERS:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.afis_metric not in selection.AFIS_METRICS:
            raise ConfigError(f"unknown AFIS metric {self.afis_metric!r}")
        if self.subset_mode not in ("random", "min_det_loss"):
            raise ConfigError(f"unknown subset mode {self.subset_mode!r}")

    @property
    def is_afis(self) -> bool:
        return self.strategy in selection.AFIS_STRATEGIES

    @property
    def afis_level(self) -> str:
        return "image" if self.strategy == "afis-image" else "instance"

    def to_json(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)


def init_schedule(cfg: ExperimentConfig) -> TrainSchedule:
    """Initial training: decays x0.1 at 2/3 and 8/9 of the iteration count."""
    it = cfg.init_iters
    decays = tuple(sorted({(2 * it) // 3, (8 * it) // 9})) if it >= 9 else ()
    return TrainSchedule(iterations=it, decay_points=decays, batch_size=cfg.batch_size, seed=0)


def finetune_schedule(cfg: ExperimentConfig) -> TrainSchedule:
    return standard_schedule(FINETUNE_ITERS[cfg.schedule], seed=0)


@dataclass
class LoopState:
    step: int
    point_set: PointSet
    params: ModelParams
    replicas: list[ModelParams] | None
    ledger: BudgetLedger
    masks: dict  # AFIS mask annotations acquired so far
    metrics: list[dict]


@dataclass
class RunReport:
    run_dir: str
    config: ExperimentConfig
    metrics: list[dict]
    completed_steps: int
    error: str | None = None


class Runner:
    """Executes one experiment against a dataset and an annotator."""

    def __init__(
        self,
        config: ExperimentConfig,
        train: Dataset,
        train_truths: dict,
        test: Dataset,
        test_truths: dict,
        annotator: Annotator | None = None,
        run_dir: str | None = None,
    ):
        self.cfg = config
        self.train = train
        self.train_truths = train_truths
        self.test = test
        self.test_truths = test_truths
        self.cache = FeatureCache()
        self.ledger = BudgetLedger(t_point=config.t_point, t_mask=config.t_mask)
        self.run_dir = run_dir
        log_path = os.path.join(run_dir, "oracle_log.jsonl") if run_dir else None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
        self.annotator = annotator or SimulatedOracle(train, train_truths, self.ledger, log_path)
        if isinstance(self.annotator, SimulatedOracle):
            self.annotator.ledger = self.ledger
        self.images = train.image_map()
        self.instances = train.instance_map()
        self.current_state: LoopState | None = None  # live view for the service layer

    # -- committee plumbing -------------------------------------------------

    def _replica_seeds(self) -> list[int]:
        return [self.cfg.seed + 1000 * r for r in range(self.cfg.replicas)]

    def _train_all(self, state: LoopState, iters_schedule: TrainSchedule, step: int) -> None:
        """Fine-tune the main model (and mode-M replicas) on current supervision."""
        pool = segmodel.build_supervision(
            self.train,
            self.cache,
            point_set=state.point_set if len(state.point_set) else None,
            masks=state.masks or None,
        )
        base = None if self.cfg.from_scratch else state.params
        sched = replace(iters_schedule, seed=self._model_seed(0, step))
        start = base if base is not None else segmodel.init_params(self._model_seed(0, -1), self.cfg.num_heads, self.cfg.l2)
        state.params = segmodel.train(start, pool, sched)
        if self.cfg.mode == "M":
            new_replicas = [state.params]
            for r in range(1, self.cfg.replicas):
                prev = state.replicas[r] if state.replicas else segmodel.init_params(
                    self._model_seed(r, -1), self.cfg.num_heads, self.cfg.l2
                )
                rsched = replace(iters_schedule, seed=self._model_seed(r, step))
                new_replicas.append(segmodel.train(prev, pool, rsched))
            state.replicas = new_replicas

    def _model_seed(self, replica: int, step: int) -> int:
        return int(rng_for(self.cfg.seed, "model", replica, step + 1).integers(2**31))

    def _prediction_set(self, state: LoopState, key: tuple[str, str]):
        rec = self.instances[key]
        return segmodel.predict_instance(
            state.params,
            self.images[key[0]],
            rec.box,
            mode=self.cfg.mode,
            cache=self.cache,
            replicas=state.replicas,
            scales=self.cfg.scales,
            instance_id=key[1],
        )

    def _detection_losses(self, state: LoopState) -> dict[tuple[str, str], float]:
        out = {}
        for rec in self.train.instances:
            image = self.images[rec.image_id]
            extent = segmodel.dilate_box(rec.box, image.width, image.height)
            ps = segmodel.predict_instance(
                state.params, image, rec.box, mode="A", cache=self.cache, extent=extent, instance_id=rec.instance_id
            )
            pred = segmodel.predicted_box(uncertainty.mean_map(ps), extent)
            out[rec.key] = selection.detection_loss(pred, rec.box)
        return out

    def _mean_entropy_scores(self, state: LoopState) -> dict[tuple[str, str], float]:
        out = {}
        for rec in self.train.instances:
            ps = segmodel.predict_instance(
                state.params, self.images[rec.image_id], rec.box, mode="A", cache=self.cache, instance_id=rec.instance_id
            )
            out[rec.key] = float(uncertainty.entropy(uncertainty.mean_map(ps)).mean())
        return out

    # -- APIS steps ---------------------------------------------------------

    def init_round(self) -> LoopState:
        state = LoopState(
            step=0,
            point_set=empty_point_set(),
            params=segmodel.init_params(self._model_seed(0, -1), self.cfg.num_heads, self.cfg.l2),
            replicas=None,
            ledger=self.ledger,
            masks={},
            metrics=[],
        )
        if self.cfg.is_afis:
            budget = self.train.q_total * self.cfg.t_point
            rng = rng_for(self.cfg.seed, "afis", 0)
            keys = selection.afis_select(
                {rec.key: 0.0 for rec in self.train.instances},
                level=self.cfg.afis_level,
                metric="random",
                budget_seconds=budget,
                t_mask=self.cfg.t_mask,
                rng=rng,
            )
            for key in keys:
                state.masks[key] = self.annotator.answer_mask(*key)
            new_points = []
        else:
            queries = []
            for rec in self.train.instances:
                rng = rng_for(self.cfg.seed, "p0", 0, _tag(rec.image_id), _tag(rec.instance_id))
                domain = SelectionDomain.build(rec.box, set())
                x, y = selection.select_point("random", None, domain, rng)
                queries.append(PointQuery(rec.image_id, rec.instance_id, x, y, f"s0/{rec.image_id}/{rec.instance_id}", 0))
            labels = self._answer_batch(queries)
            new_points = [
                PointAnnotation(q.image_id, q.instance_id, q.x, q.y, label, 0)
                for q, label in zip(queries, labels)
            ]
            state.point_set = merge_point_set(state.point_set, new_points, self.train)
        self._train_all(state, init_schedule(self.cfg), step=0)
        self._record_metrics(state, new_points)
        return state

    def active_step(self, state: LoopState) -> LoopState:
        step = state.step + 1
        prev_params = state.params
        if self.cfg.is_afis:
            self._afis_step(state, step)
            new_points = []
        else:
            new_points = self._apis_select_and_annotate(state, step)
            state.point_set = merge_point_set(state.point_set, new_points, self.train)
        state.step = step
        self._train_all(state, finetune_schedule(self.cfg), step=step)
        self._record_metrics(state, new_points, prev_params=prev_params)
        return state

    def _answer_batch(self, queries) -> list[int]:
        labels = self.annotator.answer_point_batch(queries)
        # annotators without their own ledger (e.g. remote humans) still spend budget
        if not isinstance(self.annotator, SimulatedOracle):
            for _ in labels:
                self.ledger.charge_point()
        return labels

    def _eligible_instances(self, state: LoopState, step: int) -> list[tuple[str, str]]:
        keys = [rec.key for rec in self.train.instances]
        budget = self.cfg.budget_points
        if budget is None or budget >= len(keys):
            return keys
        scores = self._detection_losses(state) if self.cfg.subset_mode == "min_det_loss" else None
        rng = rng_for(self.cfg.seed, "subset", step)
        return selection.select_instances_under_budget(self.cfg.subset_mode, budget, keys, scores, rng)

    def _apis_select_and_annotate(self, state: LoopState, step: int) -> list[PointAnnotation]:
        queries = []
        for key in self._eligible_instances(state, step):
            rec = self.instances[key]
            domain = SelectionDomain.build(rec.box, state.point_set.pixels_for(*key))
            if domain.size == 0:
                continue  # box exhausted; skip this instance for the step
            rng = rng_for(self.cfg.seed, "select", step, _tag(key[0]), _tag(key[1]))
            if self.cfg.strategy in ("max-error", "least-error"):
                ps = self._prediction_set(state, key)
                mode = "max" if self.cfg.strategy == "max-error" else "min"
                x, y = selection.select_point_by_error(mode, ps, self.train_truths[key], domain)
            elif self.cfg.strategy == "random":
                x, y = selection.select_point("random", None, domain, rng)
            else:
                ps = self._prediction_set(state, key)
                x, y = selection.select_point(self.cfg.strategy, ps, domain, rng)
            queries.append(PointQuery(key[0], key[1], x, y, f"s{step}/{key[0]}/{key[1]}", step))
        labels = self._answer_batch(queries)
        return [
            PointAnnotation(q.image_id, q.instance_id, q.x, q.y, label, step)
            for q, label in zip(queries, labels)
        ]

    def _afis_step(self, state: LoopState, step: int) -> None:
        budget = self.train.q_total * self.cfg.t_point
        if self.cfg.afis_metric == "mean-entropy":
            scores = self._mean_entropy_scores(state)
        elif self.cfg.afis_metric in ("min-det-loss", "max-det-loss"):
            scores = self._detection_losses(state)
        else:
            scores = {rec.key: 0.0 for rec in self.train.instances}
        rng = rng_for(self.cfg.seed, "afis", step)
        keys = selection.afis_select(
            scores,
            level=self.cfg.afis_level,
            metric=self.cfg.afis_metric,
            budget_seconds=budget,
            t_mask=self.cfg.t_mask,
            rng=rng,
            exclude=set(state.masks),
        )
        for key in keys:
            state.masks[key] = self.annotator.answer_mask(*key)

    # -- metrics ------------------------------------------------------------

    def _record_metrics(self, state: LoopState, new_points, prev_params: ModelParams | None = None) -> None:
        report = evaluation.dataset_map(state.params, self.test, self.test_truths, self.cache)
        if self.cfg.is_afis:
            point_acc = self._afis_pixel_accuracy(state)
            misclass = 0.0
            boundary = 0.0
        else:
            point_acc = evaluation.point_accuracy(state.params, self.train, state.point_set, self.cache)
            misclass = (
                evaluation.misclassification_ratio(prev_params, self.train, new_points, self.cache)
                if prev_params is not None and new_points
                else 0.0
            )
            boundary, _ = evaluation.boundary_distance_stats(new_points, self.train_truths)
        iters = self.cfg.init_iters + state.step * FINETUNE_ITERS[self.cfg.schedule]
        budget_seconds = (state.step + 1) * self.train.q_total * self.cfg.t_point
        state.metrics.append(
            {
                "step": state.step,
                "n_points": len(state.point_set),
                "n_masks": len(state.masks),
                "budget_seconds": budget_seconds,
                "train_iters_cum": iters,
                "test_mean_iou": report.mean_iou,
                "test_map": report.map,
                "ap_small": report.ap_small,
                "ap_medium": report.ap_medium,
                "ap_large": report.ap_large,
                "point_acc": point_acc,
                "new_point_misclass_ratio": misclass,
                "mean_boundary_dist": boundary,
            }
        )

    def _afis_pixel_accuracy(self, state: LoopState) -> float:
        """Dense accuracy over annotated instances' in-box pixels."""
        if not state.masks:
            return 0.0
        correct = total = 0
        for key, mask in state.masks.items():
            pred = evaluation.predicted_mask(state.params, self.train, key, self.cache)
            rec = self.instances[key]
            b = rec.box
            sub_pred = pred[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1]
            sub_gt = mask[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1]
            correct += int((sub_pred == sub_gt).sum())
            total += b.area
        return correct / total

    # -- persistence --------------------------------------------------------

    def _write_step_artifacts(self, state: LoopState) -> None:
        if not self.run_dir:
            return
        if not self.cfg.is_afis:
            write_point_set(state.point_set, os.path.join(self.run_dir, f"points_step_{state.step}.json"))
        segmodel.save_checkpoint(
            state.params,
            os.path.join(self.run_dir, f"model_step_{state.step}.bin"),
            meta={"l2": self.cfg.l2, "seed": self.cfg.seed, "step": state.step, "schedule": self.cfg.schedule},
        )
        write_metrics_csv(os.path.join(self.run_dir, "metrics.csv"), state.metrics)

    def run(self) -> RunReport:
        if self.run_dir:
            with open(os.path.join(self.run_dir, "config.json"), "w") as f:
                json.dump(self.cfg.to_json(), f, indent=1, sort_keys=True)
                f.write("\n")
        try:
            if self.cfg.strategy == "transfer":
                return self._run_transfer()
            state = self.init_round()
            self.current_state = state
            self._write_step_artifacts(state)
            for _ in range(self.cfg.steps):
                state = self.active_step(state)
                self._write_step_artifacts(state)
            return self._finish(state, None)
        except EmptyDomain as e:  # pragma: no cover - defensive
            return self._finish(state, str(e))

    def _finish(self, state: LoopState, error: str | None) -> RunReport:
        report = RunReport(
            run_dir=self.run_dir or "",
            config=self.cfg,
            metrics=state.metrics,
            completed_steps=state.step,
            error=error,
        )
        if self.run_dir:
            payload = {
                "config": self.cfg.to_json(),
                "metrics": state.metrics,
                "completed_steps": state.step,
                "oracle_assisted": self.cfg.strategy in selection.ORACLE_ASSISTED,
                "ledger": {
                    "n_points": self.ledger.n_points,
                    "n_masks": self.ledger.n_masks,
                    "spent_seconds": self.ledger.spent,
                },
                "error": error,
            }
            if self.cfg.is_afis:
                payload["afis"] = self._afis_diagnostics(state)
            with open(os.path.join(self.run_dir, "report.json"), "w") as f:
                json.dump(payload, f, indent=1, sort_keys=True)
                f.write("\n")
        return report

    def _afis_diagnostics(self, state: LoopState) -> dict:
        """Per-run record of annotated images and mean instances per image."""
        images = sorted({k[0] for k in state.masks})
        per_image = {im: sum(1 for k in state.masks if k[0] == im) for im in images}
        mean_inst = float(np.mean(list(per_image.values()))) if per_image else 0.0
        return {
            "level": self.cfg.afis_level,
            "metric": self.cfg.afis_metric,
            "n_images": len(images),
            "mean_instances_per_image": mean_inst,
            "n_masks": len(state.masks),
        }

    # -- transfer -----------------------------------------------------------

    def _run_transfer(self) -> RunReport:
        src = self.cfg.transfer_source
        if not src:
            raise ConfigError("transfer requires transfer_source")
        point_sets = []
        for s in range(self.cfg.steps + 1):
            path = os.path.join(src, f"points_step_{s}.json")
            if not os.path.exists(path):
                raise MissingPointSets(f"missing {path}")
            point_sets.append(read_point_set(path))
        state = LoopState(
            step=0,
            point_set=point_sets[0],
            params=segmodel.init_params(self._model_seed(0, -1), self.cfg.num_heads, self.cfg.l2),
            replicas=None,
            ledger=self.ledger,
            masks={},
            metrics=[],
        )
        self.current_state = state
        self.ledger.n_points = len(point_sets[0])
        self._train_all(state, init_schedule(self.cfg), step=0)
        self._record_metrics(state, point_sets[0].points)
        self._write_step_artifacts(state)
        for s in range(1, self.cfg.steps + 1):
            prev_params = state.params
            new_points = [p for p in point_sets[s].points if p.step == s]
            state.point_set = point_sets[s]
            self.ledger.n_points = len(point_sets[s])
            state.step = s
            self._train_all(state, finetune_schedule(self.cfg), step=s)
            self._record_metrics(state, new_points, prev_params=prev_params)
            self._write_step_artifacts(state)
        return self._finish(state, None)


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    # fixed "\n" terminator keeps the artifact byte-stable across platforms
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for r in reader:
            rows.append({k: (int(v) if k in ("step", "n_points", "n_masks", "train_iters_cum") else float(v)) for k, v in r.items()})
        return rows
