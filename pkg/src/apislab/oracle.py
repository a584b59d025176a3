"""The annotator abstraction: point and mask queries answered from ground truth.

``SimulatedOracle`` answers from the hidden visible masks; a remote (human)
annotator implements the same interface in the annotation service. Every
answer is appended to a JSON-lines audit log.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .core import BudgetLedger, Dataset
from .errors import DuplicateMaskQuery, OutOfBox, UnknownInstance


@dataclass(frozen=True)
class PointQuery:
    image_id: str
    instance_id: str
    x: int
    y: int
    query_id: str
    step: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.instance_id)


class Annotator:
    """Behavioral contract: answer point queries and (simulated only) mask queries."""

    def answer_point(self, query: PointQuery) -> int:
        raise NotImplementedError

    def answer_point_batch(self, queries: list[PointQuery]) -> list[int]:
        """Answer a frozen batch of queries; steps never adapt within a batch."""
        return [self.answer_point(q) for q in queries]

    def answer_mask(self, image_id: str, instance_id: str) -> np.ndarray:
        raise NotImplementedError


class AuditLog:
    """Append-only JSON-lines record of every answered query."""

    def __init__(self, path: str | None):
        self.path = path
        self.entries: list[dict] = []

    def record(self, entry: dict) -> None:
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(entry) + "\n")


class SimulatedOracle(Annotator):
    """Perfect annotator backed by the hidden ground-truth visible masks."""

    def __init__(
        self,
        dataset: Dataset,
        truths: dict,
        ledger: BudgetLedger | None = None,
        log_path: str | None = None,
    ):
        self.dataset = dataset
        self.truths = truths
        self.instances = dataset.instance_map()
        self.ledger = ledger if ledger is not None else BudgetLedger()
        self.log = AuditLog(log_path)
        self._masked: set[tuple[str, str]] = set()

    def answer_point(self, query: PointQuery) -> int:
        rec = self.instances.get(query.key)
        if rec is None:
            raise UnknownInstance(f"no such instance {query.key}")
        if not rec.box.contains(query.x, query.y):
            raise OutOfBox(f"query ({query.x}, {query.y}) outside box of {query.key}")
        label = int(self.truths[query.key][query.y, query.x])
        self.ledger.charge_point()
        entry = {
            "query_id": query.query_id,
            "instance": f"{query.image_id}/{query.instance_id}",
            "x": query.x,
            "y": query.y,
            "label": label,
            "wall_time": time.time(),
        }
        if query.key in self._masked:
            entry["redundant"] = True  # full mask already known for this instance
        self.log.record(entry)
        return label

    def answer_mask(self, image_id: str, instance_id: str) -> np.ndarray:
        key = (image_id, instance_id)
        if key not in self.instances:
            raise UnknownInstance(f"no such instance {key}")
        if key in self._masked:
            raise DuplicateMaskQuery(f"mask for {key} already queried")
        self._masked.add(key)
        self.ledger.charge_mask()
        self.log.record(
            {
                "query_id": f"mask/{image_id}/{instance_id}",
                "instance": f"{image_id}/{instance_id}",
                "x": -1,
                "y": -1,
                "label": -1,
                "wall_time": time.time(),
            }
        )
        return self.truths[key].copy()
