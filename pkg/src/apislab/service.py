"""HTTP session layer exposing point queries to a human annotator.

A session wraps one experiment run whose annotator is a queue-backed remote:
the driver freezes each step's queries as a batch, the human answers them one
by one over HTTP, and fine-tuning starts only when the batch is complete.
Answers are recorded in the same audit-log format as simulated runs, so a
session can be resumed after a restart by replaying the log.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from . import synthgen
from .core import ImageRaster
from .driver import ExperimentConfig, Runner
from .errors import ConfigError
from .oracle import Annotator, AuditLog, PointQuery


class SessionRequest(BaseModel):
    annotator: str = "human"
    data_dir: str
    run_dir: str | None = None
    config: dict = Field(default_factory=dict)
    idempotency_key: str | None = None


class SessionCreated(BaseModel):
    session_id: str


class AnswerRequest(BaseModel):
    query_id: str
    label: int


class Progress(BaseModel):
    answered: int
    pending: int
    step: int


class RemoteAnnotator(Annotator):
    """Blocks the driver thread until every query of the batch is answered.

    Previously logged answers (from a crashed session's audit log) are replayed
    automatically, so resumption neither loses nor duplicates answers.
    """

    def __init__(self, log_path: str | None, replayed: dict[str, int]):
        self.log = AuditLog(log_path)
        self.replayed = replayed
        self.lock = threading.Condition()
        self.batch: list[PointQuery] = []
        self.answers: dict[str, int] = {}
        self.batch_done = False  # 204 served after the batch completed
        self.state = "selecting"
        self.abort = False

    def answer_point_batch(self, queries: list[PointQuery]) -> list[int]:
        with self.lock:
            self.batch = list(queries)
            self.answers = {}
            self.batch_done = False
            for q in queries:
                if q.query_id in self.replayed:
                    self._record(q, self.replayed[q.query_id], replay=True)
            self.state = "awaiting_answers" if len(self.answers) < len(queries) else "training"
            self.lock.notify_all()
            while len(self.answers) < len(self.batch) and not self.abort:
                self.lock.wait(timeout=0.5)
            if self.abort:
                raise RuntimeError("session aborted")
            labels = [self.answers[q.query_id] for q in self.batch]
            self.state = "training"
            return labels

    def _record(self, q: PointQuery, label: int, replay: bool = False) -> None:
        self.answers[q.query_id] = label
        if not replay:
            self.log.record(
                {
                    "query_id": q.query_id,
                    "instance": f"{q.image_id}/{q.instance_id}",
                    "x": q.x,
                    "y": q.y,
                    "label": label,
                    "wall_time": time.time(),
                }
            )

    # -- HTTP-side helpers --------------------------------------------------

    def next_query(self) -> PointQuery | None:
        with self.lock:
            for q in self.batch:
                if q.query_id not in self.answers:
                    return q
            return None

    def submit(self, query_id: str, label: int) -> None:
        with self.lock:
            if not any(q.query_id == query_id for q in self.batch):
                raise KeyError(query_id)
            if query_id in self.answers:
                raise ValueError("already answered")
            q = next(q for q in self.batch if q.query_id == query_id)
            self._record(q, label)
            if len(self.answers) == len(self.batch):
                self.state = "training"
            self.lock.notify_all()

    def progress(self) -> tuple[int, int, int]:
        with self.lock:
            answered = len(self.answers)
            step = self.batch[0].step if self.batch else 0
            return answered, len(self.batch) - answered, step


@dataclass
class Session:
    session_id: str
    runner: Runner
    annotator: RemoteAnnotator
    thread: threading.Thread
    idempotency_key: str | None
    finished: bool = False
    error: str | None = None
    metrics: list = field(default_factory=list)


def _encode_ppm(image: ImageRaster) -> str:
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    raw = f"P6\n{image.width} {image.height}\n255\n".encode() + data.tobytes()
    return base64.b64encode(raw).decode()


def _load_replay(log_path: str) -> dict[str, int]:
    replayed: dict[str, int] = {}
    if log_path and os.path.exists(log_path):
        with open(log_path) as f:
            for line in f:
                entry = json.loads(line)
                replayed[entry["query_id"]] = entry["label"]
    return replayed


def create_app() -> FastAPI:
    app = FastAPI(title="apislab annotation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, Session] = {}
    by_key: dict[str, str] = {}

    def _get(session_id: str) -> Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(req: SessionRequest):
        if req.annotator != "human":
            raise HTTPException(status_code=400, detail="annotator: human sessions only")
        if req.idempotency_key and req.idempotency_key in by_key:
            return SessionCreated(session_id=by_key[req.idempotency_key])
        try:
            cfg = ExperimentConfig.from_json(req.config)
        except (ConfigError, TypeError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        try:
            train, train_truths = synthgen.read_dataset(os.path.join(req.data_dir, "train"))
            test, test_truths = synthgen.read_dataset(os.path.join(req.data_dir, "test"))
        except Exception as e:
            raise HTTPException(status_code=400, detail=f"data_dir: {e}") from e

        session_id = uuid.uuid4().hex[:12]
        log_path = None
        if req.run_dir:
            os.makedirs(req.run_dir, exist_ok=True)
            log_path = os.path.join(req.run_dir, "oracle_log.jsonl")
        annotator = RemoteAnnotator(log_path, _load_replay(log_path) if log_path else {})
        runner = Runner(cfg, train, train_truths, test, test_truths, annotator=annotator, run_dir=req.run_dir)
        session = Session(
            session_id=session_id,
            runner=runner,
            annotator=annotator,
            thread=None,  # set below
            idempotency_key=req.idempotency_key,
        )

        def _run():
            try:
                report = runner.run()
                session.metrics = report.metrics
            except Exception as e:  # surface run errors on the session
                session.error = str(e)
            finally:
                session.finished = True
                annotator.state = "finished"

        session.thread = threading.Thread(target=_run, daemon=True)
        sessions[session_id] = session
        if req.idempotency_key:
            by_key[req.idempotency_key] = session_id
        session.thread.start()
        return SessionCreated(session_id=session_id)

    @app.get("/sessions/{session_id}/query")
    def next_query(session_id: str):
        session = _get(session_id)
        ann = session.annotator
        # Wait briefly for the driver to finish selecting the next batch.
        deadline = time.monotonic() + 30.0
        while time.monotonic() < deadline:
            if session.finished:
                return Response(status_code=204)
            if ann.state == "training":
                if ann.batch_done:
                    raise HTTPException(status_code=409, detail="training in progress")
                ann.batch_done = True
                return Response(status_code=204)
            q = ann.next_query()
            if q is not None:
                break
            time.sleep(0.02)
        else:
            raise HTTPException(status_code=409, detail="no query available")
        rec = session.runner.instances[q.key]
        image = session.runner.images[q.image_id]
        answered, pending, step = ann.progress()
        return {
            "query_id": q.query_id,
            "image": _encode_ppm(image),
            "box": {"x_min": rec.box.x_min, "y_min": rec.box.y_min, "x_max": rec.box.x_max, "y_max": rec.box.y_max},
            "point": {"x": q.x, "y": q.y},
            "category": rec.category_id,
            "progress": {"answered": answered, "pending": pending, "step": step},
        }

    @app.post("/sessions/{session_id}/answer")
    def answer(session_id: str, body: AnswerRequest):
        session = _get(session_id)
        if body.label not in (0, 1):
            raise HTTPException(status_code=422, detail="label must be 0 or 1")
        try:
            session.annotator.submit(body.query_id, body.label)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown query_id") from None
        except ValueError:
            raise HTTPException(status_code=409, detail="query already answered") from None
        answered, pending, step = session.annotator.progress()
        return {"answered": answered, "pending": pending, "step": step}

    @app.get("/sessions/{session_id}/metrics")
    def metrics(session_id: str):
        session = _get(session_id)
        if session.error:
            return {"rows": [], "error": session.error}
        if session.finished:
            rows = session.metrics
        else:
            state = session.runner.current_state
            rows = list(state.metrics) if state is not None else []
        return {"rows": rows, "finished": session.finished}

    return app
