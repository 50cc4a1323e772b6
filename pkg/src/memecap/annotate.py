"""Annotation service: pairwise preference and rubric rating tasks over HTTP,
backed by an append-only response log.

The domain core (queue, store, export) is framework-free; create_app wraps it
in FastAPI. Responses are fsynced before acknowledgment and replayed on
restart, so an acknowledged response survives a process kill. Exported
preference records carry the ordinal Krippendorff agreement of the annotator
orderings and only pass the > 0.7 gate.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse, Response
from pydantic import BaseModel

from .errors import MemecapError, ValidationError
from .reward import AGREEMENT_GATE, CandidateSet, PreferenceRecord, borda_points, krippendorff_alpha

RUBRIC_DIMENSIONS = ("informativeness", "relevance", "creativity", "humor")

# Scoring guide shown verbatim to annotators: four dimensions, five anchored
# levels each.
RUBRIC_CRITERIA: dict[str, dict[int, str]] = {
    "informativeness": {
        1: "Score 1 - Not informative: the caption adds no usable context to the image.",
        2: "Score 2 - Slightly informative: the caption adds only a sliver of context.",
        3: "Score 3 - Moderately informative: the caption supplies a fair amount of context.",
        4: "Score 4 - Very informative: the caption adds substantial clarifying context.",
        5: "Score 5 - Exceptionally informative: the caption gives rich context that reframes the image.",
    },
    "relevance": {
        1: "Score 1 - Not relevant: the caption has no connection to the image.",
        2: "Score 2 - Slightly relevant: the caption connects to the image only loosely.",
        3: "Score 3 - Moderately relevant: the caption clearly relates to the image.",
        4: "Score 4 - Very relevant: the caption ties tightly to what the image shows.",
        5: "Score 5 - Exceptionally relevant: the caption fits the image perfectly.",
    },
    "creativity": {
        1: "Score 1 - Not creative: the caption is rote and predictable.",
        2: "Score 2 - Slightly creative: the caption offers only stock phrasing.",
        3: "Score 3 - Moderately creative: the caption shows a modest twist.",
        4: "Score 4 - Very creative: the caption lands a clever, unexpected idea.",
        5: "Score 5 - Exceptionally creative: the caption is strikingly original and memorable.",
    },
    "humor": {
        1: "Score 1 - Not humorous: the caption raises no amusement.",
        2: "Score 2 - Slightly humorous: the caption earns at most a faint smile.",
        3: "Score 3 - Moderately humorous: the caption gets a genuine laugh.",
        4: "Score 4 - Very humorous: the caption provokes strong laughter.",
        5: "Score 5 - Exceptionally humorous: the caption is hilarious and sticks with you.",
    },
}


class DuplicateResponseError(MemecapError):
    """One response per (task, annotator)."""


class UnknownAnnotatorError(MemecapError):
    """Annotator id not registered with the service."""


@dataclass(frozen=True)
class AnnotationTask:
    task_id: str
    kind: str  # "pair" | "rubric"
    meme_id: str
    candidate_ids: tuple[str, ...]
    captions: tuple[str, ...]

    def to_dict(self) -> dict:
        out = {
            "task_id": self.task_id,
            "kind": self.kind,
            "meme_id": self.meme_id,
            "candidate_ids": list(self.candidate_ids),
            "captions": list(self.captions),
            "image_url": f"/memes/{self.meme_id}/image",
        }
        if self.kind == "rubric":
            out["criteria"] = {dim: RUBRIC_CRITERIA[dim] for dim in RUBRIC_DIMENSIONS}
        return out


@dataclass
class AnnotationResponse:
    task_id: str
    annotator_id: str
    winner: str | None = None  # "first" | "second" for pair tasks
    rubric: dict[str, int] | None = None
    timestamp: float = field(default_factory=time.time)

    def validate_for(self, task: AnnotationTask) -> None:
        if task.kind == "pair":
            if self.winner not in ("first", "second"):
                raise ValidationError("pair response needs winner 'first' or 'second'")
        else:
            if not self.rubric:
                raise ValidationError("rubric response needs the four scores")
            if set(self.rubric) != set(RUBRIC_DIMENSIONS):
                raise ValidationError(f"rubric must score exactly {RUBRIC_DIMENSIONS}")
            for dim, value in self.rubric.items():
                if not isinstance(value, int) or not 1 <= value <= 5:
                    raise ValidationError(f"rubric {dim} must be an integer in 1..5, got {value!r}")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "annotator_id": self.annotator_id,
            "winner": self.winner,
            "rubric": self.rubric,
            "timestamp": self.timestamp,
        }


def build_tasks(
    candidate_sets: dict[str, CandidateSet],
    fraction: float = 0.01,
    seed: int = 0,
    kinds: tuple[str, ...] = ("pair",),
) -> list[AnnotationTask]:
    """Sample a fraction of the candidate sets and expand them into tasks.

    Deterministic given (fraction, seed): meme ids are sorted before
    sampling, pair tasks cover every unordered candidate pair, rubric tasks
    cover every candidate.
    """
    meme_ids = sorted(candidate_sets)
    if not meme_ids:
        return []
    take = min(len(meme_ids), max(1, math.ceil(fraction * len(meme_ids))))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(meme_ids), size=take, replace=False))
    tasks: list[AnnotationTask] = []
    for idx in picked:
        cset = candidate_sets[meme_ids[idx]]
        cands = sorted(cset.candidates, key=lambda c: c.candidate_id)
        if "pair" in kinds:
            for i in range(len(cands)):
                for j in range(i + 1, len(cands)):
                    a, b = cands[i], cands[j]
                    tasks.append(
                        AnnotationTask(
                            task_id=f"{cset.meme_id}:pair:{a.candidate_id}:{b.candidate_id}",
                            kind="pair",
                            meme_id=cset.meme_id,
                            candidate_ids=(a.candidate_id, b.candidate_id),
                            captions=(" ".join(a.tokens), " ".join(b.tokens)),
                        )
                    )
        if "rubric" in kinds:
            for cand in cands:
                tasks.append(
                    AnnotationTask(
                        task_id=f"{cset.meme_id}:rubric:{cand.candidate_id}",
                        kind="rubric",
                        meme_id=cset.meme_id,
                        candidate_ids=(cand.candidate_id,),
                        captions=(" ".join(cand.tokens),),
                    )
                )
    return tasks


class ResponseStore:
    """Append-only JSONL log; every append is flushed and fsynced before the
    caller sees an acknowledgment."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def replay(self) -> list[AnnotationResponse]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(
                AnnotationResponse(
                    task_id=obj["task_id"],
                    annotator_id=obj["annotator_id"],
                    winner=obj.get("winner"),
                    rubric=obj.get("rubric"),
                    timestamp=obj.get("timestamp", 0.0),
                )
            )
        return out

    def append(self, response: AnnotationResponse) -> None:
        line = json.dumps(response.to_dict(), ensure_ascii=False) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())

    def compact(self, keep: list[AnnotationResponse]) -> None:
        tmp = self.path.with_suffix(".tmp")
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as f:
                for r in keep:
                    f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
                f.flush()
                os.fsync(f.fileno())
            tmp.replace(self.path)


class AnnotationService:
    def __init__(
        self,
        tasks: list[AnnotationTask],
        store: ResponseStore,
        annotators: tuple[str, ...] = ("a1", "a2", "a3"),
        min_annotators: int = 3,
        image_resolver=None,
    ):
        self.tasks = list(tasks)
        self.by_id = {t.task_id: t for t in self.tasks}
        if len(self.by_id) != len(self.tasks):
            raise ValidationError("task ids must be unique")
        self.store = store
        self.annotators = tuple(annotators)
        self.min_annotators = min_annotators
        self.image_resolver = image_resolver
        self.responses: dict[tuple[str, str], AnnotationResponse] = {}
        for r in store.replay():
            self.responses[(r.task_id, r.annotator_id)] = r

    # -- queue -------------------------------------------------------------

    def next_task(self, annotator_id: str) -> AnnotationTask | None:
        if annotator_id not in self.annotators:
            raise UnknownAnnotatorError(f"annotator {annotator_id!r} is not registered")
        for task in self.tasks:  # creation order = FIFO
            if (task.task_id, annotator_id) not in self.responses:
                return task
        return None

    def submit(self, response: AnnotationResponse) -> dict:
        task = self.by_id.get(response.task_id)
        if task is None:
            raise ValidationError(f"unknown task {response.task_id!r}")
        if response.annotator_id not in self.annotators:
            raise UnknownAnnotatorError(f"annotator {response.annotator_id!r} is not registered")
        key = (response.task_id, response.annotator_id)
        if key in self.responses:
            raise DuplicateResponseError(f"{response.annotator_id} already answered {response.task_id}")
        response.validate_for(task)
        self.store.append(response)  # durable before the ack
        self.responses[key] = response
        return {"status": "ok", "task_id": response.task_id}

    def get_response(self, task_id: str, annotator_id: str) -> AnnotationResponse | None:
        return self.responses.get((task_id, annotator_id))

    # -- progress ------------------------------------------------------------

    def progress(self, annotator_id: str | None = None) -> dict:
        total = len(self.tasks)
        if annotator_id is not None:
            if annotator_id not in self.annotators:
                raise UnknownAnnotatorError(f"annotator {annotator_id!r} is not registered")
            done = sum(1 for t in self.tasks if (t.task_id, annotator_id) in self.responses)
        else:
            done = len(self.responses)
            total = total * len(self.annotators)
        pending = sum(
            1
            for meme_id, complete in self._complete_annotators_per_meme().items()
            if 0 < len(complete) < self.min_annotators
        )
        return {"completed": done, "remaining": total - done, "pending_sets": pending}

    # -- export ---------------------------------------------------------------

    def _pair_tasks_per_meme(self) -> dict[str, list[AnnotationTask]]:
        grouped: dict[str, list[AnnotationTask]] = {}
        for t in self.tasks:
            if t.kind == "pair":
                grouped.setdefault(t.meme_id, []).append(t)
        return grouped

    def _complete_annotators_per_meme(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for meme_id, tasks in self._pair_tasks_per_meme().items():
            complete = [
                ann
                for ann in self.annotators
                if all((t.task_id, ann) in self.responses for t in tasks)
            ]
            out[meme_id] = complete
        return out

    def _annotator_points(self, meme_id: str, annotator: str) -> dict[str, int]:
        points: dict[str, int] = {}
        for task in self._pair_tasks_per_meme()[meme_id]:
            a, b = task.candidate_ids
            points.setdefault(a, 0)
            points.setdefault(b, 0)
            resp = self.responses[(task.task_id, annotator)]
            points[a if resp.winner == "first" else b] += 1
        return points

    def export_preferences(self, min_annotators: int | None = None) -> list[PreferenceRecord]:
        """Aggregate pair responses per candidate set: per-annotator Borda
        orderings, ordinal agreement over them, pooled-Borda final ordering.
        Only sets with agreement above the gate are emitted."""
        min_required = self.min_annotators if min_annotators is None else min_annotators
        records: list[PreferenceRecord] = []
        for meme_id in sorted(self._pair_tasks_per_meme()):
            complete = self._complete_annotators_per_meme()[meme_id]
            if len(complete) < min_required:
                continue
            per_annotator = [self._annotator_points(meme_id, ann) for ann in complete]
            candidate_ids = sorted(per_annotator[0])
            ratings = np.array(
                [[float(points[cid]) for cid in candidate_ids] for points in per_annotator]
            )
            alpha = krippendorff_alpha(ratings, level="ordinal")
            if alpha <= AGREEMENT_GATE:
                continue
            pooled = {cid: 0 for cid in candidate_ids}
            for points in per_annotator:
                for cid, p in points.items():
                    pooled[cid] += p
            ordering = sorted(candidate_ids, key=lambda cid: (pooled[cid], cid))
            latest = max(
                self.responses[(t.task_id, ann)].timestamp
                for t in self._pair_tasks_per_meme()[meme_id]
                for ann in complete
            )
            records.append(
                PreferenceRecord(
                    meme_id=meme_id,
                    ordering=ordering,
                    source="human",
                    agreement=float(alpha),
                    annotator_ids=list(complete),
                    timestamp=latest,
                )
            )
        return records

    def rubric_means(self) -> dict[str, dict[str, float]]:
        """Per-dimension mean rubric score per meme, averaged over candidates
        and annotators (for the evaluation report's human columns)."""
        sums: dict[str, dict[str, float]] = {}
        counts: dict[str, int] = {}
        for (task_id, _), resp in self.responses.items():
            task = self.by_id[task_id]
            if task.kind != "rubric" or resp.rubric is None:
                continue
            agg = sums.setdefault(task.meme_id, {dim: 0.0 for dim in RUBRIC_DIMENSIONS})
            for dim in RUBRIC_DIMENSIONS:
                agg[dim] += resp.rubric[dim]
            counts[task.meme_id] = counts.get(task.meme_id, 0) + 1
        return {
            meme_id: {dim: total / counts[meme_id] for dim, total in agg.items()}
            for meme_id, agg in sums.items()
        }


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------


class ResponseBody(BaseModel):
    task_id: str
    annotator_id: str
    winner: str | None = None
    rubric: dict[str, int] | None = None
    timestamp: float | None = None


def create_app(service: AnnotationService, static_dir=None):
    app = FastAPI(title="memecap annotation service")

    @app.get("/tasks/next")
    def tasks_next(annotator: str):
        try:
            task = service.next_task(annotator)
        except UnknownAnnotatorError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if task is None:
            return JSONResponse({"task": None})
        return JSONResponse({"task": task.to_dict()})

    @app.post("/responses")
    def submit_response(body: ResponseBody):
        response = AnnotationResponse(
            task_id=body.task_id,
            annotator_id=body.annotator_id,
            winner=body.winner,
            rubric=dict(body.rubric) if body.rubric is not None else None,
            timestamp=body.timestamp if body.timestamp is not None else time.time(),
        )
        try:
            return JSONResponse(service.submit(response))
        except DuplicateResponseError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except UnknownAnnotatorError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/export/preferences")
    def export_preferences():
        return JSONResponse([r.to_dict() for r in service.export_preferences()])

    @app.get("/progress")
    def progress(annotator: str = None):
        try:
            return JSONResponse(service.progress(annotator))
        except UnknownAnnotatorError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/memes/{meme_id}/image")
    def meme_image(meme_id: str):
        if service.image_resolver is None:
            raise HTTPException(status_code=404, detail="no image resolver configured")
        path = service.image_resolver(meme_id)
        if path is None or not Path(path).exists():
            raise HTTPException(status_code=404, detail=f"no image for meme {meme_id}")
        return Response(content=Path(path).read_bytes(), media_type="image/png")

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=Path(static_dir), html=True), name="ui")

    return app
