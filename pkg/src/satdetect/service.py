"""HTTP API for the labeling and triage workflow.

The service is a thin, stateless shell: every fact it serves lives in
the label store, the task queue, or the artifacts handed to it at
startup, so restarting the process loses nothing. Labeling clients pull
leased tasks, post labels, and draw triage boxes over the detection
overlay; a triage box feeds ambiguous patches back into the training
queue.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .evalstats import LABELS, POLICIES, LabelRecord
from .geo import Patch, RasterTile
from .geoexport import Detection
from .labelstore import ConflictError, JsonLog, LabelStore, TaskQueue

TRIAGE_KINDS = ("false_positive_area", "false_negative_area")


@dataclass
class ServiceState:
    """Everything the endpoints read; assembled by the pipeline or tests."""

    store: LabelStore
    queue: TaskQueue
    patches: dict[str, Patch] = field(default_factory=dict)
    tiles: dict[str, RasterTile] = field(default_factory=dict)
    detections: list[Detection] = field(default_factory=list)
    metrics: dict | None = None
    triage_log: JsonLog | None = None
    _triage_fallback: list = field(default_factory=list)

    def patch_center(self, patch: Patch) -> tuple[float, float]:
        tile = self.tiles.get(patch.tile_id)
        if tile is None:
            return (float("nan"), float("nan"))
        return tile.transform.pixel_to_lonlat(patch.x + 32, patch.y + 32)

    def triage_entries(self) -> list[dict]:
        if self.triage_log is not None:
            return self.triage_log.items()
        return list(self._triage_fallback)

    def add_triage(self, entry: dict) -> dict:
        if self.triage_log is not None:
            return self.triage_log.append(entry)
        self._triage_fallback.append(entry)
        return entry


class LabelIn(BaseModel):
    task_id: str
    label: str
    labeler: str


class TriageIn(BaseModel):
    bbox: list[float]
    kind: str
    note: str = ""


def _parse_bbox(raw) -> tuple[float, float, float, float]:
    try:
        parts = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise HTTPException(400, "bbox must be four numbers")
    if len(parts) != 4:
        raise HTTPException(400, "bbox must be lon1,lat1,lon2,lat2")
    lon1, lat1, lon2, lat2 = parts
    if not (lon1 < lon2 and lat1 < lat2):
        raise HTTPException(400, "bbox corners must be min then max")
    return lon1, lat1, lon2, lat2


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="building detection labeler")
    app.state.svc = state
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def _malformed(request, exc):
        return JSONResponse(status_code=400, content={"detail": "malformed request"})

    @app.get("/api/tasks/next")
    def next_task(policy: str, labeler: str):
        if policy not in POLICIES:
            raise HTTPException(400, f"policy must be one of {POLICIES}")
        if not labeler:
            raise HTTPException(400, "labeler required")
        task = state.queue.next_task(policy, labeler)
        if task is None:
            return Response(status_code=204)
        view = task.to_view()
        view["image"] = f"/api/patches/{task.patch_id}.png"
        return view

    @app.post("/api/labels")
    def post_label(body: LabelIn):
        task = state.queue.get(body.task_id)
        if task is None:
            raise HTTPException(404, f"unknown task {body.task_id!r}")
        if body.label not in LABELS:
            raise HTTPException(400, f"label must be one of {LABELS}")
        if not body.labeler:
            raise HTTPException(400, "labeler required")
        rec = LabelRecord(
            patch_id=task.patch_id,
            label=body.label,
            labeler_id=body.labeler,
            policy=task.policy,
        )
        try:
            stored, new = state.store.append(rec)
        except ConflictError as exc:
            raise HTTPException(409, str(exc))
        state.queue.complete(task.task_id)
        return {"record": stored.to_dict(), "new": new}

    @app.get("/api/patches/{patch_id}.png")
    def patch_png(patch_id: str):
        patch = state.patches.get(patch_id)
        if patch is None:
            raise HTTPException(404, f"unknown patch {patch_id!r}")
        arr = np.clip(patch.pixels * 255.0, 0, 255).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/detections")
    def detections(bbox: str):
        lon1, lat1, lon2, lat2 = _parse_bbox(bbox.split(","))
        hits = [
            {
                "tile_id": d.tile_id,
                "lon": d.lon,
                "lat": d.lat,
                "score": d.score,
                "polygon": [[lon, lat] for lon, lat in d.polygon],
            }
            for d in state.detections
            if lon1 <= d.lon <= lon2 and lat1 <= d.lat <= lat2
        ]
        return {"detections": hits}

    @app.get("/api/metrics")
    def metrics():
        if state.metrics is None:
            raise HTTPException(404, "no evaluation has been run")
        return state.metrics

    @app.get("/api/triage")
    def triage_list():
        return {"entries": state.triage_entries()}

    @app.post("/api/triage")
    def post_triage(body: TriageIn):
        if body.kind not in TRIAGE_KINDS:
            raise HTTPException(400, f"kind must be one of {TRIAGE_KINDS}")
        lon1, lat1, lon2, lat2 = _parse_bbox(body.bbox)
        queued = 0
        for patch in state.patches.values():
            lon, lat = state.patch_center(patch)
            if lon1 <= lon <= lon2 and lat1 <= lat <= lat2:
                task_id = state.queue.task_id_for("train", patch.key)
                if state.queue.get(task_id) is None:
                    state.queue.enqueue(
                        patch.key, "train", source="active_learning", priority=1
                    )
                    queued += 1
        entry = {
            "id": len(state.triage_entries()) + 1,
            "bbox": [lon1, lat1, lon2, lat2],
            "kind": body.kind,
            "note": body.note,
            "queued": queued,
        }
        return state.add_triage(entry)

    return app
