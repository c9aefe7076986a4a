"""HTTP API for human audit sessions.

Serves one emitted dataset. Sessions are created, labeled, and reported
over a small JSON API; crops are rendered on demand from the source
images. Each session is persisted to its own file before a label is
acknowledged, and a per-session lock serializes writers, so a crashed
or reloaded client resumes exactly where the server's state says.

Endpoints:
    POST /api/sessions {dataset, n, seed} -> {session_id}
    GET  /api/sessions/{id}/next -> {box_id, image_url, box, remaining} | 204
    POST /api/sessions/{id}/labels {box_id, class} -> 200
    GET  /api/sessions/{id}/report -> class counts/percentages + person rate
    GET  /api/crops/{box_id} -> PNG bytes (?margin=N adds context pixels,
         with the box's position inside the patch in an X-Box header)
"""

from __future__ import annotations

import io
import json
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from . import audit
from .audit import AuditClass, AuditSession, SessionStore
from .corpus import ImageRecord
from .detect import PersonBox
from .emit import load_dataset
from .geometry import crop_region

DEFAULT_SAMPLE_N = audit.DEFAULT_SAMPLE_SIZE
_IMAGE_CACHE_SLOTS = 32


class SessionCreate(BaseModel):
    dataset: Optional[str] = None
    n: int = DEFAULT_SAMPLE_N
    seed: int = 0


class LabelSubmit(BaseModel):
    box_id: str
    # wire field name is "class"; values are AuditClass wire values
    class_: str = Field(alias="class")

    model_config = {"populate_by_name": True}


class AuditServer:
    """In-memory view of one dataset plus the sessions labeling it."""

    def __init__(
        self,
        dataset_path: str | Path,
        sessions_dir: str | Path,
        images_root: Optional[str | Path] = None,
    ):
        self.dataset_path = Path(dataset_path)
        self.images_root = Path(images_root) if images_root else None
        boxes, images = load_dataset(self.dataset_path)
        self.boxes: list[PersonBox] = boxes
        self.boxes_by_id: dict[str, PersonBox] = {b.box_id: b for b in boxes}
        self.images: dict[str, ImageRecord] = images
        self.store = SessionStore(sessions_dir)
        self.sessions: dict[str, AuditSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._image_cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache_lock = threading.Lock()

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def get_session(self, session_id: str) -> AuditSession:
        session = self.sessions.get(session_id)
        if session is None:
            if not self.store.exists(session_id):
                raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
            session = self.store.load(session_id)
            self.sessions[session_id] = session
        return session

    def resolve_image_path(self, record: ImageRecord) -> Path:
        path = Path(record.path)
        if not path.is_absolute() and self.images_root is not None:
            path = self.images_root / path
        return path

    def load_pixels(self, image_id: str) -> np.ndarray:
        with self._cache_lock:
            cached = self._image_cache.get(image_id)
            if cached is not None:
                self._image_cache.move_to_end(image_id)
                return cached
        record = self.images.get(image_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        path = self.resolve_image_path(record)
        try:
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("RGB"))
        except FileNotFoundError:
            raise HTTPException(status_code=404, detail=f"image file missing: {path}")
        with self._cache_lock:
            self._image_cache[image_id] = pixels
            while len(self._image_cache) > _IMAGE_CACHE_SLOTS:
                self._image_cache.popitem(last=False)
        return pixels


def create_app(
    dataset_path: str | Path,
    sessions_dir: str | Path,
    images_root: Optional[str | Path] = None,
    ui_dir: Optional[str | Path] = None,
) -> FastAPI:
    """Build the FastAPI app serving one dataset's audit API."""
    state = AuditServer(dataset_path, sessions_dir, images_root=images_root)
    app = FastAPI(title="personforge audit")
    app.state.audit = state

    @app.post("/api/sessions")
    def create_session(req: SessionCreate):
        if req.dataset is not None and Path(req.dataset) != state.dataset_path:
            raise HTTPException(
                status_code=400,
                detail=f"server is bound to dataset {str(state.dataset_path)!r}",
            )
        box_ids = [b.box_id for b in state.boxes]
        try:
            session = audit.sample_boxes(box_ids, n=req.n, seed=req.seed)
        except audit.SampleTooLarge as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        state.sessions[session.session_id] = session
        state.store.save(session)
        return {"session_id": session.session_id}

    @app.get("/api/sessions/{session_id}/next")
    def next_box(session_id: str):
        session = state.get_session(session_id)
        box_id = session.next_unlabeled()
        if box_id is None:
            return Response(status_code=204)
        box = state.boxes_by_id[box_id]
        return {
            "box_id": box_id,
            "image_url": f"/api/crops/{box_id}",
            "box": box.box.as_list(),
            "remaining": session.remaining,
        }

    @app.post("/api/sessions/{session_id}/labels")
    def submit_label(session_id: str, req: LabelSubmit):
        try:
            cls = AuditClass(req.class_)
        except ValueError:
            raise HTTPException(
                status_code=400,
                detail=f"unknown class {req.class_!r}; expected one of "
                + ", ".join(c.value for c in AuditClass),
            )
        with state.lock_for(session_id):
            session = state.get_session(session_id)
            try:
                audit.record_label(session, req.box_id, cls)
            except audit.UnknownBox as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            state.store.save(session)  # persist before acknowledging
            return {"ok": True, "remaining": session.remaining}

    @app.get("/api/sessions/{session_id}/report")
    def session_report(session_id: str):
        session = state.get_session(session_id)
        try:
            report = audit.audit_report(session)
        except audit.EmptySession as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return report.to_json()

    @app.get("/api/crops/{box_id}")
    def crop(box_id: str, margin: int = 0):
        box = state.boxes_by_id.get(box_id)
        if box is None:
            raise HTTPException(status_code=404, detail=f"unknown box {box_id!r}")
        pixels = state.load_pixels(box.image_id)
        img_h, img_w = pixels.shape[:2]
        headers = {}
        if margin > 0:
            x1 = max(0, int(box.box.x) - margin)
            y1 = max(0, int(box.box.y) - margin)
            x2 = min(img_w, int(np.ceil(box.box.x2)) + margin)
            y2 = min(img_h, int(np.ceil(box.box.y2)) + margin)
            patch = pixels[y1:y2, x1:x2]
            headers["X-Box"] = json.dumps(
                [box.box.x - x1, box.box.y - y1, box.box.w, box.box.h]
            )
        else:
            try:
                patch = crop_region(pixels, box.box)
            except ValueError as exc:
                raise HTTPException(status_code=500, detail=f"crop failed: {exc}")
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(patch)).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png", headers=headers)

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:

        @app.get("/")
        def index():
            return {
                "service": "personforge audit",
                "dataset": str(state.dataset_path),
                "endpoints": [
                    "POST /api/sessions",
                    "GET /api/sessions/{id}/next",
                    "POST /api/sessions/{id}/labels",
                    "GET /api/sessions/{id}/report",
                    "GET /api/crops/{box_id}",
                ],
            }

    return app
