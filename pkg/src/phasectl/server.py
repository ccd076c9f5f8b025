"""HTTP/JSON service for interactive phase-editing sessions.

A session holds a reference motion, its extracted phase parameters and a
baseline generation. Edits apply scalar part-level changes to the current
parameters, regenerate with the session seed, and report the realized
attribute ratios against the pre-edit baseline. Adopting a generated motion
makes it the new reference (its parameters are re-extracted), starting the
next refinement round.

Sessions live in memory; with a persistence directory every mutating request
is appended to one JSON-lines file per session and replayed on startup —
generation is seed-deterministic, so replay reconstructs the same motions.
"""
from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.requests import Request
from fastapi.responses import JSONResponse

from .errors import (EditInvalid, FormatError, PhasectlError,
                     ReferenceDegenerate, ShapeError)
from .evalsuite import ATTRIBUTES, effective_ratio
from .manifold import EditSpec, PhaseParams, apply_edit
from .motion import PARTS, Motion, Skeleton
from .pipeline import Pipeline, holdout_for

SCHEMA_NAMES = ("create-request", "edit-spec", "edit-response", "health",
                "motion", "phase-params", "session")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def motion_doc(motion: Motion, motion_id: str) -> dict:
    return {
        "id": motion_id,
        "fps": motion.fps,
        "label": motion.label,
        "skeleton": motion.skeleton.to_dict(),
        "frames": motion.frames.tolist(),
    }


def motion_from_doc(doc: dict, skeleton: Skeleton, n_frames: int) -> Motion:
    """Parse an uploaded motion; the rig and window length must match."""
    if not isinstance(doc, dict):
        raise FormatError("motion must be a JSON object")
    for key in ("fps", "skeleton", "frames"):
        if key not in doc:
            raise FormatError(f"motion is missing {key!r}")
    uploaded = Skeleton.from_dict(doc["skeleton"])
    if uploaded != skeleton:
        raise FormatError("uploaded skeleton does not match the service rig")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    motion = Motion(frames=frames, fps=float(doc["fps"]), skeleton=skeleton,
                    label=str(doc.get("label", "")))
    if motion.n_frames != n_frames:
        raise FormatError(
            f"motion must have {n_frames} frames, got {motion.n_frames}")
    return motion


@dataclass
class _Session:
    id: str
    seed: int
    class_id: int
    class_name: str
    reference: Motion
    reference_id: str
    params: PhaseParams
    baseline: Motion
    baseline_id: str
    created: str
    updated: str
    round: int = 0
    n_generated: int = 0
    history: list = field(default_factory=list)
    motion_ids: set = field(default_factory=set)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def next_motion_id(self) -> str:
        mid = f"{self.id}-g{self.n_generated:04d}"
        self.n_generated += 1
        return mid

    def doc(self) -> dict:
        return {
            "session_id": self.id,
            "status": "complete",
            "created": self.created,
            "updated": self.updated,
            "seed": self.seed,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "reference_id": self.reference_id,
            "baseline_id": self.baseline_id,
            "round": self.round,
            "params": self.params.to_dict(),
            "history": [dict(h) for h in self.history],
        }


class SessionStore:
    """All service state: sessions, generated motions, optional journal."""

    def __init__(self, pipeline: Pipeline, references: dict,
                 persist_dir: Path | None = None):
        self.pipeline = pipeline
        self.references = references  # class name -> clean reference Motion
        self.persist_dir = persist_dir
        self.sessions: dict[str, _Session] = {}
        self.motions: dict[str, Motion] = {}
        self._lock = threading.Lock()
        if persist_dir is not None:
            persist_dir.mkdir(parents=True, exist_ok=True)

    # -- persistence ----------------------------------------------------

    def _journal(self, sid: str, event: dict) -> None:
        if self.persist_dir is None:
            return
        with open(self.persist_dir / f"{sid}.jsonl", "a",
                  encoding="utf-8") as f:
            f.write(json.dumps(event) + "\n")

    def replay_journals(self) -> int:
        """Rebuild sessions from the persistence directory; returns count."""
        if self.persist_dir is None:
            return 0
        count = 0
        for path in sorted(self.persist_dir.glob("*.jsonl")):
            with open(path, "r", encoding="utf-8") as f:
                events = [json.loads(line) for line in f if line.strip()]
            if not events or events[0].get("event") != "create":
                continue
            head = events[0]
            motion = None
            if head.get("motion") is not None:
                motion = motion_from_doc(head["motion"],
                                         self.pipeline.vae.skeleton,
                                         self.pipeline.vae.n_frames)
            self.create(seed=head["seed"], class_name=head.get("class_name"),
                        motion=motion, sid=head["session_id"], journal=False)
            for ev in events[1:]:
                if ev["event"] == "edit":
                    self.edit(head["session_id"],
                              EditSpec.from_dict(ev["spec"]), journal=False)
                elif ev["event"] == "adopt":
                    self.adopt(head["session_id"], ev["generation_id"],
                               journal=False)
            count += 1
        return count

    # -- operations ------------------------------------------------------

    def _generate(self, session: _Session, params: PhaseParams) -> Motion:
        return self.pipeline.generate(session.class_id, session.seed, n=1,
                                      params_values=params.values)[0]

    def create(self, seed: int, class_name: str | None = None,
               motion: Motion | None = None, sid: str | None = None,
               journal: bool = True) -> _Session:
        names = self.pipeline.backbone.class_names
        if motion is not None:
            reference = motion
            if class_name in names:
                cname = class_name
            else:
                cname = motion.label if motion.label in names else names[0]
        else:
            if class_name not in self.references:
                raise EditInvalid(
                    f"unknown class {class_name!r}; known: {sorted(names)}")
            cname = class_name
            reference = self.references[cname]
        sid = sid or uuid.uuid4().hex[:12]
        params = self.pipeline.extractor.extract_phase(reference)
        now = _now()
        session = _Session(
            id=sid, seed=int(seed), class_id=names.index(cname),
            class_name=cname, reference=reference,
            reference_id=f"{sid}-ref", params=params,
            baseline=None, baseline_id="", created=now, updated=now)
        session.baseline = self._generate(session, params)
        session.baseline_id = session.next_motion_id()
        with self._lock:
            self.sessions[sid] = session
            self.motions[session.reference_id] = reference
            self.motions[session.baseline_id] = session.baseline
            session.motion_ids.update({session.reference_id,
                                       session.baseline_id})
        if journal:
            self._journal(sid, {
                "event": "create", "session_id": sid, "seed": int(seed),
                "class_name": cname,
                "motion": motion_doc(motion, f"{sid}-ref")
                if motion is not None else None})
        return session

    def get(self, sid: str) -> _Session:
        with self._lock:
            session = self.sessions.get(sid)
        if session is None:
            raise KeyError(sid)
        return session

    def edit(self, sid: str, spec: EditSpec, journal: bool = True) -> dict:
        session = self.get(sid)
        with session.lock:
            new_params = apply_edit(session.params, spec)
            generated = self._generate(session, new_params)
            ratios = {attr: {} for attr in ATTRIBUTES}
            for attr in ATTRIBUTES:
                for part in PARTS:
                    try:
                        ratios[attr][part] = effective_ratio(
                            generated, session.baseline, part, attr)
                    except ReferenceDegenerate:
                        ratios[attr][part] = None
            gid = session.next_motion_id()
            session.history.append({
                "spec": spec.to_dict(), "generation_id": gid,
                "round": session.round})
            session.params = new_params
            session.baseline = generated
            session.baseline_id = gid
            session.updated = _now()
            with self._lock:
                self.motions[gid] = generated
            session.motion_ids.add(gid)
            if journal:
                self._journal(sid, {"event": "edit", "spec": spec.to_dict()})
            return {
                "session_id": sid,
                "status": "complete",
                "generation_id": gid,
                "edited_parts": list(spec.edited_parts),
                "params": new_params.to_dict(),
                "ratios": ratios,
                "motion": motion_doc(generated, gid),
            }

    def adopt(self, sid: str, generation_id: str,
              journal: bool = True) -> _Session:
        session = self.get(sid)
        with session.lock:
            if generation_id not in session.motion_ids:
                raise KeyError(generation_id)
            with self._lock:
                adopted = self.motions[generation_id]
            session.reference = adopted
            session.reference_id = generation_id
            session.params = self.pipeline.extractor.extract_phase(adopted)
            session.round += 1
            session.baseline = self._generate(session, session.params)
            session.baseline_id = session.next_motion_id()
            with self._lock:
                self.motions[session.baseline_id] = session.baseline
            session.motion_ids.add(session.baseline_id)
            session.updated = _now()
            if journal:
                self._journal(sid, {"event": "adopt",
                                    "generation_id": generation_id})
            return session

    def motion(self, mid: str) -> Motion:
        with self._lock:
            motion = self.motions.get(mid)
        if motion is None:
            raise KeyError(mid)
        return motion


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"detail": message}, status_code=status)


def build_app(pipeline: Pipeline | None, cfg=None,
              persist_dir=None) -> FastAPI:
    """Assemble the service; `pipeline=None` serves 503 on model routes."""
    app = FastAPI(title="phasectl service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    store = None
    if pipeline is not None:
        references = {}
        if cfg is not None:
            for motion, _ in holdout_for(cfg):
                references.setdefault(motion.label, motion)
            missing = [n for n in pipeline.backbone.class_names
                       if n not in references]
            if missing:
                raise FormatError(f"no holdout reference for {missing}")
        store = SessionStore(pipeline, references,
                             persist_dir=Path(persist_dir)
                             if persist_dir else None)
        store.replay_journals()
    app.state.store = store

    def _ready():
        if store is None:
            return _error(503, "models are not loaded")
        return None

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "models_loaded": store is not None}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        guard = _ready()
        if guard:
            return guard
        try:
            body = await request.json()
        except Exception:
            return _error(400, "request body must be JSON")
        if not isinstance(body, dict):
            return _error(400, "request body must be a JSON object")
        seed = body.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            return _error(400, "seed must be an integer")
        class_name = body.get("class_name")
        if class_name is None and "class_id" in body:
            cid = body["class_id"]
            names = pipeline.backbone.class_names
            if not isinstance(cid, int) or not 0 <= cid < len(names):
                return _error(400, f"class_id must be in [0, {len(names)})")
            class_name = names[cid]
        motion = None
        if body.get("motion") is not None:
            try:
                motion = motion_from_doc(body["motion"],
                                         pipeline.vae.skeleton,
                                         pipeline.vae.n_frames)
            except (FormatError, ShapeError, ValueError) as e:
                return _error(400, str(e))
        if motion is None and class_name is None:
            return _error(400, "provide class_id, class_name or motion")
        try:
            session = store.create(seed=seed, class_name=class_name,
                                   motion=motion)
        except PhasectlError as e:
            return _error(400, str(e))
        doc = session.doc()
        doc["reference"] = motion_doc(session.reference, session.reference_id)
        doc["baseline"] = motion_doc(session.baseline, session.baseline_id)
        return JSONResponse(doc, status_code=201)

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        guard = _ready()
        if guard:
            return guard
        try:
            session = store.get(sid)
        except KeyError:
            return _error(404, f"unknown session {sid!r}")
        with session.lock:
            return session.doc()

    @app.post("/sessions/{sid}/edit")
    async def edit_session(sid: str, request: Request):
        guard = _ready()
        if guard:
            return guard
        try:
            body = await request.json()
        except Exception:
            return _error(422, "request body must be JSON")
        if not isinstance(body, dict):
            return _error(422, "edit spec must be a JSON object")
        try:
            spec = EditSpec.from_dict(body)
        except (EditInvalid, FormatError, TypeError, ValueError,
                AttributeError) as e:
            return _error(422, str(e))
        try:
            return store.edit(sid, spec)
        except KeyError:
            return _error(404, f"unknown session {sid!r}")

    @app.post("/sessions/{sid}/adopt")
    async def adopt_generation(sid: str, request: Request):
        guard = _ready()
        if guard:
            return guard
        try:
            body = await request.json()
        except Exception:
            return _error(422, "request body must be JSON")
        gid = body.get("generation_id") if isinstance(body, dict) else None
        if not isinstance(gid, str):
            return _error(422, "generation_id must be a string")
        try:
            session = store.adopt(sid, gid)
        except KeyError as e:
            return _error(404, f"unknown session or generation {e.args[0]!r}")
        with session.lock:
            doc = session.doc()
            doc["reference"] = motion_doc(session.reference,
                                          session.reference_id)
            doc["baseline"] = motion_doc(session.baseline,
                                         session.baseline_id)
        return doc

    @app.get("/motions/{mid}")
    def get_motion(mid: str):
        guard = _ready()
        if guard:
            return guard
        try:
            motion = store.motion(mid)
        except KeyError:
            return _error(404, f"unknown motion {mid!r}")
        return motion_doc(motion, mid)

    @app.get("/schemas")
    def list_schemas():
        return {"schemas": [f"/schemas/{n}" for n in SCHEMA_NAMES]}

    @app.get("/schemas/{name}")
    def get_schema(name: str):
        if name.endswith(".json"):
            name = name[: -len(".json")]
        if name not in SCHEMA_NAMES:
            return _error(404, f"unknown schema {name!r}")
        text = resources.files("phasectl").joinpath(
            f"schemas/{name}.json").read_text(encoding="utf-8")
        return JSONResponse(json.loads(text))

    return app
