"""HTTP session service: interactive multi-shot generation over JSON."""

from __future__ import annotations

import io
import threading
import uuid
import zipfile

import numpy as np
from fastapi import FastAPI, Query, Request, UploadFile
from fastapi.responses import JSONResponse, Response

from ..cache import TooManyConcepts
from ..config import RunConfig
from ..engine import NoActiveShot, Session
from ..promptlang import PromptSemanticError, PromptSyntaxError, render_prompt
from .models import (
    CacheSnapshot,
    CreateSessionRequest,
    CreateSessionResponse,
    ErrorBody,
    ExtendRequest,
    ExtendResponse,
    InjectResponse,
    JobResponse,
    NewShotRequest,
    NewShotResponse,
    PromptRange,
    RetrievalPreviewItem,
    ShotSummary,
    StateResponse,
)
from .state import SessionBusy, SessionStore, UnknownCheckpoint, UnknownSession


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail: str | None = None):
        self.status = status
        self.body = ErrorBody(code=code, message=message, detail=detail)


def frame_to_png_bytes(frame: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.rint((frame.astype(np.float64) + 1.0) * 127.5), 0, 255)
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_frame(data: bytes, frame_size: int) -> np.ndarray:
    from PIL import Image

    img = Image.open(io.BytesIO(data)).convert("RGB")
    if img.size != (frame_size, frame_size):
        img = img.resize((frame_size, frame_size), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float64)
    return (arr / 127.5 - 1.0).astype(np.float32)


def _state_response(session: Session, preview_prompt: str | None) -> StateResponse:
    preview = None
    if preview_prompt is not None:
        try:
            preview = [RetrievalPreviewItem(keyframe_id=i, score=s)
                       for i, s in session.retrieval_preview(preview_prompt)]
        except (PromptSyntaxError, PromptSemanticError) as exc:
            raise ApiError(400, "bad_prompt", str(exc))
    return StateResponse(
        session_id=session.session_id,
        created_at=session.created_at,
        checkpoint=session.checkpoint_id,
        seed=session.seed,
        shots=[ShotSummary(
            shot_id=s.shot_id, chunks=s.chunks, modes=s.modes,
            keyframe_ids=s.keyframe_ids,
            prompts=[PromptRange(prompt=render_prompt(a),
                                 chunk_start=r[0], chunk_end=r[1])
                     for a, r in s.prompt_history],
        ) for s in session.shots],
        keyframe_index=[e.id for e in session.store],
        keyframe_sources=[list(e.source) for e in session.store],
        cache=CacheSnapshot(
            shot_cache_keyframe_ids=[] if session.shot_cache is None
            else [e.id for e in session.shot_cache.entries],
            temporal_window_length=len(session.temporal),
            current_mode=session.mode,
        ),
        retrieval_preview=preview,
    )


def create_app(cfg: RunConfig | None = None, ui_dir: str | None = None) -> FastAPI:
    cfg = cfg or RunConfig()
    app = FastAPI(title="multishot studio service")
    store = SessionStore(cfg)
    app.state.store = store

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body.model_dump())

    def _locked(session_id: str):
        runtime = _get(session_id)
        if not runtime.lock.acquire(blocking=False):
            raise ApiError(409, "busy", f"generation already in progress for {session_id}")
        return runtime

    def _get(session_id: str):
        try:
            return store.get(session_id)
        except UnknownSession:
            raise ApiError(404, "unknown_session", f"no session {session_id}")

    def _parse_errors(exc: Exception) -> ApiError:
        if isinstance(exc, PromptSyntaxError):
            return ApiError(400, "prompt_syntax",
                            str(exc), detail=f"position {exc.position}, expected {exc.expected}")
        if isinstance(exc, PromptSemanticError):
            return ApiError(400, "prompt_semantics", str(exc))
        if isinstance(exc, NoActiveShot):
            return ApiError(409, "no_active_shot", str(exc))
        if isinstance(exc, TooManyConcepts):
            return ApiError(413, "too_many_concepts", str(exc))
        raise exc

    def _run_job(fn, runtime) -> dict:
        job_id = str(uuid.uuid4())
        store.jobs[job_id] = {"status": "running", "result": None, "error": None,
                              "session_id": runtime.session.session_id}

        def work():
            try:
                result = fn()
                store.jobs[job_id].update(status="done", result=result)
            except Exception as exc:  # job errors surface at the poll endpoint
                try:
                    api = _parse_errors(exc)
                    store.jobs[job_id].update(status="error",
                                              error=api.body.model_dump())
                except Exception:
                    store.jobs[job_id].update(status="error", error={
                        "code": "internal", "message": str(exc), "detail": None})
            finally:
                runtime.lock.release()

        threading.Thread(target=work, daemon=True).start()
        return {"job_id": job_id}

    @app.post("/sessions", response_model=CreateSessionResponse, status_code=201)
    def create_session(body: CreateSessionRequest):
        try:
            session = store.create(body.checkpoint, body.seed)
        except UnknownCheckpoint as exc:
            raise ApiError(404, "unknown_checkpoint", f"no checkpoint {exc.args[0]}")
        return CreateSessionResponse(session_id=session.session_id)

    @app.post("/sessions/{session_id}/shots")
    def new_shot(session_id: str, body: NewShotRequest,
                 async_: int = Query(default=0, alias="async")):
        runtime = _locked(session_id)

        def work():
            session = runtime.session
            try:
                shot = session.new_shot(body.prompt, body.chunks)
            except Exception as exc:
                raise _parse_errors(exc)
            store.persist(session)
            return NewShotResponse(shot_id=shot.shot_id,
                                   modes=shot.modes[-body.chunks:]).model_dump()

        if async_:
            job = _run_job(work, runtime)
            return JSONResponse(status_code=202, content=JobResponse(
                job_id=job["job_id"], status="running",
                poll_url=f"/sessions/{session_id}/jobs/{job['job_id']}").model_dump())
        try:
            return work()
        finally:
            runtime.lock.release()

    @app.post("/sessions/{session_id}/shots/current/extend")
    def extend_shot(session_id: str, body: ExtendRequest,
                    async_: int = Query(default=0, alias="async")):
        runtime = _locked(session_id)

        def work():
            session = runtime.session
            try:
                shot = session.extend_shot(body.prompt, body.chunks,
                                           reretrieve=body.reretrieve)
            except Exception as exc:
                raise _parse_errors(exc)
            store.persist(session)
            return ExtendResponse(modes=shot.modes[-body.chunks:]).model_dump()

        if async_:
            job = _run_job(work, runtime)
            return JSONResponse(status_code=202, content=JobResponse(
                job_id=job["job_id"], status="running",
                poll_url=f"/sessions/{session_id}/jobs/{job['job_id']}").model_dump())
        try:
            return work()
        finally:
            runtime.lock.release()

    @app.get("/sessions/{session_id}/jobs/{job_id}", response_model=JobResponse)
    def poll_job(session_id: str, job_id: str):
        job = store.jobs.get(job_id)
        if job is None or job["session_id"] != session_id:
            raise ApiError(404, "unknown_job", f"no job {job_id}")
        return JobResponse(job_id=job_id, status=job["status"],
                           result=job["result"],
                           error=ErrorBody(**job["error"]) if job["error"] else None)

    @app.post("/sessions/{session_id}/concepts", response_model=InjectResponse)
    async def inject_concepts(session_id: str, images: list[UploadFile]):
        runtime = _locked(session_id)
        try:
            session = runtime.session
            if not images:
                raise ApiError(400, "no_images", "at least one concept image required")
            if len(images) > cfg.cache.k:
                raise ApiError(413, "too_many_concepts",
                               f"at most {cfg.cache.k} concept images")
            frames = []
            fs = cfg.model.frame_size
            for up in images:
                data = await up.read()
                try:
                    frames.append(png_bytes_to_frame(data, fs))
                except Exception:
                    raise ApiError(400, "undecodable_image",
                                   f"cannot decode {up.filename or 'image'}")
            try:
                ids = session.inject_concepts(frames)
            except Exception as exc:
                raise _parse_errors(exc)
            store.persist(session)
            return InjectResponse(injected=len(ids), keyframe_ids=ids)
        finally:
            runtime.lock.release()

    @app.get("/sessions/{session_id}/state", response_model=StateResponse,
             response_model_exclude_none=True)
    def get_state(session_id: str, prompt: str | None = None):
        runtime = _get(session_id)
        return _state_response(runtime.session, prompt)

    @app.get("/sessions/{session_id}/shots/{shot_id}/frames")
    def get_frames(session_id: str, shot_id: str, format: str = "json"):
        runtime = _get(session_id)
        session = runtime.session
        shot = next((s for s in session.shots if s.shot_id == shot_id), None)
        if shot is None:
            raise ApiError(404, "unknown_shot", f"no shot {shot_id}")
        if format == "json":
            return {"shot_id": shot_id, "n_frames": int(shot.frames.shape[0]),
                    "frames": shot.frames.astype(float).tolist()}
        if format == "png":
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
                for i, frame in enumerate(shot.frames):
                    zf.writestr(f"{shot_id}_{i:04d}.png", frame_to_png_bytes(frame))
            return Response(content=buf.getvalue(), media_type="application/zip")
        raise ApiError(400, "bad_format", f"unknown format {format!r}")

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
