"""Request/response schemas for the session service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ErrorBody(BaseModel):
    code: str
    message: str
    detail: str | None = None


class CreateSessionRequest(BaseModel):
    checkpoint: str
    seed: int | None = None


class CreateSessionResponse(BaseModel):
    session_id: str


class NewShotRequest(BaseModel):
    prompt: str
    chunks: int = Field(default=1, ge=1)


class NewShotResponse(BaseModel):
    shot_id: str
    modes: list[str]


class ExtendRequest(BaseModel):
    prompt: str | None = None
    chunks: int = Field(default=1, ge=1)
    reretrieve: bool = False


class ExtendResponse(BaseModel):
    modes: list[str]


class InjectResponse(BaseModel):
    injected: int
    keyframe_ids: list[int]


class JobResponse(BaseModel):
    job_id: str
    status: str
    poll_url: str | None = None
    result: dict | None = None
    error: ErrorBody | None = None


class PromptRange(BaseModel):
    prompt: str
    chunk_start: int
    chunk_end: int


class ShotSummary(BaseModel):
    shot_id: str
    chunks: int
    modes: list[str]
    keyframe_ids: list[int]
    prompts: list[PromptRange]


class CacheSnapshot(BaseModel):
    shot_cache_keyframe_ids: list[int]
    temporal_window_length: int
    current_mode: str


class RetrievalPreviewItem(BaseModel):
    keyframe_id: int
    score: float


class StateResponse(BaseModel):
    session_id: str
    created_at: float
    checkpoint: str
    seed: int
    shots: list[ShotSummary]
    keyframe_index: list[int]
    keyframe_sources: list[list]
    cache: CacheSnapshot
    retrieval_preview: list[RetrievalPreviewItem] | None = None
