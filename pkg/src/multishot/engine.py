"""Interactive multi-shot session: chunked autoregressive generation driven
by the dual-level cache, plus durable session persistence.

Mode invariant: the mode of every generation step is a pure function of
cache emptiness, recorded immediately before the step runs. The temporal
cache is cleared at every shot boundary; keyframes (one per chunk, center
frame) accumulate in an append-only store for later retrieval.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .cache import (
    KeyframeEntry,
    KeyframeStore,
    ShotCache,
    TemporalCache,
    TooManyConcepts,
    retrieve,
    retrieval_scores,
)
from .config import CacheConfig, EmbedConfig, SamplerConfig
from .diffusion.model import DenoiserModel
from .diffusion.sampler import sample_chunk
from .diffusion.schedule import NoiseSchedule
from .embed import Embedder
from .promptlang import AttributeSet, parse_prompt, render_prompt
from .tensorio import read_tensor, write_tensor

MODE_NO_CACHE = "NoCache"
MODE_TEMPORAL_ONLY = "TemporalOnly"
MODE_SHOT_ONLY = "ShotOnly"
MODE_FULL_CACHE = "FullCache"


class NoActiveShot(RuntimeError):
    pass


class ModelNotReady(RuntimeError):
    pass


def mode_of(temporal_empty: bool, shot_empty: bool) -> str:
    if temporal_empty and shot_empty:
        return MODE_NO_CACHE
    if shot_empty:
        return MODE_TEMPORAL_ONLY
    if temporal_empty:
        return MODE_SHOT_ONLY
    return MODE_FULL_CACHE


@dataclass
class Shot:
    shot_id: str
    prompt_history: list[tuple[AttributeSet, tuple[int, int]]]
    frames: np.ndarray          # (n_frames, H, W, 3) float32
    keyframe_ids: list[int] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)

    @property
    def chunks(self) -> int:
        return len(self.modes)


def _chunk_seed(session_seed: int, shot_index: int, chunk_index: int) -> int:
    ss = np.random.SeedSequence([session_seed, shot_index, chunk_index])
    return int(ss.generate_state(1)[0])


class Session:
    def __init__(self, model: DenoiserModel | None, embedder: Embedder,
                 cache_cfg: CacheConfig, sampler_cfg: SamplerConfig,
                 seed: int, session_id: str, checkpoint_id: str = ""):
        self.model = model
        self.embedder = embedder
        self.cache_cfg = cache_cfg
        self.sampler_cfg = sampler_cfg
        self.seed = seed
        self.session_id = session_id
        self.checkpoint_id = checkpoint_id
        self.created_at = time.time()
        self.schedule = None
        if model is not None:
            self.schedule = NoiseSchedule(model.cfg.timesteps, model.cfg.beta_start,
                                          model.cfg.beta_end)
        self.store = KeyframeStore()
        self.temporal = TemporalCache(cache_cfg)
        self.shot_cache: ShotCache | None = None
        self.shots: list[Shot] = []
        self.pending_injection: list[KeyframeEntry] | None = None

    # ---------------- state inspection ----------------

    @property
    def mode(self) -> str:
        shot_empty = self.shot_cache is None or self.shot_cache.empty
        return mode_of(self.temporal.empty, shot_empty)

    @property
    def mode_history(self) -> list[str]:
        return [m for shot in self.shots for m in shot.modes]

    def retrieval_preview(self, prompt: str | AttributeSet) -> list[tuple[int, float]]:
        """Dry-run top-K retrieval for a prompt; never mutates state."""
        attrs = parse_prompt(prompt) if isinstance(prompt, str) else prompt
        return retrieval_scores(self.store, self.embedder.embed_text(attrs),
                                self.cache_cfg.k)

    def frames_digest(self) -> str:
        h = hashlib.sha256()
        for shot in self.shots:
            h.update(np.ascontiguousarray(shot.frames, dtype="<f4").tobytes())
        return h.hexdigest()

    # ---------------- generation ----------------

    def _generate_chunks(self, shot: Shot, shot_index: int,
                         attrs: AttributeSet, n_chunks: int) -> list[str]:
        if self.model is None:
            raise ModelNotReady("session has no loaded model")
        cl = self.model.cfg.chunk_latents
        prompt_embedding = self.embedder.embed_text(attrs)
        cache = None if (self.shot_cache is None or self.shot_cache.empty) \
            else self.shot_cache
        modes = []
        for _ in range(n_chunks):
            chunk_index = shot.chunks
            modes.append(self.mode)
            chunk = sample_chunk(self.model, prompt_embedding, self.temporal,
                                 cache, self.schedule, self.sampler_cfg,
                                 _chunk_seed(self.seed, shot_index, chunk_index))
            shot.frames = np.concatenate([shot.frames, chunk], axis=0) \
                if shot.frames.size else chunk
            self.temporal.push_latents([np.asarray(f, dtype=np.float64) for f in chunk])
            keyframe = chunk[cl // 2]
            entry = self.store.add(keyframe, self.embedder.embed_image(keyframe),
                                   ("generated", shot.shot_id, chunk_index))
            shot.keyframe_ids.append(entry.id)
            shot.modes.append(modes[-1])
        return modes

    def new_shot(self, prompt: str | AttributeSet, n_chunks: int) -> Shot:
        """Start a new shot: temporal cache cleared, shot cache retrieved
        (or taken from a pending injection)."""
        if n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        attrs = parse_prompt(prompt) if isinstance(prompt, str) else prompt
        self.temporal.clear()
        if self.pending_injection is not None:
            self.shot_cache = ShotCache(entries=list(self.pending_injection),
                                        k=self.cache_cfg.k)
            self.pending_injection = None
        else:
            self.shot_cache = retrieve(self.store,
                                       self.embedder.embed_text(attrs),
                                       self.cache_cfg.k)
        fs = self.model.cfg.frame_size if self.model else 16
        shot = Shot(shot_id=f"shot{len(self.shots):04d}",
                    prompt_history=[], frames=np.zeros((0, fs, fs, 3), np.float32))
        shot_index = len(self.shots)
        self.shots.append(shot)
        self._generate_chunks(shot, shot_index, attrs, n_chunks)
        shot.prompt_history.append((attrs, (0, n_chunks)))
        return shot

    def extend_shot(self, prompt: str | AttributeSet | None, n_chunks: int,
                    reretrieve: bool = False) -> Shot:
        """Continue the active shot; an optional new prompt replaces the text
        conditioning from the next chunk on. The shot cache stays fixed
        unless reretrieve is set."""
        if not self.shots:
            raise NoActiveShot("no shot to extend")
        if n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        shot = self.shots[-1]
        shot_index = len(self.shots) - 1
        if prompt is None:
            attrs = shot.prompt_history[-1][0]
        else:
            attrs = parse_prompt(prompt) if isinstance(prompt, str) else prompt
            if reretrieve:
                self.shot_cache = retrieve(self.store,
                                           self.embedder.embed_text(attrs),
                                           self.cache_cfg.k)
        start = shot.chunks
        self._generate_chunks(shot, shot_index, attrs, n_chunks)
        shot.prompt_history.append((attrs, (start, start + n_chunks)))
        return shot

    def inject_concepts(self, frames: list[np.ndarray]) -> list[int]:
        """Stage concept frames as the next shot's cache (consumed once);
        they also join the keyframe store for later retrieval."""
        if not frames:
            raise ValueError("at least one concept frame required")
        if len(frames) > self.cache_cfg.k:
            raise TooManyConcepts(
                f"at most {self.cache_cfg.k} concepts, got {len(frames)}")
        entries = []
        for f in frames:
            f32 = np.asarray(f, dtype=np.float32)
            entries.append(self.store.add(f32, self.embedder.embed_image(f32),
                                          ("injected",)))
        self.pending_injection = entries
        return [e.id for e in entries]

    # ---------------- persistence ----------------

    def save(self, session_dir: str) -> None:
        """Write-ahead ordering: tensors first, manifest last (atomic)."""
        os.makedirs(os.path.join(session_dir, "shots"), exist_ok=True)
        fs = self.model.cfg.frame_size if self.model else 16
        for shot in self.shots:
            write_tensor(os.path.join(session_dir, "shots", f"{shot.shot_id}.fwtn"),
                         shot.frames)
        kf = np.stack([e.frame for e in self.store]) if len(self.store) \
            else np.zeros((0, fs, fs, 3), np.float32)
        write_tensor(os.path.join(session_dir, "keyframes.fwtn"), kf)
        manifest = {
            "session_id": self.session_id,
            "seed": self.seed,
            "checkpoint_id": self.checkpoint_id,
            "created_at": self.created_at,
            "shots": [{
                "shot_id": s.shot_id,
                "chunks": s.chunks,
                "modes": s.modes,
                "keyframe_ids": s.keyframe_ids,
                "prompts": [[render_prompt(a), list(rng)] for a, rng in s.prompt_history],
                "tensor": f"shots/{s.shot_id}.fwtn",
            } for s in self.shots],
            "keyframe_sources": [list(e.source) for e in self.store],
            "pending_injection": None if self.pending_injection is None
            else [e.id for e in self.pending_injection],
            "shot_cache_ids": None if self.shot_cache is None
            else [e.id for e in self.shot_cache.entries],
        }
        path = os.path.join(session_dir, "session.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, session_dir: str, model: DenoiserModel | None,
             embedder: Embedder, cache_cfg: CacheConfig,
             sampler_cfg: SamplerConfig) -> "Session":
        with open(os.path.join(session_dir, "session.json")) as fh:
            manifest = json.load(fh)
        session = cls(model, embedder, cache_cfg, sampler_cfg,
                      seed=manifest["seed"], session_id=manifest["session_id"],
                      checkpoint_id=manifest["checkpoint_id"])
        session.created_at = manifest["created_at"]
        keyframes = read_tensor(os.path.join(session_dir, "keyframes.fwtn"))
        for frame, source in zip(keyframes, manifest["keyframe_sources"]):
            session.store.add(frame, embedder.embed_image(frame), tuple(source))
        for rec in manifest["shots"]:
            frames = read_tensor(os.path.join(session_dir, rec["tensor"]))
            shot = Shot(shot_id=rec["shot_id"],
                        prompt_history=[(parse_prompt(p), tuple(rng))
                                        for p, rng in rec["prompts"]],
                        frames=frames,
                        keyframe_ids=list(rec["keyframe_ids"]),
                        modes=list(rec["modes"]))
            session.shots.append(shot)
        if session.shots:
            last = session.shots[-1].frames
            cl = model.cfg.chunk_latents if model else 6
            history = last[-min(session.temporal.capacity, last.shape[0]):]
            session.temporal.push_latents([np.asarray(f, np.float64) for f in history])
        if manifest["shot_cache_ids"] is not None:
            session.shot_cache = ShotCache(
                entries=[session.store[i] for i in manifest["shot_cache_ids"]],
                k=cache_cfg.k)
        if manifest["pending_injection"] is not None:
            session.pending_injection = [session.store[i]
                                         for i in manifest["pending_injection"]]
        return session


def start_session(model: DenoiserModel, embedder: Embedder,
                  cache_cfg: CacheConfig, sampler_cfg: SamplerConfig,
                  seed: int, session_id: str, checkpoint_id: str = "") -> Session:
    return Session(model, embedder, cache_cfg, sampler_cfg, seed,
                   session_id, checkpoint_id)


def run_script(session: Session, script: list[dict],
               load_image=None) -> list[dict]:
    """Replay a session script: a JSON list of commands
    [{op: new_shot|extend|inject, ...}]. Returns per-command results."""
    results = []
    for cmd in script:
        op = cmd.get("op")
        if op == "new_shot":
            shot = session.new_shot(cmd["prompt"], int(cmd.get("chunks", 1)))
            results.append({"op": op, "shot_id": shot.shot_id,
                            "modes": shot.modes[-int(cmd.get("chunks", 1)):]})
        elif op == "extend":
            shot = session.extend_shot(cmd.get("prompt"), int(cmd.get("chunks", 1)),
                                       reretrieve=bool(cmd.get("reretrieve", False)))
            results.append({"op": op, "shot_id": shot.shot_id,
                            "modes": shot.modes[-int(cmd.get("chunks", 1)):]})
        elif op == "inject":
            if "frames" in cmd:
                frames = [np.asarray(f, dtype=np.float32) for f in cmd["frames"]]
            else:
                if load_image is None:
                    raise ValueError("inject by image path needs a loader")
                frames = [load_image(p) for p in cmd["images"]]
            ids = session.inject_concepts(frames)
            results.append({"op": op, "injected": len(ids), "keyframe_ids": ids})
        else:
            raise ValueError(f"unknown script op {op!r}")
    return results
