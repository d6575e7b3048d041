"""Dual-level conditioning cache and the attention-cost model.

The shot cache holds top-K retrieved (or injected) keyframes for cross-shot
consistency; the temporal cache is a tier-compressed sliding window of the
most recent latents for within-shot coherence.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .config import CacheConfig


class TooManyConcepts(ValueError):
    pass


@dataclass(frozen=True)
class KeyframeEntry:
    id: int
    frame: np.ndarray
    embedding: np.ndarray
    # ("generated", shot_id, chunk_index) or ("injected",)
    source: tuple

    def __post_init__(self):
        self.frame.setflags(write=False)
        self.embedding.setflags(write=False)


class KeyframeStore:
    """Append-only session-wide keyframe list; one writer, many readers."""

    def __init__(self):
        self._entries: list[KeyframeEntry] = []
        self._lock = threading.Lock()

    def add(self, frame: np.ndarray, embedding: np.ndarray, source: tuple) -> KeyframeEntry:
        with self._lock:
            entry = KeyframeEntry(id=len(self._entries), frame=frame.copy(),
                                  embedding=np.asarray(embedding, dtype=np.float64).copy(),
                                  source=source)
            self._entries.append(entry)
            return entry

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    def __getitem__(self, entry_id: int) -> KeyframeEntry:
        return self._entries[entry_id]

    def entries(self) -> list[KeyframeEntry]:
        return list(self._entries)


@dataclass
class ShotCache:
    entries: list[KeyframeEntry] = field(default_factory=list)
    k: int = 3

    def __post_init__(self):
        if len(self.entries) > self.k:
            raise TooManyConcepts(f"shot cache holds at most {self.k} entries")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def empty(self) -> bool:
        return not self.entries


def retrieve(store: KeyframeStore, prompt_embedding: np.ndarray, k: int) -> ShotCache:
    """Top-k keyframes by cosine similarity to the prompt embedding.

    Exact contract: ties broken by lower entry id; result ordered by
    descending similarity. Similarities are plain per-entry dot products so
    a brute-force oracle reproduces them bit-for-bit.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(-float(np.dot(e.embedding, prompt_embedding)), e.id, e)
              for e in store]
    scored.sort(key=lambda t: (t[0], t[1]))
    return ShotCache(entries=[e for _, _, e in scored[:k]], k=k)


def retrieval_scores(store: KeyframeStore, prompt_embedding: np.ndarray,
                     k: int) -> list[tuple[int, float]]:
    """(entry id, similarity) pairs for the would-be retrieval, best first."""
    cache = retrieve(store, prompt_embedding, k)
    return [(e.id, float(np.dot(e.embedding, prompt_embedding))) for e in cache.entries]


def inject(frames: list[np.ndarray], embed_image, k: int) -> ShotCache:
    """Build a shot cache directly from user concept frames."""
    if not frames:
        raise ValueError("at least one concept frame required")
    if len(frames) > k:
        raise TooManyConcepts(f"at most {k} concept frames, got {len(frames)}")
    entries = [KeyframeEntry(id=-1, frame=np.asarray(f, dtype=np.float32).copy(),
                             embedding=embed_image(f), source=("injected",))
               for f in frames]
    return ShotCache(entries=entries, k=k)


class TemporalCache:
    """Sliding window of recent latents, newest first, tier-compressed."""

    def __init__(self, cfg: CacheConfig | None = None):
        self.cfg = cfg or CacheConfig()
        self.window: list[np.ndarray] = []

    @property
    def capacity(self) -> int:
        return self.cfg.window_capacity

    @property
    def empty(self) -> bool:
        return not self.window

    def __len__(self) -> int:
        return len(self.window)

    def clear(self) -> None:
        self.window = []

    def push_latents(self, latents: list[np.ndarray]) -> None:
        """Latents arrive in generation order; newest ends up at position 0."""
        for latent in latents:
            self.window.insert(0, latent)
        del self.window[self.capacity:]

    def tier_ratio(self, position: int) -> int:
        """Compression ratio for the latent at a recency position (0 = newest)."""
        offset = 0
        for count, ratio in self.cfg.tier_table:
            if position < offset + count:
                return ratio
            offset += count
        raise IndexError(f"position {position} beyond window capacity")

    def compress(self, tokens_per_latent: int, patchify=None) -> list[tuple[np.ndarray, int, int]]:
        """Mean-pool each latent's patch tokens down to ceil(T/ratio) tokens.

        Pooling groups are contiguous runs of patch tokens in row-major
        order. Returns (token, recency_position, group_index) triples ordered
        oldest to newest; every latent emits at least one token.
        """
        if tokens_per_latent < 1:
            raise ValueError("tokens_per_latent must be >= 1")
        if patchify is None:
            from .diffusion.tokens import patchify
        out: list[tuple[np.ndarray, int, int]] = []
        for pos in range(len(self.window) - 1, -1, -1):
            ratio = self.tier_ratio(pos)
            tokens = patchify(self.window[pos])
            if tokens.shape[0] != tokens_per_latent:
                raise ValueError("latent does not patchify to tokens_per_latent")
            n_out = max(1, ceil(tokens_per_latent / ratio))
            bounds = np.linspace(0, tokens_per_latent, n_out + 1).astype(int)
            for g in range(n_out):
                pooled = tokens[bounds[g]:bounds[g + 1]].mean(axis=0)
                out.append((pooled, pos, g))
        return out

    def token_count(self, tokens_per_latent: int) -> int:
        return sum(max(1, ceil(tokens_per_latent / self.tier_ratio(p)))
                   for p in range(len(self.window)))


def latent_equivalents(tier_table) -> float:
    """Context size of a full window in latent units: sum of count/ratio."""
    return float(sum(count / ratio for count, ratio in tier_table))


@dataclass(frozen=True)
class CostReport:
    total_latents: int
    chunk_latents: int
    k: int
    steps: float
    per_step_context: float
    chunked_cost: float
    full_cost: float

    def to_dict(self) -> dict:
        return {
            "total_latents": self.total_latents,
            "chunk_latents": self.chunk_latents,
            "k": self.k,
            "steps": self.steps,
            "per_step_context": self.per_step_context,
            "chunked_cost": self.chunked_cost,
            "full_cost": self.full_cost,
        }


def cost_analysis(total_latents: int, chunk_latents: int, k: int,
                  tier_table) -> CostReport:
    """Attention-cost comparison: one full-history pass vs chunked passes.

    steps is real-valued to keep the accounting exact even when the latent
    count is not a chunk multiple; the generation engine itself always runs
    a whole number of chunks.
    """
    if total_latents < 1 or chunk_latents < 1:
        raise ValueError("latent counts must be positive")
    if k < 0:
        raise ValueError("k must be >= 0")
    if chunk_latents > total_latents:
        raise ValueError("chunk_latents cannot exceed total_latents")
    steps = total_latents / chunk_latents
    context = k + latent_equivalents(tier_table) + chunk_latents
    return CostReport(
        total_latents=total_latents,
        chunk_latents=chunk_latents,
        k=k,
        steps=steps,
        per_step_context=context,
        chunked_cost=steps * context * context,
        full_cost=float((k + total_latents) ** 2),
    )
