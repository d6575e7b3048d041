"""Scene-level evaluation: character/overall consistency and text alignment.

Pairwise metrics sort their similarity lists before averaging so results are
exactly invariant to shot order. A metric with no qualifying samples is
reported as absent (None), never as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import Embedder, crop_to_frame, sim
from .promptlang import AttributeSet, CharacterSpec


class NoCharactersDetected(ValueError):
    pass


@dataclass
class ShotEval:
    """One shot's evaluation inputs: its keyframes and governing prompt."""
    keyframes: list[np.ndarray]
    attrs: AttributeSet


@dataclass
class MetricsReport:
    char_consistency: float | None
    all_consistency: float | None
    char_alignment: float | None
    all_alignment: float | None
    per_scene: list[dict] = field(default_factory=list)
    n_scenes: int = 0

    def to_dict(self) -> dict:
        return {
            "char_consistency": self.char_consistency,
            "all_consistency": self.all_consistency,
            "char_alignment": self.char_alignment,
            "all_alignment": self.all_alignment,
            "n_scenes": self.n_scenes,
            "per_scene": self.per_scene,
        }


def _attr_distance(a: CharacterSpec, b: CharacterSpec) -> int:
    d = 0
    for field_name in ("shape", "color", "size"):
        va, vb = getattr(a, field_name), getattr(b, field_name)
        if va is not None and vb is not None and va != vb:
            d += 1
        elif (va is None) != (vb is None):
            d += 1
    return d


def _mean_sorted(values: list[float]) -> float:
    return float(np.mean(np.sort(np.asarray(values, dtype=np.float64))))


def _character_crops(shots: list[ShotEval], embedder: Embedder
                     ) -> dict[str, list[tuple[int, np.ndarray]]]:
    """Crop embeddings grouped by prompt-character identity.

    Each detection is assigned to the nearest captioned character by
    attribute distance; crops are upscaled to frame resolution before
    embedding. Returns identity -> [(shot_index, embedding)].
    """
    out: dict[str, list[tuple[int, np.ndarray]]] = {}
    for si, shot in enumerate(shots):
        chars = shot.attrs.characters
        if not chars:
            continue
        for frame in shot.keyframes:
            for det in embedder.detect_sprites(frame):
                dists = [_attr_distance(det.char, c) for c in chars]
                best = int(np.argmin(dists))
                crop = crop_to_frame(frame, det.box, out_size=frame.shape[0])
                emb = embedder.embed_image(crop)
                out.setdefault(chars[best].id, []).append((si, emb))
    return out


def char_consistency(shots: list[ShotEval], embedder: Embedder) -> float | None:
    """Mean pairwise similarity of same-character crops across different
    shots, averaged over identities; absent when nothing qualifies."""
    if len(shots) < 2:
        raise ValueError("need at least 2 shots")
    groups = _character_crops(shots, embedder)
    per_identity = []
    for crops in groups.values():
        sims = [sim(e1, e2)
                for i, (s1, e1) in enumerate(crops)
                for s2, e2 in crops[i + 1:]
                if s1 != s2]
        if sims:
            per_identity.append(_mean_sorted(sims))
    if not per_identity:
        return None
    return _mean_sorted(per_identity)


def all_consistency(shots: list[ShotEval], embedder: Embedder) -> float | None:
    """Mean pairwise similarity between keyframes of different shots."""
    if len(shots) < 2:
        raise ValueError("need at least 2 shots")
    embs = [[embedder.embed_image(kf) for kf in s.keyframes] for s in shots]
    sims = []
    for i in range(len(shots)):
        for j in range(i + 1, len(shots)):
            for e1 in embs[i]:
                for e2 in embs[j]:
                    sims.append(sim(e1, e2))
    return _mean_sorted(sims) if sims else None


def char_alignment(shots: list[ShotEval], embedder: Embedder) -> float | None:
    """Similarity between character crops and their character-only prompts."""
    per_char = []
    for shot in shots:
        chars = shot.attrs.characters
        if not chars:
            continue
        text_embs = {c.id: embedder.embed_text(
            AttributeSet(characters=(c,))) for c in chars}
        for frame in shot.keyframes:
            for det in embedder.detect_sprites(frame):
                dists = [_attr_distance(det.char, c) for c in chars]
                best = chars[int(np.argmin(dists))]
                crop = crop_to_frame(frame, det.box, out_size=frame.shape[0])
                per_char.append(sim(embedder.embed_image(crop), text_embs[best.id]))
    return _mean_sorted(per_char) if per_char else None


def all_alignment(shots: list[ShotEval], embedder: Embedder) -> float | None:
    """Mean over shots of keyframe-to-full-prompt similarity."""
    per_shot = []
    for shot in shots:
        text = embedder.embed_text(shot.attrs)
        sims = [sim(embedder.embed_image(kf), text) for kf in shot.keyframes]
        if sims:
            per_shot.append(_mean_sorted(sims))
    return _mean_sorted(per_shot) if per_shot else None


def evaluate_scene(shots: list[ShotEval], embedder: Embedder) -> dict:
    return {
        "char_consistency": char_consistency(shots, embedder) if len(shots) >= 2 else None,
        "all_consistency": all_consistency(shots, embedder) if len(shots) >= 2 else None,
        "char_alignment": char_alignment(shots, embedder),
        "all_alignment": all_alignment(shots, embedder),
    }


def evaluate_corpus(scenes: list[list[ShotEval]], embedder: Embedder) -> MetricsReport:
    per_scene = []
    for i, shots in enumerate(scenes):
        row = evaluate_scene(shots, embedder)
        row["scene_index"] = i
        per_scene.append(row)

    def agg(key):
        vals = [r[key] for r in per_scene if r[key] is not None]
        return _mean_sorted(vals) if vals else None

    return MetricsReport(
        char_consistency=agg("char_consistency"),
        all_consistency=agg("all_consistency"),
        char_alignment=agg("char_alignment"),
        all_alignment=agg("all_alignment"),
        per_scene=per_scene,
        n_scenes=len(scenes),
    )
