"""Data curation: shot splitting, scene clustering, filtering, group
captioning, and caption validation. Runs fully offline with the toy
captioner; a remote captioning service can be swapped in over HTTP.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .config import CurateConfig
from .embed import Embedder, fit_background, sim
from .promptlang import (
    AttributeSet,
    CharacterSpec,
    parse_prompt,
    render_prompt,
)
from .toyworld import ShotGroundTruth, center_frame_index


class RemoteUnavailable(RuntimeError):
    pass


@dataclass
class CutList:
    boundaries: list[int]

    def __post_init__(self):
        if any(b <= 0 for b in self.boundaries):
            raise ValueError("boundaries must be positive frame indices")
        if any(b >= n for b, n in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")


@dataclass
class SceneCluster:
    cluster_id: int
    shot_ids: list[int]


@dataclass
class CaptionRecord:
    shot_id: int
    caption: str
    validated: bool = False
    diagnostics: list[str] = field(default_factory=list)


def split_shots(video: np.ndarray, theta_cut: float = 0.6) -> CutList:
    """Boundary wherever the mean absolute frame difference exceeds
    theta_cut; of two boundaries closer than 2 frames the later is dropped."""
    if video.shape[0] < 2:
        return CutList([])
    if theta_cut <= 0:
        raise ValueError("theta_cut must be positive")
    diffs = np.abs(np.diff(video.astype(np.float64), axis=0)).mean(axis=(1, 2, 3))
    boundaries = []
    for i in np.where(diffs > theta_cut)[0] + 1:
        if boundaries and i < boundaries[-1] + 2:
            continue
        boundaries.append(int(i))
    return CutList(boundaries)


def cut_to_shots(video: np.ndarray, cuts: CutList) -> list[np.ndarray]:
    edges = [0] + cuts.boundaries + [video.shape[0]]
    return [video[a:b] for a, b in zip(edges, edges[1:])]


def cluster_scenes(shots: list[np.ndarray], embedder: Embedder,
                   window: int = 2, tau: float = 0.75) -> list[SceneCluster]:
    """Sliding-window clustering: a shot joins the current cluster iff its
    center-frame embedding is close to any of the previous `window` members."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    reps = [embedder.embed_image(s[center_frame_index(s.shape[0])]) for s in shots]
    clusters: list[SceneCluster] = []
    for i in range(len(shots)):
        if clusters:
            members = clusters[-1].shot_ids[-window:]
            if max(sim(reps[i], reps[j]) for j in members) >= tau:
                clusters[-1].shot_ids.append(i)
                continue
        clusters.append(SceneCluster(cluster_id=len(clusters), shot_ids=[i]))
    return clusters


@dataclass
class Rejection:
    rule: str
    target: str  # "shot" or "cluster"
    id: int


def filter_scenes(clusters: list[SceneCluster], shots: list[np.ndarray],
                  identities: dict[int, set], fps: int = 8,
                  min_frames: int | None = None,
                  max_characters: int = 3) -> tuple[list[SceneCluster], list[Rejection]]:
    """Drop shots shorter than one second and clusters featuring more than
    `max_characters` distinct identities.

    `identities` maps shot id to a set of hashable character identities
    (ground-truth ids or detected attribute triples).
    """
    min_frames = fps if min_frames is None else min_frames
    log: list[Rejection] = []
    out: list[SceneCluster] = []
    for cluster in clusters:
        kept = []
        for sid in cluster.shot_ids:
            if shots[sid].shape[0] < min_frames:
                log.append(Rejection("min_duration", "shot", sid))
            else:
                kept.append(sid)
        if not kept:
            continue
        distinct = set()
        for sid in kept:
            distinct |= set(identities.get(sid, set()))
        if len(distinct) > max_characters:
            log.append(Rejection("max_characters", "cluster", cluster.cluster_id))
            continue
        out.append(SceneCluster(cluster_id=cluster.cluster_id, shot_ids=kept))
    return out, log


class ToyCaptioner:
    """Captions shots from ground truth when available, else from detection.

    Character ids are kept consistent across a cluster: ground truth carries
    its own scene ids; detection mode assigns ids by attribute identity in
    order of first appearance.
    """

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    def caption_cluster(self, shots: list[np.ndarray],
                        ground_truth: list[ShotGroundTruth] | None = None) -> list[str]:
        captions = []
        registry: dict[tuple, str] = {}
        for idx, frames in enumerate(shots):
            ci = center_frame_index(frames.shape[0])
            if ground_truth is not None:
                gt = ground_truth[idx]
                visible = set(gt.visible_characters(ci, frame_size=frames.shape[1]))
                chars = tuple(c for c in gt.attrs.characters if c.id in visible)
                attrs = AttributeSet(characters=chars, background=gt.attrs.background,
                                     action=None, framing=gt.attrs.framing)
            else:
                detected = self.embedder.frame_to_attrs(frames[ci])
                chars = []
                for c in detected.characters:
                    key = (c.shape, c.color, c.size)
                    if key not in registry:
                        registry[key] = "abcdefgh"[len(registry)]
                    chars.append(CharacterSpec(id=registry[key], shape=c.shape,
                                               color=c.color, size=c.size))
                attrs = AttributeSet(characters=tuple(chars),
                                     background=detected.background,
                                     action=None, framing=detected.framing)
            captions.append(render_prompt(attrs))
        return captions


class RemoteCaptioner:
    """HTTP client for an external captioning service.

    Request: {cluster_id, shots: [{shot_id, frames_b64: [png, ...]}]} where
    each shot carries its center frame. Response: {captions: [{shot_id,
    text}]}. Retries 3 times with exponential backoff.
    """

    def __init__(self, url: str, retries: int = 3, backoff: float = 0.5,
                 client=None):
        import httpx

        self.url = url
        self.retries = retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=30.0)

    @staticmethod
    def _frame_png_b64(frame: np.ndarray) -> str:
        from PIL import Image

        arr = np.clip(np.rint((frame.astype(np.float64) + 1.0) * 127.5), 0, 255)
        img = Image.fromarray(arr.astype(np.uint8))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode()

    def caption_cluster(self, cluster_id: int, shots: list[np.ndarray],
                        shot_ids: list[int]) -> list[str]:
        import httpx

        payload = {
            "cluster_id": cluster_id,
            "shots": [{"shot_id": sid,
                       "frames_b64": [self._frame_png_b64(s[center_frame_index(s.shape[0])])]}
                      for sid, s in zip(shot_ids, shots)],
        }
        last_error = None
        for attempt in range(self.retries):
            try:
                resp = self.client.post(self.url, json=payload)
                resp.raise_for_status()
                data = resp.json()
                by_id = {c["shot_id"]: c["text"] for c in data["captions"]}
                return [by_id[sid] for sid in shot_ids]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise RemoteUnavailable(
            f"captioning service failed after {self.retries} attempts: {last_error}")


def group_caption(cluster: SceneCluster, shots: list[np.ndarray], captioner,
                  ground_truth: list[ShotGroundTruth] | None = None) -> list[CaptionRecord]:
    if not cluster.shot_ids:
        return []
    cluster_shots = [shots[sid] for sid in cluster.shot_ids]
    if isinstance(captioner, RemoteCaptioner):
        texts = captioner.caption_cluster(cluster.cluster_id, cluster_shots,
                                          cluster.shot_ids)
    else:
        gt = None if ground_truth is None else [ground_truth[s] for s in cluster.shot_ids]
        texts = captioner.caption_cluster(cluster_shots, gt)
    return [CaptionRecord(shot_id=sid, caption=text)
            for sid, text in zip(cluster.shot_ids, texts)]


def validate_captions(records: list[CaptionRecord], shots: list[np.ndarray],
                      embedder: Embedder) -> list[CaptionRecord]:
    """Re-detect on each shot's center frame; a caption is validated iff every
    captioned character's (shape, color) matches a detection and the background
    pattern/color matches. Unspecified caption fields match anything."""
    for rec in records:
        frames = shots[rec.shot_id]
        frame = frames[center_frame_index(frames.shape[0])]
        attrs = parse_prompt(rec.caption)
        fit = fit_background(frame)
        detections = embedder.detect_sprites(frame, fit)
        diagnostics = []
        bg = attrs.background
        if bg.pattern is not None and bg.pattern != fit.pattern:
            diagnostics.append(f"background pattern: captioned {bg.pattern}, saw {fit.pattern}")
        if bg.color is not None and bg.color != fit.color:
            diagnostics.append(f"background color: captioned {bg.color}, saw {fit.color}")
        unused = list(detections)
        for char in attrs.characters:
            match = None
            for d in unused:
                if (char.shape is None or d.char.shape == char.shape) and \
                        (char.color is None or d.char.color == char.color):
                    match = d
                    break
            if match is None:
                diagnostics.append(
                    f"character {char.id}: no detection with shape={char.shape}, "
                    f"color={char.color}")
            else:
                unused.remove(match)
        rec.validated = not diagnostics
        rec.diagnostics = diagnostics
    return records


def detected_identities(shots: list[np.ndarray], embedder: Embedder) -> dict[int, set]:
    """Per-shot identity sets from detection (attribute triples)."""
    out: dict[int, set] = {}
    for sid, frames in enumerate(shots):
        dets = embedder.detect_sprites(frames[center_frame_index(frames.shape[0])])
        out[sid] = {(d.char.shape, d.char.color, d.char.size) for d in dets}
    return out


def run_pipeline(video: np.ndarray, embedder: Embedder, cfg: CurateConfig,
                 captioner=None, fps: int = 8,
                 precut_shots: list[np.ndarray] | None = None,
                 ground_truth: list[ShotGroundTruth] | None = None) -> dict:
    """Full curation pass; returns a curated manifest structure."""
    if precut_shots is not None:
        shots = precut_shots
        boundaries = list(np.cumsum([s.shape[0] for s in shots[:-1]]))
    else:
        cuts = split_shots(video, cfg.theta_cut)
        boundaries = cuts.boundaries
        shots = cut_to_shots(video, cuts)
    clusters = cluster_scenes(shots, embedder, cfg.window, cfg.tau)
    identities = detected_identities(shots, embedder)
    kept, rejections = filter_scenes(clusters, shots, identities, fps=fps,
                                     min_frames=cfg.min_shot_frames,
                                     max_characters=cfg.max_cluster_characters)
    captioner = captioner or ToyCaptioner(embedder)
    records: list[CaptionRecord] = []
    for cluster in kept:
        recs = group_caption(cluster, shots, captioner, ground_truth)
        validate_captions(recs, shots, embedder)
        records.extend(recs)
    rec_by_shot = {r.shot_id: r for r in records}
    return {
        "boundaries": [int(b) for b in boundaries],
        "clusters": [{"cluster_id": c.cluster_id, "shot_ids": c.shot_ids}
                     for c in kept],
        "rejections": [{"rule": r.rule, "target": r.target, "id": r.id}
                       for r in rejections],
        "shots": [{
            "shot_id": sid,
            "n_frames": int(shots[sid].shape[0]),
            "caption": rec_by_shot[sid].caption if sid in rec_by_shot else None,
            "validated": rec_by_shot[sid].validated if sid in rec_by_shot else None,
            "diagnostics": rec_by_shot[sid].diagnostics if sid in rec_by_shot else [],
        } for c in kept for sid in c.shot_ids],
    }
