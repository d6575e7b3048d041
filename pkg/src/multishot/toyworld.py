"""Procedural toy-video renderer with full ground truth.

Frames are HxWx3 float32 grids in [-1, 1]. Sprites (circle/square/triangle)
move over patterned backgrounds; close framing is a 2x zoom centered on the
action subject. Every render is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .config import SceneSamplerConfig, WorldConfig
from .promptlang import (
    COLORS,
    MOVES,
    SHAPES,
    SIZES,
    SPEEDS,
    ActionSpec,
    AttributeSet,
    BackgroundSpec,
    CharacterSpec,
    render_prompt,
)
from .tensorio import write_tensor

COLOR_VALUES = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
PARTNER_VALUES = {"gray": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}
PATTERN_CELL = 2  # band height / checker cell size in world pixels

_SUPER = 4  # supersampling factor for sprite anti-aliasing


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class ShotSpec:
    scene_id: str
    attrs: AttributeSet
    # char id -> ((start_x, start_y), (vx, vy)) in world pixels / frame
    trajectory: dict[str, tuple[tuple[float, float], tuple[float, float]]]
    n_frames: int
    fps: int = 8
    pattern_phase: int = 0
    bg_partner: str = "gray"

    def __post_init__(self):
        if self.n_frames < 1:
            raise InvalidSpec("n_frames must be >= 1")
        ids = {c.id for c in self.attrs.characters}
        if set(self.trajectory) != ids:
            raise InvalidSpec("trajectory must cover exactly the declared characters")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    characters: tuple[CharacterSpec, ...]
    background: BackgroundSpec
    shots: tuple[ShotSpec, ...]

    def __post_init__(self):
        ids = {c.id for c in self.characters}
        for shot in self.shots:
            if not {c.id for c in shot.attrs.characters} <= ids:
                raise InvalidSpec("shot characters must be a subset of scene identities")


@dataclass
class ShotGroundTruth:
    attrs: AttributeSet
    # one dict per frame: char id -> (y0, x0, y1, x1), end-exclusive pixel box;
    # characters entirely outside the view are absent
    boxes: list[dict[str, tuple[int, int, int, int]]]

    def visible_characters(self, frame_index: int, margin: int = 1,
                           frame_size: int = 16) -> list[str]:
        """Chars whose box sits fully inside the frame with a pixel margin."""
        out = []
        for cid, (y0, x0, y1, x1) in self.boxes[frame_index].items():
            if y0 >= margin and x0 >= margin and y1 <= frame_size - margin and x1 <= frame_size - margin:
                out.append(cid)
        return out


def _sprite_radius(size: str | None, world: WorldConfig) -> float:
    if size == "large":
        return world.radius_large
    return world.radius_small


def _coverage(shape: str, cx: float, cy: float, r: float,
              xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Fraction of each supersample covered; xs/ys are world coordinates."""
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return (dx * dx + dy * dy <= r * r).astype(np.float64)
    if shape == "square":
        h = 0.9 * r
        return ((np.abs(dx) <= h) & (np.abs(dy) <= h)).astype(np.float64)
    # point-up triangle
    top = (cx, cy - 1.25 * r)
    bl = (cx - 1.15 * r, cy + 0.95 * r)
    br = (cx + 1.15 * r, cy + 0.95 * r)

    def side(px, py, ax, ay, bx, by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

    s1 = side(xs, ys, *top, *bl)
    s2 = side(xs, ys, *bl, *br)
    s3 = side(xs, ys, *br, *top)
    inside = ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    return inside.astype(np.float64)


def _background(world_x: np.ndarray, world_y: np.ndarray, attrs: AttributeSet,
                phase: int, partner: str, frame_size: int) -> np.ndarray:
    pattern = attrs.background.pattern or "solid"
    color = np.array(COLOR_VALUES[attrs.background.color or "blue"])
    alt = np.array(PARTNER_VALUES[partner])
    h, w = world_x.shape
    out = np.empty((h, w, 3))
    if pattern == "solid":
        out[:] = color
        return out
    if pattern == "stripes":
        band = (np.floor((world_y + phase) / PATTERN_CELL).astype(int) % 2) == 0
        out[:] = np.where(band[..., None], color, alt)
        return out
    if pattern == "checker":
        cell = (np.floor((world_x + phase) / PATTERN_CELL).astype(int)
                + np.floor((world_y + phase) / PATTERN_CELL).astype(int)) % 2 == 0
        out[:] = np.where(cell[..., None], color, alt)
        return out
    # gradient: linear ramp partner -> color along an orientation chosen by phase
    orient = phase % 4
    coord = [world_x, frame_size - world_x, world_y, frame_size - world_y][orient]
    t = np.clip(coord / frame_size, 0.0, 1.0)[..., None]
    out[:] = alt + t * (color - alt)
    return out


def _view_params(spec: ShotSpec, world: WorldConfig) -> tuple[float, float, float]:
    """Returns (view_center_x, view_center_y, zoom)."""
    n = world.frame_size
    if spec.attrs.framing != "close":
        return n / 2.0, n / 2.0, 1.0
    zoom = world.close_zoom
    if spec.attrs.action is not None:
        (sx, sy), (vx, vy) = spec.trajectory[spec.attrs.action.subject]
        mid = (spec.n_frames - 1) / 2.0
        cx, cy = sx + vx * mid, sy + vy * mid
    else:
        cx, cy = n / 2.0, n / 2.0
    half = n / (2.0 * zoom)
    cx = min(max(cx, half), n - half)
    cy = min(max(cy, half), n - half)
    # snap to the world half-pixel grid so pattern cells land on pixel edges
    cx = round(cx * zoom) / zoom
    cy = round(cy * zoom) / zoom
    return cx, cy, zoom


def render_shot(spec: ShotSpec, seed: int,
                world: WorldConfig | None = None) -> tuple[np.ndarray, ShotGroundTruth]:
    """Render all frames of a shot. Deterministic for fixed (spec, seed)."""
    world = world or WorldConfig()
    n = world.frame_size
    cx_v, cy_v, zoom = _view_params(spec, world)

    # pixel-center grid and supersample grid in world coordinates
    px = (np.arange(n) + 0.5)
    sub = (np.arange(_SUPER) + 0.5) / _SUPER
    px_ss = (np.arange(n)[:, None] + sub[None, :]).reshape(-1)  # n*_SUPER positions
    wx = cx_v + (px - n / 2.0) / zoom
    wy = cy_v + (px - n / 2.0) / zoom
    wx_ss = cx_v + (px_ss - n / 2.0) / zoom
    wy_ss = cy_v + (px_ss - n / 2.0) / zoom
    gx, gy = np.meshgrid(wx, wy)  # (n, n), [row, col]
    gx_ss, gy_ss = np.meshgrid(wx_ss, wy_ss)

    bg = _background(gx, gy, spec.attrs, spec.pattern_phase, spec.bg_partner, n)

    # validate trajectories: sprite centers must stay inside the world frame
    for cid, ((sx, sy), (vx, vy)) in spec.trajectory.items():
        ex, ey = sx + vx * (spec.n_frames - 1), sy + vy * (spec.n_frames - 1)
        for x, y in ((sx, sy), (ex, ey)):
            if not (0.0 <= x <= n and 0.0 <= y <= n):
                raise InvalidSpec(f"trajectory of {cid!r} exits the frame")

    rng = np.random.default_rng(seed)
    frames = np.empty((spec.n_frames, n, n, 3), dtype=np.float32)
    boxes: list[dict[str, tuple[int, int, int, int]]] = []
    for f in range(spec.n_frames):
        img = bg.copy()
        frame_boxes: dict[str, tuple[int, int, int, int]] = {}
        for char in spec.attrs.characters:
            (sx, sy), (vx, vy) = spec.trajectory[char.id]
            cx, cy = sx + vx * f, sy + vy * f
            r = _sprite_radius(char.size, world)
            cov_ss = _coverage(char.shape or "circle", cx, cy, r, gx_ss, gy_ss)
            # average the supersamples back down to pixel resolution
            alpha = cov_ss.reshape(n, _SUPER, n, _SUPER).mean(axis=(1, 3))
            color = np.array(COLOR_VALUES[char.color or "red"])
            img = alpha[..., None] * color + (1 - alpha[..., None]) * img
            solid = np.argwhere(alpha > 0.3)
            if solid.size:
                y0, x0 = solid.min(axis=0)
                y1, x1 = solid.max(axis=0) + 1
                frame_boxes[char.id] = (int(y0), int(x0), int(y1), int(x1))
        if world.noise_amp > 0:
            img = img + rng.normal(0.0, world.noise_amp, img.shape)
        frames[f] = np.clip(img, -1.0, 1.0)
        boxes.append(frame_boxes)
    return frames, ShotGroundTruth(attrs=spec.attrs, boxes=boxes)


def center_frame_index(n_frames: int) -> int:
    return n_frames // 2


def chunk_keyframe_indices(n_frames: int, chunk_latents: int) -> list[int]:
    """Center frame of each chunk; shared by training, engine, and metrics."""
    return [c * chunk_latents + chunk_latents // 2
            for c in range(n_frames // chunk_latents)]


# --------------------------------------------------------------------------
# scene sampling
# --------------------------------------------------------------------------

def _min_trajectory_distance(a_start, a_vel, b_start, b_vel, span: int) -> float:
    """Closest approach of two linear trajectories over frames [0, span]."""
    dx0 = a_start[0] - b_start[0]
    dy0 = a_start[1] - b_start[1]
    dvx = a_vel[0] - b_vel[0]
    dvy = a_vel[1] - b_vel[1]
    vv = dvx * dvx + dvy * dvy
    t = 0.0 if vv < 1e-12 else min(max(-(dx0 * dvx + dy0 * dvy) / vv, 0.0), float(span))
    return float(np.hypot(dx0 + dvx * t, dy0 + dvy * t))


def _sample_trajectory(rng: np.random.Generator, attrs: AttributeSet,
                       n_frames: int, world: WorldConfig) -> dict:
    n = world.frame_size
    traj: dict[str, tuple[tuple[float, float], tuple[float, float]]] = {}
    placed: list[tuple[tuple[float, float], tuple[float, float], float]] = []
    span = n_frames - 1
    for char in attrs.characters:
        r = _sprite_radius(char.size, world)
        vx = vy = 0.0
        if attrs.action is not None and attrs.action.subject == char.id:
            speed = world.speed_fast if attrs.action.speed == "fast" else world.speed_slow
            dx, dy = {"left": (-1, 0), "right": (1, 0), "up": (0, -1),
                      "down": (0, 1), "none": (0, 0)}[attrs.action.move]
            vx, vy = speed * dx, speed * dy
        m = r + 0.7
        lo_x = m + max(0.0, -vx * span)
        hi_x = n - m - max(0.0, vx * span)
        lo_y = m + max(0.0, -vy * span)
        hi_y = n - m - max(0.0, vy * span)
        if lo_x > hi_x or lo_y > hi_y:
            raise InvalidSpec("no feasible start position for trajectory")
        for _ in range(60):
            x = rng.uniform(lo_x, hi_x)
            y = rng.uniform(lo_y, hi_y)
            if all(_min_trajectory_distance((x, y), (vx, vy), os_, ov, span)
                   >= r + orad + 2.2 for os_, ov, orad in placed):
                break
        else:
            raise InvalidSpec("cannot place sprites without overlap")
        placed.append(((x, y), (vx, vy), r))
        traj[char.id] = ((float(x), float(y)), (float(vx), float(vy)))
    return traj


def sample_scene(rng: np.random.Generator, scene_id: str,
                 world: WorldConfig | None = None,
                 sampler: SceneSamplerConfig | None = None) -> SceneSpec:
    """Sample scene-level identities once and reuse them across all shots."""
    world = world or WorldConfig()
    sampler = sampler or SceneSamplerConfig()
    n_shots = int(rng.integers(sampler.shots_min, sampler.shots_max + 1))
    patterns = sampler.multi_shot_patterns if n_shots > 1 else sampler.single_shot_patterns
    bg_color = str(rng.choice(COLORS))
    background = BackgroundSpec(pattern=str(rng.choice(list(patterns))), color=bg_color)
    n_chars = int(rng.choice([1, 2, 3], p=[0.45, 0.35, 0.2]))
    char_colors = rng.choice([c for c in COLORS if c != bg_color],
                             size=n_chars, replace=False)
    characters = tuple(
        CharacterSpec(id="abc"[i], shape=str(rng.choice(SHAPES)),
                      color=str(char_colors[i]), size=str(rng.choice(SIZES)))
        for i in range(n_chars)
    )
    scene_phase = int(rng.integers(0, 4))

    shots = []
    for k in range(n_shots):
        # the first identity anchors the scene: it appears in every shot,
        # keeping shot representatives similar enough to cluster
        framing = "wide"
        if sampler.alternate_framing and n_shots > 1 and k % 2 == 1:
            framing = "close"
        if framing == "close":
            # a close-up isolates the anchor character; anyone else would sit
            # half-cropped at the view edge
            subset = (characters[0],)
        else:
            n_sub = int(rng.integers(1, n_chars + 1))
            extras = sorted(rng.choice(n_chars - 1, size=n_sub - 1, replace=False).tolist()) \
                if n_sub > 1 else []
            subset = (characters[0],) + tuple(characters[1 + i] for i in extras)
        chunks = int(rng.integers(sampler.chunks_min, sampler.chunks_max + 1))
        n_frames = chunks * world.chunk_latents
        while True:
            subject = subset[int(rng.integers(0, len(subset)))].id
            action = ActionSpec(subject=subject, move=str(rng.choice(MOVES)),
                                speed=str(rng.choice(SPEEDS)))
            attrs = AttributeSet(characters=subset, background=background,
                                 action=action, framing=framing)
            try:
                traj = _sample_trajectory(rng, attrs, n_frames, world)
                break
            except InvalidSpec:
                if len(subset) == 1:
                    raise
                subset = subset[:-1]  # drop the last extra and retry
        shots.append(ShotSpec(
            scene_id=scene_id, attrs=attrs, trajectory=traj, n_frames=n_frames,
            fps=world.fps, pattern_phase=scene_phase,
            bg_partner="white" if k % 2 == 1 else "gray"))
    return SceneSpec(scene_id=scene_id, characters=characters,
                     background=background, shots=tuple(shots))


# --------------------------------------------------------------------------
# corpus building
# --------------------------------------------------------------------------

def _spec_to_json(spec: ShotSpec) -> dict:
    return {
        "trajectory": {cid: [list(start), list(vel)]
                       for cid, (start, vel) in sorted(spec.trajectory.items())},
        "n_frames": spec.n_frames,
        "fps": spec.fps,
        "pattern_phase": spec.pattern_phase,
        "bg_partner": spec.bg_partner,
    }


def build_corpus(out_dir: str, n_scenes: int, seed: int,
                 world: WorldConfig | None = None,
                 sampler: SceneSamplerConfig | None = None) -> dict:
    """Render a corpus to disk: manifest.json + one tensor file per shot."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    world = world or WorldConfig()
    sampler = sampler or SceneSamplerConfig()
    os.makedirs(os.path.join(out_dir, "shots"), exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = {
        "version": 1,
        "seed": seed,
        "world": {"frame_size": world.frame_size, "fps": world.fps,
                  "chunk_latents": world.chunk_latents},
        "scenes": [],
    }
    prev_bg, prev_anchor = None, None
    for i in range(n_scenes):
        # adjacent scenes must differ in background identity and in anchor
        # appearance, otherwise the cut between them is invisible and their
        # clusters merge
        while True:
            scene = sample_scene(rng, f"scene{i:04d}", world, sampler)
            a = scene.characters[0]
            bg_key = (scene.background.pattern, scene.background.color)
            anchor_key = (a.shape, a.color, a.size)
            if bg_key != prev_bg and anchor_key != prev_anchor:
                break
        prev_bg, prev_anchor = bg_key, anchor_key
        shot_records = []
        for k, shot in enumerate(scene.shots):
            shot_id = f"{scene.scene_id}_shot{k:02d}"
            shot_seed = seed * 1_000_003 + i * 101 + k
            frames, gt = render_shot(shot, shot_seed, world)
            rel = f"shots/{shot_id}.fwtn"
            write_tensor(os.path.join(out_dir, rel), frames)
            shot_records.append({
                "shot_id": shot_id,
                "prompt": render_prompt(shot.attrs),
                "n_frames": shot.n_frames,
                "chunks": shot.n_frames // world.chunk_latents,
                "tensor": rel,
                "spec": _spec_to_json(shot),
                "boxes": [{cid: list(map(int, b)) for cid, b in sorted(fb.items())}
                          for fb in gt.boxes],
            })
        manifest["scenes"].append({"scene_id": scene.scene_id, "shots": shot_records})
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return manifest


def concat_corpus(manifest: dict, corpus_dir: str) -> tuple[np.ndarray, list[int], list[int]]:
    """Concatenate every shot into one video.

    Returns (frames, shot boundary indices, per-shot scene labels).
    Boundaries mark the first frame of each shot after the first.
    """
    from .tensorio import read_tensor

    parts, boundaries, labels = [], [], []
    offset = 0
    for s_idx, scene in enumerate(manifest["scenes"]):
        for shot in scene["shots"]:
            frames = read_tensor(os.path.join(corpus_dir, shot["tensor"]))
            if offset > 0:
                boundaries.append(offset)
            parts.append(frames)
            labels.append(s_idx)
            offset += frames.shape[0]
    return np.concatenate(parts, axis=0), boundaries, labels
