"""Deterministic shared text/image embedding space.

Prompts and frames are both reduced to an AttributeSet, featurized into a
fixed block layout, rotated by a frozen orthonormal matrix, and L2
normalized. Because the rotation is orthonormal, cosine similarities equal
those of the raw attribute features exactly; retrieval behaviour is
therefore auditable against hand arithmetic.

The image side runs a classical detection pass: a robust background-pattern
fit, residual thresholding for foreground sprites, and per-component
shape/color/size classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import EmbedConfig
from .promptlang import (
    COLORS,
    FRAMINGS,
    MOVES,
    PATTERNS,
    SHAPES,
    SIZES,
    SPEEDS,
    AttributeSet,
    BackgroundSpec,
    CharacterSpec,
)
from .toyworld import COLOR_VALUES, PATTERN_CELL

_COLOR_ARR = np.array([COLOR_VALUES[c] for c in COLORS])


@dataclass
class BackgroundFit:
    pattern: str
    color: str
    predicted: np.ndarray  # (H, W, 3) background estimate
    scale: int             # apparent pattern cell size in pixels
    residual: float


@dataclass
class SpriteDetection:
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive
    char: CharacterSpec
    confidence: float


def _nearest_color(value: np.ndarray) -> tuple[str, float]:
    d = np.abs(_COLOR_ARR - value[None, :]).mean(axis=1)
    i = int(np.argmin(d))
    return COLORS[i], float(d[i])


# Inlier threshold for ranking background candidates. Tighter than theta_fg
# on purpose: a misaligned two-class fit can blend its medians to sit within
# ~0.17 of both true cell colors, so the scoring band must be narrower.
_FIT_INLIER_THETA = 0.15


def _fit_score(frame: np.ndarray, pred: np.ndarray,
               keep: float = 0.5) -> tuple[int, float]:
    """(negated inlier count, trimmed residual): lower is better.

    Sprites are outliers under every candidate, so the inlier count cleanly
    separates correctly-aligned pattern phases from misaligned ones, which a
    trimmed residual alone cannot (both trim the misfit rows away).
    """
    res = np.abs(frame - pred).mean(axis=2).ravel()
    inliers = int((res <= _FIT_INLIER_THETA).sum())
    res.sort()
    n = max(1, int(len(res) * keep))
    return -inliers, float(res[:n].mean())


def fit_background(frame: np.ndarray) -> BackgroundFit:
    """Robustly fit the background pattern family; sprites are outliers."""
    h, w = frame.shape[:2]
    ys, xs = np.arange(h), np.arange(w)
    best: BackgroundFit | None = None
    best_score: tuple[int, float] | None = None

    def consider(pattern: str, pred: np.ndarray, primary: np.ndarray, scale: int):
        nonlocal best, best_score
        neg_inliers, trimmed = _fit_score(frame, pred)
        # candidates are ordered simplest-first; a later (richer) model must
        # win on inliers or by a real residual margin, not a least-squares hair
        if best_score is None or neg_inliers < best_score[0] or (
                neg_inliers == best_score[0] and trimmed < best_score[1] - 5e-3):
            color, _ = _nearest_color(primary)
            best = BackgroundFit(pattern, color, pred, scale, trimmed)
            best_score = (neg_inliers, trimmed)

    solid = np.median(frame.reshape(-1, 3), axis=0)
    consider("solid", np.broadcast_to(solid, frame.shape).copy(), solid, PATTERN_CELL)

    def two_class(classes: np.ndarray):
        m0 = np.median(frame[classes == 0].reshape(-1, 3), axis=0)
        m1 = np.median(frame[classes == 1].reshape(-1, 3), axis=0)
        pred = np.where(classes[..., None] == 0, m0, m1)
        # the saturated band (nearest to an enum color) names the background
        _, d0 = _nearest_color(m0)
        _, d1 = _nearest_color(m1)
        return pred, (m0 if d0 <= d1 else m1)

    # cell sizes cover wide (2), close-up (4), and upscaled-crop (8) views
    for cell in (PATTERN_CELL, 2 * PATTERN_CELL, 4 * PATTERN_CELL):
        for p in range(2 * cell):
            classes = (((ys + p) // cell) % 2)[:, None] * np.ones(w, dtype=int)
            pred, primary = two_class(classes)
            consider("stripes", pred, primary, cell)
    for cell in (PATTERN_CELL, 2 * PATTERN_CELL, 4 * PATTERN_CELL):
        for py in range(cell):
            for px in range(cell):
                classes = (((ys + py)[:, None] // cell) + ((xs + px)[None, :] // cell)) % 2
                pred, primary = two_class(classes)
                consider("checker", pred, primary, cell)

    for axis in (0, 1):
        t = (np.arange(h if axis == 0 else w) + 0.5) / (h if axis == 0 else w)
        grid = t[:, None] if axis == 0 else t[None, :]
        grid = np.broadcast_to(grid, (h, w))
        # two-pass least squares: refit on the better-explained half of pixels
        def ramp_fit(mask):
            tt = grid[mask]
            px = frame[mask]
            a = np.empty(3)
            b = np.empty(3)
            denom = (tt ** 2).mean() - tt.mean() ** 2
            for c in range(3):
                cov = (tt * px[:, c]).mean() - tt.mean() * px[:, c].mean()
                b[c] = cov / denom if denom > 1e-9 else 0.0
                a[c] = px[:, c].mean() - b[c] * tt.mean()
            return a, b

        a, b = ramp_fit(np.ones((h, w), dtype=bool))
        res = np.abs(frame - (a + grid[..., None] * b)).mean(axis=2)
        inliers = res <= np.median(res)
        a, b = ramp_fit(inliers)
        if np.abs(b).mean() < 0.35:
            continue  # no visible ramp; a sprite-absorbing tilt, not a gradient
        pred = a + grid[..., None] * b
        end0, end1 = a, a + b
        _, d0 = _nearest_color(end0)
        _, d1 = _nearest_color(end1)
        consider("gradient", pred, end0 if d0 <= d1 else end1, PATTERN_CELL)

    assert best is not None
    return best


def sprite_core_color(frame: np.ndarray, predicted_bg: np.ndarray,
                      mask: np.ndarray) -> tuple[str, float, np.ndarray]:
    """Two-pass sprite color: a provisional nearest-enum color from the
    strongest-residual pixels, then a refined mean over near-pure pixels
    (estimated coverage >= 0.95) so anti-aliased edges cannot bias it."""
    residual = np.abs(frame - predicted_bg).mean(axis=2)
    comp_res = residual[mask]
    rough = comp_res >= 0.85 * comp_res.max()
    provisional, _ = _nearest_color(frame[mask][rough].mean(axis=0))
    cval = _COLOR_ARR[COLORS.index(provisional)]
    contrast = np.abs(cval[None, None, :] - predicted_bg).mean(axis=2)
    cov = np.clip(residual / np.maximum(contrast, 1e-6), 0.0, 1.0)
    pure = mask & (cov >= 0.95)
    pixels = frame[pure] if pure.any() else frame[mask][rough]
    mean = pixels.mean(axis=0)
    color, dist = _nearest_color(mean)
    return color, dist, mean


def _coverage_template(shape: str, cx: float, cy: float, r: float,
                       h: int, w: int) -> np.ndarray:
    """Ideal anti-aliased coverage of a sprite on an (h, w) pixel patch."""
    from .toyworld import _coverage

    sub = (np.arange(4) + 0.5) / 4
    xs = (np.arange(w)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(h)[:, None] + sub[None, :]).reshape(-1)
    gx, gy = np.meshgrid(xs, ys)
    cov = _coverage(shape, cx, cy, r, gx, gy)
    return cov.reshape(h, 4, w, 4).mean(axis=(1, 3))


# coverage mass per squared radius, from the sprite geometry definitions
_SHAPE_MASS = {"circle": np.pi, "square": 3.24, "triangle": 2.53}
# a triangle's coverage centroid sits below its nominal center
_TRIANGLE_CENTROID_DY = 0.2167


def classify_shape(cov: np.ndarray, zoom: int = 1) -> str:
    """Match the estimated coverage patch against ideal sprite templates.

    The template center/radius are derived from the patch's centroid and
    mass, so the test is scale- and offset-free and degrades gracefully on
    blurry generated frames. When zoom > 1 a pixel-doubled template variant
    is also tried, matching upscaled crops whose anti-aliasing is blocky
    rather than native.
    """
    h, w = cov.shape
    mass = max(float(cov.sum()), 1e-6)
    ii, jj = np.mgrid[0:h, 0:w]
    cy = float((cov * (ii + 0.5)).sum() / mass)
    cx = float((cov * (jj + 0.5)).sum() / mass)
    best, best_err = "circle", np.inf
    for shape, per_r2 in _SHAPE_MASS.items():
        r = np.sqrt(mass / per_r2)
        ty = cy - _TRIANGLE_CENTROID_DY * r if shape == "triangle" else cy
        candidates = [_coverage_template(shape, cx, ty, r, h, w)]
        z = int(zoom)
        if z > 1 and h % z == 0 and w % z == 0:
            small = _coverage_template(shape, cx / z, ty / z, r / z, h // z, w // z)
            candidates.append(np.kron(small, np.ones((z, z))))
        err = min(float(np.abs(cov - t).mean()) for t in candidates)
        if err < best_err:
            best, best_err = shape, err
    return best


class Embedder:
    """Shared featurizer for prompts and frames; safe for concurrent use."""

    def __init__(self, cfg: EmbedConfig | None = None):
        self.cfg = cfg or EmbedConfig()
        if self.cfg.dim < 32:
            raise ValueError("embedding dim must be >= 32 to hold the feature blocks")
        rng = np.random.default_rng(self.cfg.seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.cfg.dim, self.cfg.dim)))
        self._rotation = q
        self._size_threshold = 13.0  # coverage mass (zoom-corrected) separating small/large

    # ---------------- featurization ----------------

    def _features(self, attrs: AttributeSet) -> np.ndarray:
        cfg = self.cfg
        f = np.zeros(32)
        f[0] = cfg.w_bias
        if attrs.characters:
            pool = np.zeros(12)
            for c in attrs.characters:
                v = np.zeros(12)
                v[0] = 1.0
                if c.shape is not None:
                    v[1 + SHAPES.index(c.shape)] = 1.0
                if c.color is not None:
                    v[4 + COLORS.index(c.color)] = 1.0
                if c.size is not None:
                    v[10 + SIZES.index(c.size)] = 1.0
                pool += v
            f[1:13] = cfg.w_char * pool / len(attrs.characters)
        bg = attrs.background
        if bg.pattern is not None:
            f[13 + PATTERNS.index(bg.pattern)] = cfg.w_bg
        if bg.color is not None:
            f[17 + COLORS.index(bg.color)] = cfg.w_bg
        if attrs.action is not None:
            f[23 + MOVES.index(attrs.action.move)] = cfg.w_action
            f[28 + SPEEDS.index(attrs.action.speed)] = cfg.w_action
        f[30 + FRAMINGS.index(attrs.framing)] = cfg.w_framing
        return f

    def embed_attrs(self, attrs: AttributeSet) -> np.ndarray:
        f = np.zeros(self.cfg.dim)
        f[:32] = self._features(attrs)
        v = self._rotation @ f
        return v / np.linalg.norm(v)

    def embed_text(self, attrs: AttributeSet) -> np.ndarray:
        return self.embed_attrs(attrs)

    # ---------------- image side ----------------

    def detect_sprites(self, frame: np.ndarray,
                       fit: BackgroundFit | None = None) -> list[SpriteDetection]:
        fit = fit or fit_background(frame)
        residual = np.abs(frame - fit.predicted).mean(axis=2)
        # hysteresis: connect through the weak ring so anti-aliased edges over
        # low-contrast bands cannot pinch one sprite into several components
        strong = residual > self.cfg.theta_fg
        weak = residual > 0.7 * self.cfg.theta_fg
        labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
        zoom = fit.scale / PATTERN_CELL
        detections: list[SpriteDetection] = []
        for comp in range(1, n + 1):
            comp_mask = labels == comp
            if int((comp_mask & strong).sum()) < self.cfg.min_component:
                continue
            ys, xs = np.where(comp_mask)
            box = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
            color, colordist, _ = sprite_core_color(frame, fit.predicted, comp_mask)
            # contrast-normalized coverage estimate inside the box
            cval = _COLOR_ARR[COLORS.index(color)]
            contrast = np.abs(cval[None, None, :]
                              - fit.predicted[box[0]:box[2], box[1]:box[3]]).mean(axis=2)
            cov = residual[box[0]:box[2], box[1]:box[3]] / np.maximum(contrast, 1e-6)
            cov = np.clip(cov, 0.0, 1.0) * comp_mask[box[0]:box[2], box[1]:box[3]]
            shape = classify_shape(cov, zoom=int(zoom))
            mass = float(cov.sum())
            size = "large" if mass / (zoom * zoom) >= self._size_threshold else "small"
            conf = max(0.0, 1.0 - colordist / 2.0)
            detections.append(SpriteDetection(
                box=box,
                char=CharacterSpec(id=f"det{len(detections)}", shape=shape,
                                   color=color, size=size),
                confidence=conf))
        detections.sort(key=lambda d: (d.box[0], d.box[1]))
        return [SpriteDetection(d.box,
                                CharacterSpec(id=f"det{i}", shape=d.char.shape,
                                              color=d.char.color, size=d.char.size),
                                d.confidence)
                for i, d in enumerate(detections)]

    def frame_to_attrs(self, frame: np.ndarray) -> AttributeSet:
        fit = fit_background(frame)
        detections = self.detect_sprites(frame, fit)
        framing = "close" if fit.scale > PATTERN_CELL else "wide"
        return AttributeSet(
            characters=tuple(d.char for d in detections[:3]),
            background=BackgroundSpec(pattern=fit.pattern, color=fit.color),
            action=None,
            framing=framing,
        )

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        return self.embed_attrs(self.frame_to_attrs(frame))


def sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of unit vectors (plain dot product)."""
    return float(np.dot(a, b))


def crop_to_frame(frame: np.ndarray, box: tuple[int, int, int, int],
                  out_size: int = 16) -> np.ndarray:
    """Context crop around a detection, nearest-neighbor resized to frame
    resolution.

    The source square is the detection box grown to half or full frame size,
    so the upscale factor stays integral: background patterns land on the
    detector's known scales and the sprite remains sprite-on-background
    rather than filling the crop.
    """
    y0, x0, y1, x1 = box
    h = frame.shape[0]
    # the tight window applies only when the sprite leaves at least half the
    # crop as background, otherwise the pattern fit loses its majority
    side = out_size // 2 if 3 * max(y1 - y0, x1 - x0) <= out_size else out_size
    side = min(side, h)
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    top = min(max(cy - side // 2, 0), h - side)
    left = min(max(cx - side // 2, 0), h - side)
    crop = frame[top:top + side, left:left + side]
    scale = max(out_size // side, 1)
    return np.repeat(np.repeat(crop, scale, axis=0), scale, axis=1)
