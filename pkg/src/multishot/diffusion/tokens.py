"""Patch tokenizer and in-context sequence assembly.

A sequence is ordered [text | shot-cache | temporal | chunk]. Cache frames
can be perturbed with forward-diffusion noise before tokenization (training
augmentation); at inference the caches enter clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cache import ShotCache, TemporalCache
from ..config import ModelConfig
from .schedule import NoiseSchedule, forward_diffuse

SEG_TEXT, SEG_SHOT, SEG_TEMPORAL, SEG_CHUNK = 0, 1, 2, 3


def patchify(frame: np.ndarray, patch: int = 4) -> np.ndarray:
    """(H, W, 3) -> (n_patches, patch*patch*3), patches in row-major order."""
    h, w, c = frame.shape
    gh, gw = h // patch, w // patch
    x = frame.reshape(gh, patch, gw, patch, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, frame_size: int = 16, patch: int = 4) -> np.ndarray:
    g = frame_size // patch
    x = tokens.reshape(g, g, patch, patch, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(frame_size, frame_size, 3)


def chunk_to_tokens(chunk: np.ndarray, patch: int = 4) -> np.ndarray:
    """(L, H, W, 3) -> (L * n_patches, patch_dim)."""
    return np.concatenate([patchify(f, patch) for f in chunk], axis=0)


def tokens_to_chunk(tokens: np.ndarray, n_latents: int, frame_size: int = 16,
                    patch: int = 4) -> np.ndarray:
    per = tokens.shape[0] // n_latents
    return np.stack([unpatchify(tokens[i * per:(i + 1) * per], frame_size, patch)
                     for i in range(n_latents)])


@dataclass
class TokenSequence:
    features: np.ndarray    # (n, patch_dim) raw token features
    segments: np.ndarray    # (n,) segment ids
    latent_pos: np.ndarray  # (n,) latent index within the segment
    patch_pos: np.ndarray   # (n,) patch/group index within the latent
    t: int                  # denoising timestep
    chunk_slice: slice      # where the chunk tokens live
    n_chunk_latents: int

    def __len__(self) -> int:
        return self.features.shape[0]


def _noised(frame: np.ndarray, t_aug: int, rng: np.random.Generator,
            schedule: NoiseSchedule) -> np.ndarray:
    eps = rng.standard_normal(frame.shape)
    return forward_diffuse(np.asarray(frame, dtype=np.float64), t_aug, eps, schedule)


def build_sequence(noisy_chunk: np.ndarray, t: int, prompt_embedding: np.ndarray,
                   temporal_cache: TemporalCache, shot_cache: ShotCache | None,
                   cfg: ModelConfig, aug=None, rng: np.random.Generator | None = None,
                   schedule: NoiseSchedule | None = None,
                   zero_shot_cache: bool = False) -> TokenSequence:
    """Assemble the conditioning sequence for one denoising call.

    `aug` carries (shot_range, temporal_range) timestep bounds; when given,
    cache frames are forward-diffused before tokenization (one timestep draw
    per cache). `zero_shot_cache` keeps all K keyframe slots in the layout
    but zeroes their features (stage-1 curriculum).
    """
    patch = cfg.patch
    pd = cfg.patch_dim
    tpl = cfg.tokens_per_latent
    feats, segs, lpos, ppos = [], [], [], []

    text = np.zeros(pd)
    text[:prompt_embedding.shape[0]] = cfg.text_scale * prompt_embedding
    feats.append(text)
    segs.append(SEG_TEXT)
    lpos.append(0)
    ppos.append(0)

    if zero_shot_cache:
        for j in range(cfg.k):
            for p in range(tpl):
                feats.append(np.zeros(pd))
                segs.append(SEG_SHOT)
                lpos.append(j)
                ppos.append(p)
    elif shot_cache is not None and not shot_cache.empty:
        t_shot = None
        if aug is not None:
            lo, hi = aug.shot_range
            t_shot = int(rng.integers(lo, hi + 1))
        for j, entry in enumerate(shot_cache.entries):
            frame = entry.frame
            if t_shot is not None:
                frame = _noised(frame, t_shot, rng, schedule)
            for p, tok in enumerate(patchify(np.asarray(frame, dtype=np.float64), patch)):
                feats.append(tok)
                segs.append(SEG_SHOT)
                lpos.append(j)
                ppos.append(p)

    if not temporal_cache.empty:
        window = temporal_cache.window
        if aug is not None:
            lo, hi = aug.temporal_range
            t_temp = int(rng.integers(lo, hi + 1))
            noised = TemporalCache(temporal_cache.cfg)
            noised.window = [_noised(f, t_temp, rng, schedule) for f in window]
            source = noised
        else:
            source = temporal_cache
        for tok, pos, group in source.compress(tpl, patchify=lambda f: patchify(f, patch)):
            feats.append(np.asarray(tok, dtype=np.float64))
            segs.append(SEG_TEMPORAL)
            lpos.append(pos)
            ppos.append(group)

    chunk_start = len(feats)
    for li in range(noisy_chunk.shape[0]):
        for p, tok in enumerate(patchify(np.asarray(noisy_chunk[li], dtype=np.float64), patch)):
            feats.append(tok)
            segs.append(SEG_CHUNK)
            lpos.append(li)
            ppos.append(p)

    return TokenSequence(
        features=np.asarray(feats, dtype=np.float64),
        segments=np.asarray(segs, dtype=np.int64),
        latent_pos=np.asarray(lpos, dtype=np.int64),
        patch_pos=np.asarray(ppos, dtype=np.int64),
        t=int(t),
        chunk_slice=slice(chunk_start, len(feats)),
        n_chunk_latents=noisy_chunk.shape[0],
    )
