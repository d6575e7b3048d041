"""Deterministic DDIM sampler (eta = 0) over the conditioning sequence."""

from __future__ import annotations

import numpy as np

from ..cache import ShotCache, TemporalCache
from ..config import ModelConfig, SamplerConfig
from .model import DenoiserModel, denoise
from .schedule import NoiseSchedule
from .tokens import build_sequence


def sample_chunk(model: DenoiserModel, prompt_embedding: np.ndarray,
                 temporal_cache: TemporalCache, shot_cache: ShotCache | None,
                 schedule: NoiseSchedule, sampler_cfg: SamplerConfig,
                 seed: int) -> np.ndarray:
    """Generate one chunk from seeded noise; bit-identical per (inputs, seed)."""
    cfg: ModelConfig = model.cfg
    rng = np.random.default_rng(seed)
    shape = (cfg.chunk_latents, cfg.frame_size, cfg.frame_size, 3)
    x = rng.standard_normal(shape)
    ts = np.linspace(schedule.timesteps - 1, 0, sampler_cfg.steps).round().astype(int)
    for i, t in enumerate(ts):
        seq = build_sequence(x, int(t), prompt_embedding, temporal_cache,
                             shot_cache, cfg)
        eps_hat = denoise(model, seq)
        sa = schedule.sqrt_alpha_bar(int(t))
        sb = schedule.sqrt_one_minus_alpha_bar(int(t))
        x0 = (x - sb * eps_hat) / sa
        if sampler_cfg.clamp_x0:
            x0 = np.clip(x0, -1.0, 1.0)
        if i + 1 < len(ts):
            tp = int(ts[i + 1])
            x = schedule.sqrt_alpha_bar(tp) * x0 + schedule.sqrt_one_minus_alpha_bar(tp) * eps_hat
        else:
            x = x0
    return np.clip(x, -1.0, 1.0).astype(np.float32)
