"""Two-stage training: temporal-only curriculum first, then a mixed
curriculum over all four cache scenarios with negative sampling and
asymmetric cache noising.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from ..cache import CacheConfig, KeyframeEntry, ShotCache, TemporalCache
from ..config import ModelConfig, TrainConfig
from ..promptlang import AttributeSet, parse_prompt
from ..tensorio import read_tensor
from ..toyworld import chunk_keyframe_indices
from .model import Adam, DenoiserModel, NonFiniteGradient
from .schedule import NoiseSchedule, forward_diffuse
from .tokens import TokenSequence, build_sequence


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class AugConfig:
    shot_range: tuple[int, int] = (100, 400)
    temporal_range: tuple[int, int] = (0, 100)


@dataclass
class TrainingItem:
    seq: TokenSequence
    eps: np.ndarray
    mode: int  # 1..4
    scene: int = -1
    shot: int = -1
    chunk: int = -1
    shot_cache: ShotCache | None = None


class CorpusView:
    """Read-only view over a rendered corpus directory with memoized frames
    and keyframe embeddings (both are deterministic given the corpus)."""

    def __init__(self, corpus_dir: str, embedder):
        self.dir = corpus_dir
        self.embedder = embedder
        with open(os.path.join(corpus_dir, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.chunk_latents = self.manifest["world"]["chunk_latents"]
        self._frames: dict[tuple[int, int], np.ndarray] = {}
        self._kf_emb: dict[tuple[int, int, int], np.ndarray] = {}
        self._attrs: dict[tuple[int, int], AttributeSet] = {}

    @property
    def n_scenes(self) -> int:
        return len(self.manifest["scenes"])

    def n_shots(self, scene: int) -> int:
        return len(self.manifest["scenes"][scene]["shots"])

    def shot_record(self, scene: int, shot: int) -> dict:
        return self.manifest["scenes"][scene]["shots"][shot]

    def chunks(self, scene: int, shot: int) -> int:
        return self.shot_record(scene, shot)["chunks"]

    def frames(self, scene: int, shot: int) -> np.ndarray:
        key = (scene, shot)
        if key not in self._frames:
            rel = self.shot_record(scene, shot)["tensor"]
            self._frames[key] = read_tensor(os.path.join(self.dir, rel))
        return self._frames[key]

    def attrs(self, scene: int, shot: int) -> AttributeSet:
        key = (scene, shot)
        if key not in self._attrs:
            self._attrs[key] = parse_prompt(self.shot_record(scene, shot)["prompt"])
        return self._attrs[key]

    def keyframe(self, scene: int, shot: int, chunk: int) -> np.ndarray:
        idx = chunk_keyframe_indices(self.frames(scene, shot).shape[0],
                                     self.chunk_latents)[chunk]
        return self.frames(scene, shot)[idx]

    def keyframe_embedding(self, scene: int, shot: int, chunk: int) -> np.ndarray:
        key = (scene, shot, chunk)
        if key not in self._kf_emb:
            self._kf_emb[key] = self.embedder.embed_image(self.keyframe(*key))
        return self._kf_emb[key]


def drop_attributes(attrs: AttributeSet, rng: np.random.Generator,
                    p: float) -> AttributeSet:
    """Randomly hide appearance attributes from the conditioning prompt so
    the model learns to source unspecified appearance from its caches."""
    if p <= 0.0:
        return attrs
    chars = []
    for c in attrs.characters:
        chars.append(replace(
            c,
            color=None if rng.random() < p else c.color,
            size=None if rng.random() < p else c.size,
            shape=None if rng.random() < p / 2 else c.shape,
        ))
    bg = attrs.background
    bg = replace(
        bg,
        color=None if rng.random() < p / 2 else bg.color,
        pattern=None if rng.random() < p / 2 else bg.pattern,
    )
    return replace(attrs, characters=tuple(chars), background=bg)


def _retrieve_for_training(corpus: CorpusView, scene: int, shot: int,
                           prompt_embedding: np.ndarray, k: int,
                           cache_cfg: CacheConfig) -> ShotCache:
    """Top-k over the scene's other shots' keyframes, mirroring inference."""
    pool: list[tuple[float, int, np.ndarray]] = []
    pid = 0
    for j in range(corpus.n_shots(scene)):
        if j == shot:
            continue
        for c in range(corpus.chunks(scene, j)):
            emb = corpus.keyframe_embedding(scene, j, c)
            sim = float(np.dot(emb, prompt_embedding))
            pool.append((-sim, pid, (scene, j, c)))
            pid += 1
    pool.sort(key=lambda t: (t[0], t[1]))
    entries = []
    for rank, (_, _, key) in enumerate(pool[:k]):
        entries.append(KeyframeEntry(
            id=rank, frame=corpus.keyframe(*key),
            embedding=corpus.keyframe_embedding(*key),
            source=("generated", f"scene{key[0]}_shot{key[1]}", key[2])))
    return ShotCache(entries=entries, k=k)


def sample_training_item(corpus: CorpusView, stage: int, cfg: TrainConfig,
                         model_cfg: ModelConfig, cache_cfg: CacheConfig,
                         schedule: NoiseSchedule, rng: np.random.Generator,
                         mode: int | None = None) -> TrainingItem:
    cl = corpus.chunk_latents
    if stage == 1:
        scene = int(rng.integers(0, corpus.n_scenes))
        shot = int(rng.integers(0, corpus.n_shots(scene)))
        chunk = int(rng.integers(0, corpus.chunks(scene, shot)))
        mode = 1 if chunk == 0 else 2
    else:
        if mode is None:
            names = sorted(cfg.scenario_mix)
            weights = np.array([cfg.scenario_mix[n] for n in names], dtype=float)
            mode = int(str(rng.choice(names, p=weights / weights.sum()))[-1])
        for _ in range(1000):
            scene = int(rng.integers(0, corpus.n_scenes))
            if mode in (1, 2) or corpus.n_shots(scene) >= 2:
                break
        else:
            raise ValueError("corpus has no multi-shot scenes for modes 3/4")
        shot = int(rng.integers(0, corpus.n_shots(scene)))
        n_chunks = corpus.chunks(scene, shot)
        chunk = 0 if mode in (1, 3) else int(rng.integers(1, max(2, n_chunks)))
        chunk = min(chunk, n_chunks - 1)
        if mode in (2, 4) and chunk == 0:
            mode = 1 if mode == 2 else 3

    frames = corpus.frames(scene, shot)
    v0 = np.asarray(frames[chunk * cl:(chunk + 1) * cl], dtype=np.float64)
    attrs = drop_attributes(corpus.attrs(scene, shot), rng, cfg.p_attr_drop)
    prompt_embedding = corpus.embedder.embed_text(attrs)

    temporal = TemporalCache(cache_cfg)
    if mode in (2, 4):
        history = frames[max(0, chunk * cl - temporal.capacity):chunk * cl]
        temporal.push_latents([np.asarray(f, dtype=np.float64) for f in history])

    shot_cache = None
    if stage == 2 and mode in (3, 4):
        shot_cache = _retrieve_for_training(
            corpus, scene, shot, prompt_embedding, cache_cfg.k, cache_cfg)
        if shot_cache.entries and rng.random() < cfg.p_neg:
            # negative sample: replace one slot with an unrelated keyframe
            slot = int(rng.integers(0, len(shot_cache.entries)))
            for _ in range(100):
                other = int(rng.integers(0, corpus.n_scenes))
                if other != scene:
                    break
            oshot = int(rng.integers(0, corpus.n_shots(other)))
            ochunk = int(rng.integers(0, corpus.chunks(other, oshot)))
            shot_cache.entries[slot] = KeyframeEntry(
                id=shot_cache.entries[slot].id,
                frame=corpus.keyframe(other, oshot, ochunk),
                embedding=corpus.keyframe_embedding(other, oshot, ochunk),
                source=("generated", f"scene{other}_shot{oshot}", ochunk))

    if rng.random() < cfg.t_skew:
        lo = int(cfg.t_high_band[0] * (schedule.timesteps - 1))
        hi = int(cfg.t_high_band[1] * (schedule.timesteps - 1))
        t = int(rng.integers(lo, hi + 1))
    else:
        t = int(rng.integers(0, schedule.timesteps))
    eps = rng.standard_normal(v0.shape)
    vt = forward_diffuse(v0, t, eps, schedule)
    aug = AugConfig(cfg.shot_aug, cfg.temporal_aug) if cfg.noise_aug else None
    seq = build_sequence(vt, t, prompt_embedding, temporal, shot_cache,
                         model_cfg, aug=aug, rng=rng, schedule=schedule,
                         zero_shot_cache=(stage == 1))
    return TrainingItem(seq=seq, eps=eps, mode=mode, scene=scene, shot=shot,
                        chunk=chunk, shot_cache=shot_cache)


def loss_and_gradients(model: DenoiserModel,
                       batch: list[tuple[TokenSequence, np.ndarray]]
                       ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-item MSE between true and predicted noise over chunk
    elements; gradients accumulated in item order."""
    grads = model.zero_grads()
    losses = []
    inv_b = 1.0 / len(batch)
    for seq, eps in batch:
        pred, tape = model.forward(seq, want_tape=True)
        diff = pred - eps
        losses.append(float((diff * diff).mean()))
        model.backward(tape, (2.0 * inv_b / diff.size) * diff, grads)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return float(np.mean(losses)), grads


def train(model: DenoiserModel, corpus: CorpusView, cfg: TrainConfig,
          cache_cfg: CacheConfig | None = None,
          rng: np.random.Generator | None = None,
          checkpoint_dir: str | None = None,
          log_every: int = 0) -> list[float]:
    """Run one training stage; returns the per-step loss curve."""
    from .checkpoint import save_checkpoint

    cache_cfg = cache_cfg or CacheConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    schedule = NoiseSchedule(model.cfg.timesteps, model.cfg.beta_start,
                             model.cfg.beta_end)
    adam = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    curve: list[float] = []
    initial = None
    high_streak = 0
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            item = sample_training_item(corpus, cfg.stage, cfg, model.cfg,
                                        cache_cfg, schedule, rng)
            batch.append((item.seq, item.eps))
        loss, grads = loss_and_gradients(model, batch)
        adam.step(model.params, grads)
        curve.append(loss)
        if step == 19:
            initial = float(np.mean(curve))
        if initial is not None:
            high_streak = high_streak + 1 if loss > 10.0 * initial else 0
            if high_streak >= 100:
                raise DivergenceDetected(
                    f"loss above 10x initial for 100 steps at step {step}")
        if checkpoint_dir and cfg.checkpoint_every and \
                (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"step{step + 1:06d}.fwck"),
                            model, meta={"stage": cfg.stage, "step": step + 1})
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(curve[-log_every:]))
            print(f"stage {cfg.stage} step {step + 1}/{cfg.steps} loss {recent:.4f}")
    return curve


def save_loss_curve(path: str, curve: list[float]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v:.8f}\n")
