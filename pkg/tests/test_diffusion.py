import numpy as np
import pytest

from multishot.cache import KeyframeEntry, ShotCache, TemporalCache
from multishot.config import CacheConfig, ModelConfig, SamplerConfig, TrainConfig
from multishot.diffusion import (
    DenoiserModel,
    NoiseSchedule,
    NonFiniteActivation,
    build_sequence,
    chunk_to_tokens,
    denoise,
    forward_diffuse,
    load_checkpoint,
    loss_and_gradients,
    patchify,
    sample_chunk,
    save_checkpoint,
    tokens_to_chunk,
    unpatchify,
)
from multishot.diffusion.tokens import SEG_CHUNK, SEG_SHOT, SEG_TEMPORAL, SEG_TEXT
from multishot.diffusion.training import AugConfig


# ---------------- schedule ----------------

def test_schedule_sanity():
    s = NoiseSchedule()
    assert s.betas.shape == (1000,)
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[0] == pytest.approx(1 - 1e-4)


def test_forward_diffuse_scalar_case():
    s = NoiseSchedule(timesteps=4)
    s.alpha_bars = np.array([0.9, 0.64, 0.3, 0.1])
    v0 = np.array([1.0])
    eps = np.array([0.5])
    assert forward_diffuse(v0, 1, eps, s)[0] == pytest.approx(0.8 + 0.6 * 0.5)


def test_forward_diffuse_identity_and_pure_noise():
    s = NoiseSchedule(timesteps=3)
    s.alpha_bars = np.array([1.0, 0.5, 0.0])
    v0 = np.full((2, 2), 0.3)
    eps = np.full((2, 2), -0.7)
    assert np.allclose(forward_diffuse(v0, 0, eps, s), v0)
    z = np.zeros((2, 2))
    out = forward_diffuse(z, 1, eps, s)
    assert np.allclose(out, np.sqrt(0.5) * eps)


def test_forward_diffuse_second_moment():
    s = NoiseSchedule()
    rng = np.random.default_rng(0)
    v0 = rng.normal(size=(6, 16, 16, 3))
    t = 400
    total = 0.0
    n = 300
    for _ in range(n):
        eps = rng.standard_normal(v0.shape)
        vt = forward_diffuse(v0, t, eps, s)
        total += (vt ** 2).sum()
    expected = s.alpha_bars[t] * (v0 ** 2).sum() + (1 - s.alpha_bars[t]) * v0.size
    assert total / n == pytest.approx(expected, rel=0.02)


# ---------------- tokens ----------------

def test_patchify_round_trip():
    rng = np.random.default_rng(1)
    frame = rng.normal(size=(16, 16, 3))
    tokens = patchify(frame)
    assert tokens.shape == (16, 48)
    assert np.array_equal(unpatchify(tokens), frame)
    chunk = rng.normal(size=(6, 16, 16, 3))
    assert np.array_equal(tokens_to_chunk(chunk_to_tokens(chunk), 6), chunk)


def _mode_sequence(mode, cfg=None, rng_seed=0):
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(rng_seed)
    chunk = rng.normal(size=(cfg.chunk_latents, cfg.frame_size, cfg.frame_size, 3))
    pe = rng.normal(size=cfg.text_dim)
    pe /= np.linalg.norm(pe)
    tc = TemporalCache(CacheConfig())
    if mode in (2, 4):
        tc.push_latents([rng.normal(size=(cfg.frame_size, cfg.frame_size, 3))
                         for _ in range(19)])
    sc = None
    if mode in (3, 4):
        sc = ShotCache([KeyframeEntry(id=i, frame=rng.normal(size=(cfg.frame_size, cfg.frame_size, 3)),
                                      embedding=rng.normal(size=cfg.text_dim),
                                      source=("injected",)) for i in range(cfg.k)], k=cfg.k)
    return build_sequence(chunk, 500, pe, tc, sc, cfg), chunk


def test_mode1_layout():
    seq, _ = _mode_sequence(1)
    assert len(seq) == 1 + 96
    assert set(seq.segments.tolist()) == {SEG_TEXT, SEG_CHUNK}


def test_mode4_layout_matches_default_arithmetic():
    seq, _ = _mode_sequence(4)
    counts = np.bincount(seq.segments, minlength=4)
    assert counts[SEG_TEXT] == 1
    assert counts[SEG_SHOT] == 48
    assert counts[SEG_TEMPORAL] == 40
    assert counts[SEG_CHUNK] == 96
    assert len(seq) == 185


def test_zeroed_shot_cache_slots():
    cfg = ModelConfig()
    rng = np.random.default_rng(2)
    chunk = rng.normal(size=(6, 16, 16, 3))
    pe = rng.normal(size=32)
    tc = TemporalCache(CacheConfig())
    seq = build_sequence(chunk, 10, pe, tc, None, cfg, zero_shot_cache=True)
    shot_feats = seq.features[seq.segments == SEG_SHOT]
    assert shot_feats.shape == (48, 48)
    assert np.all(shot_feats == 0.0)


def test_shot_tokens_equal_patchified_frames_without_aug():
    seq, _ = _mode_sequence(3, rng_seed=5)
    cfg = ModelConfig()
    rng = np.random.default_rng(5)
    rng.normal(size=(cfg.chunk_latents, cfg.frame_size, cfg.frame_size, 3))
    pe = rng.normal(size=32)
    frames = [rng.normal(size=(16, 16, 3)) for _ in range(3)]
    sc = ShotCache([KeyframeEntry(id=i, frame=f, embedding=np.zeros(32),
                                  source=("injected",)) for i, f in enumerate(frames)], k=3)
    seq = build_sequence(np.zeros((6, 16, 16, 3)), 0, pe, TemporalCache(CacheConfig()),
                         sc, cfg)
    shot_feats = seq.features[seq.segments == SEG_SHOT]
    expected = np.concatenate([patchify(f) for f in frames])
    assert np.array_equal(shot_feats, expected)


def test_augmentation_noises_caches_only():
    cfg = ModelConfig()
    rng = np.random.default_rng(3)
    chunk = rng.normal(size=(6, 16, 16, 3))
    pe = rng.normal(size=32)
    tc = TemporalCache(CacheConfig())
    tc.push_latents([rng.normal(size=(16, 16, 3)) for _ in range(5)])
    frames = [rng.normal(size=(16, 16, 3)) for _ in range(2)]
    sc = ShotCache([KeyframeEntry(id=i, frame=f, embedding=np.zeros(32),
                                  source=("injected",)) for i, f in enumerate(frames)], k=3)
    sched = NoiseSchedule()
    clean = build_sequence(chunk, 7, pe, tc, sc, cfg)
    noisy = build_sequence(chunk, 7, pe, tc, sc, cfg, aug=AugConfig((300, 300), (90, 90)),
                           rng=np.random.default_rng(0), schedule=sched)
    # chunk + text identical; cache tokens perturbed
    assert np.array_equal(clean.features[clean.segments == SEG_CHUNK],
                          noisy.features[noisy.segments == SEG_CHUNK])
    assert np.array_equal(clean.features[0], noisy.features[0])
    assert not np.allclose(clean.features[clean.segments == SEG_SHOT],
                           noisy.features[noisy.segments == SEG_SHOT])
    assert not np.allclose(clean.features[clean.segments == SEG_TEMPORAL],
                           noisy.features[noisy.segments == SEG_TEMPORAL])
    # same rng seed -> identical augmented sequence
    again = build_sequence(chunk, 7, pe, tc, sc, cfg, aug=AugConfig((300, 300), (90, 90)),
                           rng=np.random.default_rng(0), schedule=sched)
    assert np.array_equal(noisy.features, again.features)


# ---------------- model ----------------

REDUCED = ModelConfig(d_model=16, n_blocks=1, d_mlp=32, frame_size=8, patch=4,
                      chunk_latents=2, text_dim=8, k=2, init_seed=3)


def _reduced_seq(seed=0):
    rng = np.random.default_rng(seed)
    chunk = rng.normal(size=(2, 8, 8, 3))
    pe = rng.normal(size=8)
    pe /= np.linalg.norm(pe)
    tc = TemporalCache(CacheConfig(tier_table=((1, 1), (2, 4))))
    tc.push_latents([rng.normal(size=(8, 8, 3)) for _ in range(3)])
    sc = ShotCache([KeyframeEntry(id=i, frame=rng.normal(size=(8, 8, 3)),
                                  embedding=rng.normal(size=8), source=("injected",))
                    for i in range(2)], k=2)
    seq = build_sequence(chunk, 137, pe, tc, sc, REDUCED)
    eps = rng.normal(size=chunk.shape)
    return seq, eps


def test_model_deterministic_and_shaped():
    model = DenoiserModel(REDUCED)
    seq, _ = _reduced_seq()
    out1 = model.forward(seq)
    out2 = model.forward(seq)
    assert out1.shape == (2, 8, 8, 3)
    assert np.array_equal(out1, out2)


def test_output_shape_across_configs():
    rng = np.random.default_rng(9)
    for _ in range(3):
        cfg = ModelConfig(d_model=int(rng.choice([16, 32])), n_blocks=int(rng.integers(1, 3)),
                          d_mlp=32, frame_size=8, patch=4,
                          chunk_latents=int(rng.integers(1, 4)), text_dim=8, k=2)
        model = DenoiserModel(cfg)
        chunk = rng.normal(size=(cfg.chunk_latents, 8, 8, 3))
        pe = rng.normal(size=8)
        seq = build_sequence(chunk, 1, pe, TemporalCache(CacheConfig()), None, cfg)
        assert model.forward(seq).shape == chunk.shape


def test_zero_params_output_equals_bias():
    model = DenoiserModel(REDUCED)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    model.params["b_out"][:] = 0.37
    seq, _ = _reduced_seq()
    out = model.forward(seq)
    assert np.allclose(out, 0.37)


def test_gradient_check_quick():
    model = DenoiserModel(REDUCED)
    seq, eps = _reduced_seq()
    pred, tape = model.forward(seq, want_tape=True)
    grads = model.zero_grads()
    model.backward(tape, 2.0 * (pred - eps) / pred.size, grads)

    def loss_of():
        return float(((model.forward(seq) - eps) ** 2).mean())

    h = 1e-5
    rng = np.random.default_rng(11)
    for name in ("w_in", "seg", "blk0.wq", "blk0.w1", "blk0.ln1_g", "ln_f_g", "w_out"):
        flat = model.params[name].reshape(-1)
        for ix in rng.choice(flat.size, size=4, replace=False):
            orig = flat[ix]
            flat[ix] = orig + h
            lp = loss_of()
            flat[ix] = orig - h
            lm = loss_of()
            flat[ix] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[ix]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4


def test_loss_is_mse_over_chunk_elements_only():
    model = DenoiserModel(REDUCED)
    seq, eps = _reduced_seq()
    loss, _ = loss_and_gradients(model, [(seq, eps)])
    pred = model.forward(seq)
    assert loss == pytest.approx(float(((pred - eps) ** 2).mean()), abs=1e-12)


def test_perfect_prediction_zero_loss_zero_grads():
    model = DenoiserModel(REDUCED)
    seq, _ = _reduced_seq()
    eps = model.forward(seq)  # force prediction == target
    loss, grads = loss_and_gradients(model, [(seq, eps)])
    assert loss == 0.0
    assert all(np.allclose(g, 0.0) for g in grads.values())


def test_batch_duplication_invariance():
    model = DenoiserModel(REDUCED)
    s1, e1 = _reduced_seq(1)
    s2, e2 = _reduced_seq(2)
    loss_a, grads_a = loss_and_gradients(model, [(s1, e1), (s2, e2)])
    loss_b, grads_b = loss_and_gradients(model, [(s1, e1), (s1, e1), (s2, e2), (s2, e2)])
    assert loss_a == pytest.approx(loss_b, abs=1e-12)
    for k in grads_a:
        assert np.allclose(grads_a[k], grads_b[k], atol=1e-12)


def test_stage1_output_invariant_to_shot_cache_contents():
    cfg = ModelConfig(d_model=16, n_blocks=1, d_mlp=32, frame_size=8, patch=4,
                      chunk_latents=2, text_dim=8, k=2)
    model = DenoiserModel(cfg)
    rng = np.random.default_rng(5)
    chunk = rng.normal(size=(2, 8, 8, 3))
    pe = rng.normal(size=8)
    tc = TemporalCache(CacheConfig(tier_table=((1, 1),)))

    def out_with_cache(entries):
        sc = ShotCache(entries, k=2) if entries else None
        seq = build_sequence(chunk, 3, pe, tc, sc, cfg, zero_shot_cache=True)
        return model.forward(seq)

    cache_a = [KeyframeEntry(id=0, frame=rng.normal(size=(8, 8, 3)),
                             embedding=np.zeros(8), source=("injected",))]
    cache_b = [KeyframeEntry(id=0, frame=rng.normal(size=(8, 8, 3)),
                             embedding=np.zeros(8), source=("injected",))]
    assert np.array_equal(out_with_cache(cache_a), out_with_cache(cache_b))
    assert np.array_equal(out_with_cache(cache_a), out_with_cache(None))


def test_non_finite_activation_reported():
    model = DenoiserModel(REDUCED)
    model.params["w_in"][0, 0] = np.nan
    seq, _ = _reduced_seq()
    with pytest.raises(NonFiniteActivation):
        denoise(model, seq)


# ---------------- checkpoint ----------------

def test_checkpoint_round_trip(tmp_path):
    model = DenoiserModel(REDUCED)
    rng = np.random.default_rng(7)
    for k in model.params:
        model.params[k] = rng.normal(size=model.params[k].shape)
    path = str(tmp_path / "m.fwck")
    save_checkpoint(path, model, meta={"stage": 1})
    with open(path, "rb") as fh:
        assert fh.read(4) == b"FWCK"
    loaded, meta = load_checkpoint(path)
    assert meta == {"stage": 1}
    for k in model.params:
        assert np.array_equal(loaded.params[k],
                              model.params[k].astype(np.float32).astype(np.float64))


def test_checkpoint_bad_magic(tmp_path):
    from multishot.diffusion.checkpoint import CheckpointLoadError

    p = tmp_path / "bad.fwck"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointLoadError):
        load_checkpoint(str(p))


# ---------------- sampler ----------------

def test_sampler_deterministic_and_clamped():
    cfg = ModelConfig(d_model=16, n_blocks=1, d_mlp=32, frame_size=8, patch=4,
                      chunk_latents=2, text_dim=8, k=2)
    model = DenoiserModel(cfg)
    sched = NoiseSchedule()
    pe = np.zeros(8)
    pe[0] = 1.0
    tc = TemporalCache(CacheConfig())
    out1 = sample_chunk(model, pe, tc, None, sched, SamplerConfig(steps=8), seed=42)
    out2 = sample_chunk(model, pe, tc, None, sched, SamplerConfig(steps=8), seed=42)
    out3 = sample_chunk(model, pe, tc, None, sched, SamplerConfig(steps=8), seed=43)
    assert np.array_equal(out1, out2)
    assert not np.array_equal(out1, out3)
    assert out1.shape == (2, 8, 8, 3)
    assert out1.min() >= -1.0 and out1.max() <= 1.0


def test_sampler_default_chunk_shape():
    model = DenoiserModel(ModelConfig())
    sched = NoiseSchedule()
    pe = np.zeros(32)
    pe[0] = 1.0
    out = sample_chunk(model, pe, TemporalCache(CacheConfig()), None, sched,
                       SamplerConfig(steps=4), seed=0)
    assert out.shape == (6, 16, 16, 3)
