import numpy as np
import pytest

from multishot.embed import crop_to_frame, sim
from multishot.metrics import (
    ShotEval,
    all_alignment,
    all_consistency,
    char_alignment,
    char_consistency,
    evaluate_corpus,
    evaluate_scene,
)
from multishot.promptlang import AttributeSet, BackgroundSpec, CharacterSpec, parse_prompt
from multishot.toyworld import chunk_keyframe_indices, render_shot, sample_scene


def scene_evals(scene, world, seed=0, recolor_shot=None, recolor_to="red"):
    shots = []
    for i, shot_spec in enumerate(scene.shots):
        if recolor_shot == i:
            from dataclasses import replace

            chars = tuple(replace(c, color=recolor_to) for c in shot_spec.attrs.characters)
            shot_spec = replace(shot_spec, attrs=replace(shot_spec.attrs, characters=chars))
        frames, _ = render_shot(shot_spec, seed + i, world)
        kfs = [frames[k] for k in chunk_keyframe_indices(shot_spec.n_frames, 6)]
        shots.append(ShotEval(keyframes=kfs, attrs=shot_spec.attrs))
    return shots


@pytest.fixture(scope="module")
def rendered_scene(world):
    rng = np.random.default_rng(31)
    scene = sample_scene(rng, "m")
    return scene_evals(scene, world)


def test_all_consistency_identical_keyframes(embedder):
    frame = render_shot(sample_scene(np.random.default_rng(0), "s").shots[0], 0)[0][3]
    shots = [ShotEval(keyframes=[frame.copy()], attrs=AttributeSet(
        background=BackgroundSpec(pattern="solid", color="red"))) for _ in range(3)]
    assert all_consistency(shots, embedder) == pytest.approx(1.0)


def test_all_consistency_matches_bruteforce(embedder, world):
    rng = np.random.default_rng(7)
    for trial in range(5):
        scene = sample_scene(rng, f"s{trial}", world)
        shots = scene_evals(scene, world, seed=trial)
        got = all_consistency(shots, embedder)
        embs = [[embedder.embed_image(k) for k in s.keyframes] for s in shots]
        sims = []
        for i in range(len(shots)):
            for j in range(i + 1, len(shots)):
                for a in embs[i]:
                    for b in embs[j]:
                        sims.append(float(np.dot(a, b)))
        assert got == pytest.approx(np.mean(sims), abs=1e-9)


def test_consistency_permutation_invariant_exact(embedder, rendered_scene):
    shots = rendered_scene
    base_all = all_consistency(shots, embedder)
    base_char = char_consistency(shots, embedder)
    rng = np.random.default_rng(0)
    for _ in range(3):
        order = rng.permutation(len(shots))
        shuffled = [shots[i] for i in order]
        assert all_consistency(shuffled, embedder) == base_all
        assert char_consistency(shuffled, embedder) == base_char


def test_char_consistency_high_on_consistent_scene(embedder, world):
    rng = np.random.default_rng(8)
    vals = []
    for i in range(6):
        scene = sample_scene(rng, f"s{i}", world)
        v = char_consistency(scene_evals(scene, world, seed=i), embedder)
        if v is not None:
            vals.append(v)
    assert np.mean(vals) >= 0.9


def test_char_consistency_drops_when_recolored(embedder, world):
    rng = np.random.default_rng(9)
    drops = 0
    pairs = 0
    for i in range(8):
        scene = sample_scene(rng, f"s{i}", world)
        anchor_color = scene.characters[0].color
        other = "red" if anchor_color != "red" else "blue"
        base = char_consistency(scene_evals(scene, world, seed=i), embedder)
        recolored = char_consistency(
            scene_evals(scene, world, seed=i, recolor_shot=1, recolor_to=other),
            embedder)
        if base is None or recolored is None:
            continue
        pairs += 1
        drops += recolored < base
    assert pairs >= 5
    assert drops == pairs


def test_char_consistency_single_pair_exact(embedder, world):
    # one identity, two one-keyframe shots: metric equals that single pair sim
    rng = np.random.default_rng(10)
    scene = sample_scene(rng, "s", world)
    shots = scene_evals(scene, world)[:2]
    got = char_consistency(shots, embedder)
    if got is None:
        pytest.skip("no detections in fixture")
    dets0 = embedder.detect_sprites(shots[0].keyframes[0])
    dets1 = embedder.detect_sprites(shots[1].keyframes[0])
    if len(dets0) != 1 or len(dets1) != 1 or len(shots[0].attrs.characters) != 1:
        pytest.skip("fixture has multiple identities")
    e0 = embedder.embed_image(crop_to_frame(shots[0].keyframes[0], dets0[0].box))
    e1 = embedder.embed_image(crop_to_frame(shots[1].keyframes[0], dets1[0].box))
    assert got == pytest.approx(sim(e0, e1), abs=1e-12)


def test_char_alignment_matching_vs_disjoint(embedder, world):
    rng = np.random.default_rng(11)
    scene = sample_scene(rng, "s", world)
    shots = scene_evals(scene, world)
    good = char_alignment(shots, embedder)
    assert good is not None and good >= 0.8
    from dataclasses import replace

    wrong_shots = []
    for s in shots:
        chars = tuple(CharacterSpec(id=c.id,
                                    shape="square" if c.shape != "square" else "circle",
                                    color="red" if c.color != "red" else "blue",
                                    size="large" if c.size != "large" else "small")
                      for c in s.attrs.characters)
        wrong_shots.append(ShotEval(keyframes=s.keyframes,
                                    attrs=replace(s.attrs, characters=chars)))
    assert char_alignment(wrong_shots, embedder) < good


def test_char_metrics_absent_without_characters(embedder):
    attrs = AttributeSet(background=BackgroundSpec(pattern="solid", color="green"))
    from multishot.toyworld import ShotSpec

    frames, _ = render_shot(ShotSpec(scene_id="s", attrs=attrs, trajectory={},
                                     n_frames=6), 0)
    shots = [ShotEval(keyframes=[frames[3]], attrs=attrs) for _ in range(2)]
    assert char_consistency(shots, embedder) is None
    assert char_alignment(shots, embedder) is None


def test_all_alignment_fixture_and_shuffle(embedder, world):
    rng = np.random.default_rng(12)
    scenes = [sample_scene(rng, f"s{i}", world) for i in range(6)]
    evals = [scene_evals(s, world, seed=i) for i, s in enumerate(scenes)]
    correct = np.mean([all_alignment(e, embedder) for e in evals])
    assert correct >= 0.8
    # assign each scene the prompts of the NEXT scene
    shuffled_vals = []
    for i, e in enumerate(evals):
        donor = evals[(i + 1) % len(evals)]
        mixed = [ShotEval(keyframes=s.keyframes, attrs=donor[j % len(donor)].attrs)
                 for j, s in enumerate(e)]
        shuffled_vals.append(all_alignment(mixed, embedder))
    assert np.mean(shuffled_vals) < correct


def test_all_alignment_single_shot_exact(embedder, world):
    rng = np.random.default_rng(13)
    scene = sample_scene(rng, "s", world)
    shots = scene_evals(scene, world)[:1]
    got = all_alignment(shots, embedder)
    text = embedder.embed_text(shots[0].attrs)
    expected = np.mean(np.sort([sim(embedder.embed_image(k), text)
                                for k in shots[0].keyframes]))
    assert got == pytest.approx(expected, abs=1e-12)


def test_evaluate_corpus_aggregates(embedder, world):
    rng = np.random.default_rng(14)
    scenes = [scene_evals(sample_scene(rng, f"s{i}", world), world, seed=i)
              for i in range(3)]
    report = evaluate_corpus(scenes, embedder)
    assert report.n_scenes == 3
    assert len(report.per_scene) == 3
    d = report.to_dict()
    assert set(d) >= {"char_consistency", "all_consistency", "char_alignment",
                      "all_alignment"}
    for key in ("all_consistency", "all_alignment"):
        assert -1.0 <= d[key] <= 1.0


def test_require_two_shots(embedder, rendered_scene):
    with pytest.raises(ValueError):
        char_consistency(rendered_scene[:1], embedder)
    with pytest.raises(ValueError):
        all_consistency(rendered_scene[:1], embedder)
