import numpy as np
import pytest

from multishot.config import CurateConfig
from multishot.curate import (
    CaptionRecord,
    RemoteCaptioner,
    RemoteUnavailable,
    SceneCluster,
    ToyCaptioner,
    cluster_scenes,
    cut_to_shots,
    detected_identities,
    filter_scenes,
    group_caption,
    run_pipeline,
    split_shots,
    validate_captions,
)
from multishot.promptlang import parse_prompt
from multishot.tensorio import read_tensor
from multishot.toyworld import concat_corpus, render_shot, sample_scene


@pytest.fixture(scope="module")
def corpus_video(small_corpus):
    corpus_dir, manifest = small_corpus
    video, boundaries, labels = concat_corpus(manifest, corpus_dir)
    return video, boundaries, labels


@pytest.fixture(scope="module")
def corpus_shots(small_corpus):
    import os

    corpus_dir, manifest = small_corpus
    shots, gts, labels = [], [], []
    for s_idx, scene in enumerate(manifest["scenes"]):
        for shot in scene["shots"]:
            shots.append(read_tensor(os.path.join(corpus_dir, shot["tensor"])))
            labels.append(s_idx)
    return shots, labels


def test_split_constant_video():
    video = np.zeros((20, 16, 16, 3), np.float32)
    assert split_shots(video).boundaries == []


def test_split_two_shot_concat(world):
    rng = np.random.default_rng(0)
    a = sample_scene(rng, "a", world)
    b = sample_scene(rng, "b", world)
    fa, _ = render_shot(a.shots[0], 0, world)
    fb, _ = render_shot(b.shots[1], 1, world)
    video = np.concatenate([fa, fb])
    cuts = split_shots(video)
    assert cuts.boundaries == [fa.shape[0]]


def test_split_translation_equivariant(corpus_video):
    video = corpus_video[0][:120]
    base = split_shots(video).boundaries
    k = 5
    padded = np.concatenate([np.repeat(video[:1], k, axis=0), video])
    shifted = split_shots(padded).boundaries
    assert shifted == [b + k for b in base]


def test_split_suppresses_adjacent_boundaries():
    video = np.zeros((10, 4, 4, 3), np.float32)
    video[4] = 1.0   # spike produces diffs > theta at indices 4 and 5
    cuts = split_shots(video, theta_cut=0.6)
    assert cuts.boundaries == [4]


def test_split_corpus_f1(corpus_video):
    video, truth, _ = corpus_video
    got = split_shots(video).boundaries
    tp = len(set(got) & set(truth))
    precision = tp / max(len(got), 1)
    recall = tp / len(truth)
    f1 = 2 * precision * recall / max(precision + recall, 1e-9)
    assert f1 >= 0.95


def test_cluster_single_shot(embedder):
    rng = np.random.default_rng(1)
    scene = sample_scene(rng, "s")
    frames, _ = render_shot(scene.shots[0], 0)
    clusters = cluster_scenes([frames], embedder)
    assert len(clusters) == 1 and clusters[0].shot_ids == [0]


def test_cluster_one_scene_groups_together(embedder, world):
    rng = np.random.default_rng(2)
    scene = sample_scene(rng, "s", world)
    shots = [render_shot(sh, i, world)[0] for i, sh in enumerate(scene.shots)]
    clusters = cluster_scenes(shots, embedder)
    assert len(clusters) == 1
    assert clusters[0].shot_ids == list(range(len(shots)))


def test_cluster_members_consecutive(embedder, corpus_shots):
    shots, _ = corpus_shots
    clusters = cluster_scenes(shots[:40], embedder)
    for c in clusters:
        assert c.shot_ids == list(range(c.shot_ids[0], c.shot_ids[-1] + 1))


def test_cluster_adjusted_rand(embedder, corpus_shots):
    from scipy.special import comb

    shots, labels = corpus_shots
    clusters = cluster_scenes(shots, embedder)
    pred = np.empty(len(shots), dtype=int)
    for c in clusters:
        for sid in c.shot_ids:
            pred[sid] = c.cluster_id

    def ari(a, b):
        a, b = np.asarray(a), np.asarray(b)
        n = len(a)
        ctab = {}
        for x, y in zip(a, b):
            ctab[(x, y)] = ctab.get((x, y), 0) + 1
        sum_comb = sum(comb(v, 2) for v in ctab.values())
        arow = {}
        brow = {}
        for (x, y), v in ctab.items():
            arow[x] = arow.get(x, 0) + v
            brow[y] = brow.get(y, 0) + v
        sa = sum(comb(v, 2) for v in arow.values())
        sb = sum(comb(v, 2) for v in brow.values())
        expected = sa * sb / comb(n, 2)
        return (sum_comb - expected) / ((sa + sb) / 2 - expected)

    assert ari(labels, pred) >= 0.9


def test_filter_short_shot(corpus_shots, embedder):
    shots, _ = corpus_shots
    shots = list(shots[:4])
    shots.append(shots[0][:7])  # 7 frames < 1s at 8 fps
    clusters = [SceneCluster(0, [0, 1]), SceneCluster(1, [2, 3, 4])]
    identities = {i: {("circle", "red", "small")} for i in range(5)}
    kept, log = filter_scenes(clusters, shots, identities, fps=8)
    assert [r for r in log if r.rule == "min_duration" and r.id == 4]
    assert all(4 not in c.shot_ids for c in kept)


def test_filter_too_many_characters(corpus_shots):
    shots, _ = corpus_shots
    clusters = [SceneCluster(0, [0, 1])]
    identities = {0: {"a", "b", "c"}, 1: {"a", "d"}}  # 4 distinct in the cluster
    kept, log = filter_scenes(clusters, shots, identities)
    assert kept == []
    assert log[0].rule == "max_characters" and log[0].target == "cluster"


def test_filter_compliant_passthrough(corpus_shots):
    shots, _ = corpus_shots
    clusters = [SceneCluster(0, [0, 1]), SceneCluster(1, [2])]
    identities = {i: {"a"} for i in range(3)}
    kept, log = filter_scenes(clusters, shots, identities)
    assert [c.shot_ids for c in kept] == [[0, 1], [2]]
    assert log == []


def test_toy_captioner_consistent_ids(embedder, world):
    rng = np.random.default_rng(3)
    scene = sample_scene(rng, "s", world)
    rendered = [render_shot(sh, i, world) for i, sh in enumerate(scene.shots)]
    shots = [r[0] for r in rendered]
    gts = [r[1] for r in rendered]
    captioner = ToyCaptioner(embedder)
    captions = captioner.caption_cluster(shots, gts)
    assert len(captions) == len(shots)
    # the anchor character appears in every shot and keeps its id
    for text in captions:
        attrs = parse_prompt(text)
        assert "a" in {c.id for c in attrs.characters}


def test_group_caption_empty_cluster(embedder):
    assert group_caption(SceneCluster(0, []), [], ToyCaptioner(embedder)) == []


def test_validation_closed_loop(embedder, world):
    rng = np.random.default_rng(4)
    scene = sample_scene(rng, "s", world)
    rendered = [render_shot(sh, i, world) for i, sh in enumerate(scene.shots)]
    shots = [r[0] for r in rendered]
    gts = [r[1] for r in rendered]
    records = group_caption(SceneCluster(0, list(range(len(shots)))), shots,
                            ToyCaptioner(embedder), ground_truth=gts)
    validate_captions(records, shots, embedder)
    assert all(r.validated for r in records), [r.diagnostics for r in records]


def test_validation_flags_wrong_color(embedder, world):
    rng = np.random.default_rng(5)
    scene = sample_scene(rng, "s", world)
    frames, gt = render_shot(scene.shots[0], 0, world)
    records = group_caption(SceneCluster(0, [0]), [frames],
                            ToyCaptioner(embedder), ground_truth=[gt])
    true_color = gt.attrs.characters[0].color
    wrong = "red" if true_color != "red" else "blue"
    records[0].caption = records[0].caption.replace(f"color={true_color}",
                                                    f"color={wrong}", 1)
    validate_captions(records, [frames], embedder)
    assert not records[0].validated
    assert any("color" in d for d in records[0].diagnostics)


def test_validation_background_only(embedder):
    from multishot.promptlang import AttributeSet, BackgroundSpec
    from multishot.toyworld import ShotSpec

    attrs = AttributeSet(background=BackgroundSpec(pattern="solid", color="red"))
    frames, _ = render_shot(ShotSpec(scene_id="s", attrs=attrs, trajectory={},
                                     n_frames=8), 0)
    records = [CaptionRecord(shot_id=0, caption="bg(pattern=solid,color=red)")]
    validate_captions(records, [frames], embedder)
    assert records[0].validated


def test_remote_captioner_round_trip():
    import httpx

    seen = {}

    def handler(request):
        payload = __import__("json").loads(request.content)
        seen.update(payload)
        return httpx.Response(200, json={"captions": [
            {"shot_id": s["shot_id"], "text": "bg(pattern=solid,color=red)"}
            for s in payload["shots"]]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    cap = RemoteCaptioner("http://caption.test/v1", client=client, backoff=0.0)
    shots = [np.zeros((8, 16, 16, 3), np.float32), np.zeros((12, 16, 16, 3), np.float32)]
    texts = cap.caption_cluster(7, shots, [3, 4])
    assert texts == ["bg(pattern=solid,color=red)"] * 2
    assert seen["cluster_id"] == 7
    assert [s["shot_id"] for s in seen["shots"]] == [3, 4]
    assert all(len(s["frames_b64"]) == 1 for s in seen["shots"])


def test_remote_captioner_unavailable_after_retries():
    import httpx

    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        raise httpx.ConnectError("refused")

    client = httpx.Client(transport=httpx.MockTransport(handler))
    cap = RemoteCaptioner("http://down.test", client=client, retries=3, backoff=0.0)
    with pytest.raises(RemoteUnavailable):
        cap.caption_cluster(0, [np.zeros((8, 16, 16, 3), np.float32)], [0])
    assert calls["n"] == 3


def test_pipeline_idempotent(embedder, corpus_video):
    video = corpus_video[0]
    cfg = CurateConfig()
    first = run_pipeline(video, embedder, cfg, fps=8)
    from multishot.curate import CutList

    shots = cut_to_shots(video, CutList(first["boundaries"]))
    second = run_pipeline(None, embedder, cfg, fps=8, precut_shots=shots)
    assert [c["shot_ids"] for c in first["clusters"]] == \
           [c["shot_ids"] for c in second["clusters"]]
    assert [s["caption"] for s in first["shots"]] == \
           [s["caption"] for s in second["shots"]]
    assert first["rejections"] == second["rejections"]


def test_detected_identities_shapes(embedder, corpus_shots):
    shots, _ = corpus_shots
    ids = detected_identities(shots[:3], embedder)
    assert set(ids) == {0, 1, 2}
    assert all(isinstance(v, set) for v in ids.values())
