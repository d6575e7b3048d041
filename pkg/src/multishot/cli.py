"""Command-line entry point: synth, curate, train, generate, eval, cost, serve.

Config precedence per field: flags > environment > config file > defaults.
Exit codes: 0 ok, 2 usage, 3 config, 4 input/output, 5 prompt or script,
6 runtime failure, 7 remote service failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_PROMPT = 5
EXIT_RUNTIME = 6
EXIT_REMOTE = 7


def _stamp(out_dir: str, cfg: RunConfig, seed: int | None, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    stamp = {"config_hash": cfg.config_hash(), "seed": seed,
             "version": __version__, "command": command}
    with open(os.path.join(out_dir, "stamp.json"), "w") as fh:
        json.dump(stamp, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_tiers(text: str):
    try:
        return tuple(tuple(int(x) for x in part.split(":")) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad tier table {text!r}; expected count:ratio,...") from exc


def cmd_synth(args, cfg: RunConfig) -> int:
    from .toyworld import build_corpus, concat_corpus
    from .tensorio import write_tensor

    manifest = build_corpus(args.out, args.scenes, args.seed,
                            world=cfg.world, sampler=cfg.sampler_scene)
    if args.concat:
        video, boundaries, labels = concat_corpus(manifest, args.out)
        write_tensor(os.path.join(args.out, "video.fwtn"), video)
        with open(os.path.join(args.out, "boundaries.json"), "w") as fh:
            json.dump({"boundaries": boundaries, "scene_labels": labels}, fh)
    _stamp(args.out, cfg, args.seed, "synth")
    n_shots = sum(len(s["shots"]) for s in manifest["scenes"])
    print(f"wrote {args.scenes} scenes / {n_shots} shots to {args.out}")
    return EXIT_OK


def cmd_curate(args, cfg: RunConfig) -> int:
    from .curate import RemoteCaptioner, ToyCaptioner, run_pipeline
    from .embed import Embedder
    from .tensorio import read_tensor, write_tensor
    from .toyworld import build_corpus, concat_corpus

    embedder = Embedder(cfg.embed)
    if args.synthesize:
        os.makedirs(args.input, exist_ok=True)
        manifest = build_corpus(args.input, args.scenes, args.seed,
                                world=cfg.world, sampler=cfg.sampler_scene)
        video, _, _ = concat_corpus(manifest, args.input)
        write_tensor(os.path.join(args.input, "video.fwtn"), video)

    precut = None
    video = None
    manifest_path = os.path.join(args.input, "manifest.json")
    if os.path.isfile(os.path.join(args.input, "video.fwtn")):
        video = read_tensor(os.path.join(args.input, "video.fwtn"))
    elif os.path.isfile(manifest_path):
        with open(manifest_path) as fh:
            m = json.load(fh)
        if "scenes" in m:
            precut = [read_tensor(os.path.join(args.input, shot["tensor"]))
                      for scene in m["scenes"] for shot in scene["shots"]]
        elif "shots" in m:
            precut = [read_tensor(os.path.join(args.input, shot["tensor"]))
                      for shot in m["shots"]]
        else:
            print("input manifest has neither scenes nor shots", file=sys.stderr)
            return EXIT_IO
    else:
        print(f"no video.fwtn or manifest.json under {args.input}", file=sys.stderr)
        return EXIT_IO

    captioner = None
    if args.captioner == "remote":
        if not args.remote_url:
            print("--captioner remote requires --remote-url", file=sys.stderr)
            return EXIT_USAGE
        captioner = RemoteCaptioner(args.remote_url, retries=cfg.curate.remote_retries,
                                    backoff=cfg.curate.remote_backoff)
    else:
        captioner = ToyCaptioner(embedder)

    result = run_pipeline(video, embedder, cfg.curate, captioner=captioner,
                          fps=cfg.world.fps, precut_shots=precut)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    shots_dir = os.path.join(out_dir, "shots")
    os.makedirs(shots_dir, exist_ok=True)
    if precut is None:
        from .curate import cut_to_shots, CutList
        all_shots = cut_to_shots(video, CutList(result["boundaries"]))
    else:
        all_shots = precut
    for rec in result["shots"]:
        rel = f"shots/shot{rec['shot_id']:05d}.fwtn"
        write_tensor(os.path.join(out_dir, rel), all_shots[rec["shot_id"]])
        rec["tensor"] = rel
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _stamp(out_dir, cfg, args.seed, "curate")
    n_valid = sum(1 for r in result["shots"] if r["validated"])
    print(f"curated {len(result['shots'])} shots in {len(result['clusters'])} "
          f"clusters; {n_valid} validated; {len(result['rejections'])} rejections")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .diffusion.checkpoint import load_checkpoint, save_checkpoint
    from .diffusion.model import DenoiserModel
    from .diffusion.training import CorpusView, save_loss_curve, train
    from .embed import Embedder

    tc = cfg.train
    tc.stage = args.stage
    if args.steps is not None:
        tc.steps = args.steps
    if args.batch_size is not None:
        tc.batch_size = args.batch_size
    if args.lr is not None:
        tc.lr = args.lr
    if args.p_neg is not None:
        tc.p_neg = args.p_neg
    if args.p_attr_drop is not None:
        tc.p_attr_drop = args.p_attr_drop
    if args.no_aug:
        tc.noise_aug = False
    tc.seed = args.seed

    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        if args.stage == 2:
            print("stage 2 requires --init with stage-1 parameters", file=sys.stderr)
            return EXIT_USAGE
        model = DenoiserModel(cfg.model)
    corpus = CorpusView(args.corpus, Embedder(cfg.embed))
    rng = np.random.default_rng(tc.seed)
    curve = train(model, corpus, tc, cache_cfg=cfg.cache, rng=rng,
                  checkpoint_dir=os.path.dirname(os.path.abspath(args.out)) or None,
                  log_every=args.log_every)
    save_checkpoint(args.out, model, meta={"stage": args.stage, "steps": tc.steps,
                                           "seed": tc.seed})
    if args.loss_csv:
        save_loss_curve(args.loss_csv, curve)
    _stamp(os.path.dirname(os.path.abspath(args.out)) or ".", cfg, tc.seed, "train")
    first = float(np.mean(curve[:100])) if curve else float("nan")
    last = float(np.mean(curve[-100:])) if curve else float("nan")
    print(f"stage {args.stage}: {tc.steps} steps, smoothed loss {first:.4f} -> {last:.4f}")
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    from .diffusion.checkpoint import load_checkpoint
    from .embed import Embedder
    from .engine import run_script, start_session
    from .service.app import png_bytes_to_frame

    with open(args.script) as fh:
        script = json.load(fh)
    model, _ = load_checkpoint(args.checkpoint)
    embedder = Embedder(cfg.embed)
    session = start_session(model, embedder, cfg.cache, cfg.sampler,
                            seed=args.seed, session_id=args.session_id,
                            checkpoint_id=os.path.basename(args.checkpoint))

    def load_image(path):
        with open(path, "rb") as fh:
            return png_bytes_to_frame(fh.read(), cfg.model.frame_size)

    results = run_script(session, script, load_image=load_image)
    session.save(args.out)
    _stamp(args.out, cfg, args.seed, "generate")
    digest = session.frames_digest()
    print(json.dumps({"session_id": session.session_id, "results": results,
                      "frames_digest": digest}, indent=1))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .embed import Embedder
    from .metrics import ShotEval, evaluate_corpus
    from .promptlang import parse_prompt
    from .tensorio import read_tensor

    embedder = Embedder(cfg.embed)
    scenes = []
    session_dirs = sorted(
        d for d in os.listdir(args.sessions)
        if os.path.isfile(os.path.join(args.sessions, d, "session.json")))
    if not session_dirs:
        print(f"no session directories under {args.sessions}", file=sys.stderr)
        return EXIT_IO
    cl = cfg.model.chunk_latents
    for d in session_dirs:
        with open(os.path.join(args.sessions, d, "session.json")) as fh:
            manifest = json.load(fh)
        shots = []
        for rec in manifest["shots"]:
            frames = read_tensor(os.path.join(args.sessions, d, rec["tensor"]))
            for prompt, (a, b) in ((p, r) for p, r in rec["prompts"]):
                keyframes = [frames[c * cl + cl // 2] for c in range(a, b)]
                shots.append(ShotEval(keyframes=keyframes, attrs=parse_prompt(prompt)))
        scenes.append(shots)
    report = evaluate_corpus(scenes, embedder)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_scene"},
                     indent=1))
    return EXIT_OK


def cmd_cost(args, cfg: RunConfig) -> int:
    from .cache import cost_analysis

    tiers = _parse_tiers(args.tiers) if args.tiers else cfg.cache.tier_table
    report = cost_analysis(args.latents, args.chunk, args.k, tiers)
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_serve(args, cfg: RunConfig) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(cfg, ui_dir=args.ui if args.ui and os.path.isdir(args.ui) else None)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multishot",
        description="Desk-scale multi-shot video generation with a dual-level cache")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shots", type=int, help="fixed shots per scene")
    p.add_argument("--chunks", type=int, help="fixed chunks per shot")
    p.add_argument("--concat", action="store_true",
                   help="also write the concatenated video.fwtn")

    p = sub.add_parser("curate", help="run the curation pipeline")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-cut", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--captioner", choices=["toy", "remote"], default="toy")
    p.add_argument("--remote-url", default="")
    p.add_argument("--synthesize", action="store_true")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--corpus", required=True)
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--p-neg", type=float)
    p.add_argument("--p-attr-drop", type=float)
    p.add_argument("--no-aug", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-csv")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("generate", help="replay a session script")
    p.add_argument("--script", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--session-id", default="cli-session")

    p = sub.add_parser("eval", help="evaluate saved sessions")
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cost", help="attention cost analysis")
    p.add_argument("--latents", type=int, required=True)
    p.add_argument("--chunk", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--tiers", help="tier table as count:ratio,count:ratio,...")

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    p.add_argument("--data-dir")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--ui", help="static UI directory to mount at /ui")
    return parser


def _overrides(args) -> dict:
    mapping = {
        "theta_cut": "curate.theta_cut",
        "tau": "curate.tau",
        "window": "curate.window",
        "remote_url": "curate.remote_url",
        "port": "service.port",
        "host": "service.host",
        "data_dir": "service.data_dir",
        "checkpoint_dir": "service.checkpoint_dir",
    }
    out = {}
    for attr, dotted in mapping.items():
        if getattr(args, attr, None) is not None:
            out[dotted] = getattr(args, attr)
    if getattr(args, "shots", None) is not None:
        out["sampler_scene.shots_min"] = args.shots
        out["sampler_scene.shots_max"] = args.shots
    if getattr(args, "chunks", None) is not None:
        out["sampler_scene.chunks_min"] = args.chunks
        out["sampler_scene.chunks_max"] = args.chunks
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    handlers = {
        "synth": cmd_synth,
        "curate": cmd_curate,
        "train": cmd_train,
        "generate": cmd_generate,
        "eval": cmd_eval,
        "cost": cmd_cost,
        "serve": cmd_serve,
    }
    from .curate import RemoteUnavailable
    from .promptlang import PromptSemanticError, PromptSyntaxError

    try:
        return handlers[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PromptSyntaxError, PromptSemanticError) as exc:
        print(f"prompt error: {exc}", file=sys.stderr)
        return EXIT_PROMPT
    except RemoteUnavailable as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
