"""Command-line entry points.

``lipsync`` lip-syncs one video to one audio file. ``synclip`` groups the
corpus, training and evaluation tools (``toy-corpus``, ``train-expert``,
``train``, ``benchmark``, ``evaluate``).

Exit codes: 0 success, 2 configuration error, 3 media error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigMismatch, FormatError, InputTooShort, MediaError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_MEDIA, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("synclip")


class CheckpointError(Exception):
    pass


def _int_tuple(n):
    def parse(text):
        try:
            vals = tuple(int(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        return vals
    return parse


def _load_ckpt(path, kind):
    from .checkpoint import load_checkpoint

    try:
        return load_checkpoint(path, expect_kind=kind)[0]
    except (FormatError, ConfigMismatch, OSError) as exc:
        raise CheckpointError(str(exc)) from exc


def _run(fn, args) -> int:
    try:
        fn(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MediaError as exc:
        print(f"media error: {exc}", file=sys.stderr)
        return EXIT_MEDIA
    except (ConfigMismatch, ShapeError, InputTooShort) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# --------------------------------------------------------------------------- lipsync

def lipsync_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipsync", description="Lip-sync a face video to a target audio track.")
    p.add_argument("--video", required=True, help="source video (.clip container or any transcoder-readable file)")
    p.add_argument("--audio", required=True, help="target speech; copied into the output unchanged")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--out", required=True, help="output path (.clip, or a transcoder-writable container)")
    p.add_argument("--detector", default="fixed", help="'fixed' or 'exec:PATH' (default: fixed)")
    p.add_argument("--box", type=_int_tuple(4), help="X,Y,W,H face box for the fixed detector")
    p.add_argument("--pads", type=_int_tuple(4), default=(0, 10, 0, 0), help="T,B,L,R box padding in pixels")
    p.add_argument("--no-smooth", action="store_true", help="disable 5-frame box smoothing")
    p.add_argument("--loop-video", action="store_true", help="loop the video when the audio is longer")
    return p


def _lipsync(args):
    from .inference import InferenceJob, lipsync_video

    job = InferenceJob(video_path=args.video, audio_path=args.audio, checkpoint_path=args.checkpoint,
                       output_path=args.out, detector=args.detector, box=args.box, pads=args.pads,
                       smoothing=not args.no_smooth, loop_video=args.loop_video)
    if not Path(job.checkpoint_path).exists():
        raise CheckpointError(f"{job.checkpoint_path}: no such file")
    _load_ckpt(job.checkpoint_path, "generator")
    summary = lipsync_video(job)
    print(json.dumps(summary, sort_keys=True))


def lipsync_main(argv=None) -> int:
    args = lipsync_parser().parse_args(argv)
    return _run(_lipsync, args)


# --------------------------------------------------------------------------- synclip tools

def _window(args):
    from .corpus import WindowConfig, toy_window_config

    cfg = toy_window_config() if args.toy else WindowConfig()
    return cfg.with_window(args.tv) if args.tv is not None else cfg


def _toy_corpus(args):
    from .corpus import synth_toy_corpus, write_corpus_manifest
    from .media import write_frames_container, write_wav

    cfg = _window(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lengths = tuple(args.frames) if len(args.frames) == 2 else args.frames[0]
    tracks, _, clips = synth_toy_corpus(cfg, args.n, args.seed, n_frames=lengths, return_clips=True)
    entries = []
    for clip in clips:
        tid = clip.track.source_id
        write_frames_container(out / f"{tid}.clip", clip.track.frames, cfg.fps)
        write_wav(out / f"{tid}.wav", clip.waveform, cfg.sample_rate)
        entries.append((tid, f"{tid}.clip", f"{tid}.wav"))
    write_corpus_manifest(out / "corpus.tsv", entries)
    print(out / "corpus.tsv")


def _train_expert(args):
    from .checkpoint import save_checkpoint
    from .corpus import load_corpus
    from .expert import SyncExpertConfig, toy_expert_config, train_expert

    cfg = _window(args)
    tracks, mels = load_corpus(args.corpus, cfg)
    e_cfg = toy_expert_config(cfg.Tv) if args.toy else SyncExpertConfig(Tv=cfg.Tv)
    params, hist = train_expert(tracks, mels, cfg, e_cfg, steps=args.steps, batch=args.batch, seed=args.seed,
                                callback=lambda r: r["step"] % 100 == 0 and log.info("step %d loss %.4f", r["step"], r["loss"]))
    params.freeze()
    save_checkpoint(params, None, args.out)
    print(json.dumps({"steps": args.steps, "final_loss": hist[-1]["loss"]}))


def _train(args):
    from .checkpoint import save_checkpoint
    from .corpus import load_corpus
    from .gan import QualityDiscConfig, TrainConfig, toy_disc_config, train_wav2lip
    from .generator import GeneratorConfig, toy_generator_config

    expert = _load_ckpt(args.expert, "sync_expert").freeze()
    from .expert import expert_configs
    _, window = expert_configs(expert)
    tracks, mels = load_corpus(args.corpus, window)
    gen_cfg = toy_generator_config(window) if args.toy else GeneratorConfig(H=window.H, W=window.W, Tv=window.Tv)
    disc_cfg = toy_disc_config() if args.toy else QualityDiscConfig()
    tcfg = TrainConfig(s_w=args.s_w, s_g=args.s_g, batch=args.batch, lr=args.lr, steps=args.steps, seed=args.seed,
                       grad_clip=args.grad_clip)
    gen, _, hist = train_wav2lip(tracks, mels, expert, gen_cfg, disc_cfg, tcfg, window,
                                 run_dir=args.run_dir, checkpoint_every=args.checkpoint_every)
    save_checkpoint(gen, None, args.out)
    print(json.dumps({"steps": args.steps, "final_l_total": hist[-1]["l_total"]}))


def _benchmark(args):
    from .evaluation import build_benchmark, corpus_durations, write_benchmark_manifest

    pairs = build_benchmark(corpus_durations(args.corpus), args.seed, args.n)
    write_benchmark_manifest(pairs, args.out)
    print(args.out)


def _evaluate(args):
    from .corpus import load_corpus
    from .evaluation import evaluate_benchmark, read_benchmark_manifest, write_lse_reports
    from .expert import expert_configs

    gen = _load_ckpt(args.generator, "generator")
    scorer = _load_ckpt(args.scorer, "sync_expert")
    _, window = expert_configs(scorer)
    tracks, mels = load_corpus(args.corpus, window)
    reports = evaluate_benchmark(gen, scorer, read_benchmark_manifest(args.benchmark), tracks, mels,
                                 max_offset=args.max_offset)
    write_lse_reports(reports, args.out)
    print(args.out)


def synclip_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synclip", description="Corpus, training and evaluation tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, window=True):
        if window:
            sp.add_argument("--toy", action="store_true", help="use the small toy window/network sizes")
            sp.add_argument("--tv", type=int, choices=(1, 3, 5), help="frames per expert window")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("toy-corpus", help="write a procedural toy corpus and its manifest")
    common(sp)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--frames", type=int, nargs="+", default=[75], help="clip length, or LO HI range")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_toy_corpus)

    sp = sub.add_parser("train-expert", help="train a sync expert and save a frozen checkpoint")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_train_expert)

    sp = sub.add_parser("train", help="train the generator against a frozen expert")
    common(sp, window=False)
    sp.add_argument("--toy", action="store_true")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--expert", required=True)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--batch", type=int, default=80)
    sp.add_argument("--s-w", dest="s_w", type=float, default=0.03)
    sp.add_argument("--s-g", dest="s_g", type=float, default=0.07)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--grad-clip", dest="grad_clip", type=float, help="max generator gradient norm")
    sp.add_argument("--run-dir")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_train)

    sp = sub.add_parser("benchmark", help="build a benchmark pair manifest from a corpus")
    common(sp, window=False)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_benchmark)

    sp = sub.add_parser("evaluate", help="LSE-D / LSE-C of a generator on a benchmark")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--max-offset", type=int, default=15)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_evaluate)
    return p


def main(argv=None) -> int:
    args = synclip_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return _run(args.fn, args)


if __name__ == "__main__":
    sys.exit(main())
