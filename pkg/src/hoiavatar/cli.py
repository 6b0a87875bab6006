"""
Command-line entry point.

    hoiavatar build-data --out data/
    hoiavatar train --data data/ --out runs/a --stage pim
    hoiavatar generate --checkpoint runs/a/joint_finetune.ckpt --mode t2mv --data data/ --split test --out gen/
    hoiavatar eval --data data/ --generations gen/ --out report/
    hoiavatar render-motion --motion data/test-0000/motion.json --out frames/

Exit codes: 0 success, 2 usage error, 3 runtime failure.  ``HOIAVATAR_OUTPUT_DIR``
overrides the output directory of any command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline
from .curriculum import NonFiniteLossError, StageOrderError
from .dualstream import GenerationRequest, InferenceKind, ModeError
from .metrics import MetricError
from .motion import MotionFormatError, load_motion, render_motion
from .plotting import plot_loss_curves, plot_metric_summary, save_frame_strip
from .runio import CheckpointError, ConfigError, RunConfig, load_checkpoint
from .synthworld import SceneError, load_dataset, read_wav

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("hoiavatar")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, flag: str = "--out") -> Path:
    if os.environ.get(pipeline.OUTPUT_ENV):
        return pipeline.output_dir(args.out)
    if not args.out:
        raise UsageError(f"missing output path: pass {flag} (or set {pipeline.OUTPUT_ENV})")
    return Path(args.out)


# =============================================================================
# Commands
# =============================================================================

def cmd_build_data(args) -> int:
    cfg = _config(args)
    for name in ("n_train", "n_val", "n_test"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg.world, name, v)
    out = _out(args)
    manifest = pipeline.build_data(cfg, out)
    print(f"episodes\t{len(manifest['episodes'])}\nmanifest_hash\t{manifest['hash']}\npath\t{out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        cfg.dataset = args.data
    out = _out(args)
    manifest = json.loads((Path(cfg.dataset) / "manifest.json").read_text())
    records = load_dataset(cfg.dataset, {"train"})
    data = pipeline.tensors_for(records, cfg.model)
    stages = None if args.stage == "all" else [args.stage]

    def progress(stage, step, loss):
        if step % args.log_every == 0:
            print(f"{stage}\t{step}\t{loss:.6f}", flush=True)

    reports = pipeline.train(cfg, data, out, stages, resume=args.resume, max_steps=args.max_steps,
                             on_step=progress, dataset_hash=manifest["hash"])
    cfg.save(out / "config.json")
    all_reports = [json.loads(p.read_text()) for p in sorted(out.glob("report_*.json"))]
    if all_reports:
        plot_loss_curves(all_reports, out / "loss_curves.png")
    for r in reports:
        mean = " ".join(f"{k}={v:.4f}" for k, v in r.breakdown.items())
        print(f"done\t{r.stage.value}\t{len(r.losses)}\t{r.seconds:.1f}s\t{r.checkpoint}\t{mean}")
    return EXIT_OK


def _request_from_flags(args, cfg: RunConfig) -> GenerationRequest:
    if not args.reference:
        raise UsageError("single-request generation needs --reference (or use --data/--split)")
    ref = np.asarray(Image.open(args.reference).convert("RGB"))
    if not args.command:
        raise UsageError("--command is required")
    audio = read_wav(args.audio, cfg.model.fps) if args.audio else None
    motion = load_motion(args.motion) if args.motion else None
    n = args.frames or (len(motion) if motion is not None else cfg.model.frames)
    mask = None
    if args.face_mask:
        m = np.asarray(Image.open(args.face_mask).convert("L")) > 127
        mask = m.reshape(n, ref.shape[0], ref.shape[1])
    return GenerationRequest(ref, args.command, args.task, InferenceKind(args.mode.upper()), audio, motion,
                             mask, n, args.seed or 0, args.steps)


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = pipeline.model_from_checkpoint(ckpt)
    out = _out(args)
    mode = InferenceKind(args.mode.upper())
    if args.data:
        records = load_dataset(args.data, {args.split})
        if args.limit:
            records = records[: args.limit]
        dirs = pipeline.generate_split(model, records, mode, out, seed=args.seed or 0, steps=args.steps)
        for d in dirs:
            print(f"generated\t{d}")
        strips = []
        for d in dirs[:4]:
            g = pipeline.load_generation(d)
            strips.append(g["video"])
        if strips:
            save_frame_strip(strips, out / "preview.png")
        return EXIT_OK
    req = _request_from_flags(args, cfg)
    res = model.generate(req)
    pipeline.save_generation(res, out, {"episode": None, "seed": req.seed, "steps": req.steps,
                                        "command": req.command, "task": req.task})
    rows = [res.video] + ([res.motion_frames] if res.motion_frames is not None else [])
    save_frame_strip(rows, out / "preview.png")
    print(f"generated\t{out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out(args)
    records = load_dataset(args.data)
    report = pipeline.evaluate(records, args.generations)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "report.json").write_text(report.to_json())
    plot_metric_summary(report.episodes, out / "metrics.png")
    print(report.table())
    return EXIT_OK


def cmd_render_motion(args) -> int:
    motion = load_motion(args.motion)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    frames = render_motion(motion.poses, motion.objects, (args.canvas, args.canvas))
    for k, fr in enumerate(frames):
        Image.fromarray(fr).save(out / f"motion_{k:03d}.png")
    print(f"frames\t{len(frames)}\npath\t{out}")
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hoiavatar", description="Grounded interaction avatar toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command_name", required=True)

    b = sub.add_parser("build-data", help="write the synthetic world to disk")
    b.add_argument("--out", help="dataset directory")
    b.add_argument("--config", help="run config JSON")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--n-train", type=int, default=None)
    b.add_argument("--n-val", type=int, default=None)
    b.add_argument("--n-test", type=int, default=None)
    b.set_defaults(func=cmd_build_data)

    t = sub.add_parser("train", help="run curriculum stages")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", help="dataset directory (default: config.dataset)")
    t.add_argument("--out", help="run directory (checkpoint chain lives here)")
    t.add_argument("--stage", choices=("pim", "aim", "joint", "all"), default="all")
    t.add_argument("--resume", help="unfinished checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="stop the stage early (resumable)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample video (and motion) from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--mode", required=True, choices=("t2mv", "ta2v", "tam2v", "ta2mv"))
    g.add_argument("--out", help="output directory")
    g.add_argument("--data", help="dataset directory: generate for every episode of --split")
    g.add_argument("--split", default="test")
    g.add_argument("--limit", type=int, default=None)
    g.add_argument("--reference", help="reference image (PNG)")
    g.add_argument("--command", help="text command")
    g.add_argument("--task", default="HOI", choices=("HOI", "ACTION"))
    g.add_argument("--audio", help="mono 16-bit WAV")
    g.add_argument("--motion", help="driving motion document (JSON)")
    g.add_argument("--face-mask", help="stacked per-frame face mask PNG")
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=50)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score generations against a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--generations", required=True)
    e.add_argument("--out", help="report directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-motion", help="rasterize a motion document")
    r.add_argument("--motion", required=True)
    r.add_argument("--out", help="frame directory")
    r.add_argument("--canvas", type=int, default=256)
    r.set_defaults(func=cmd_render_motion)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLossError, CheckpointError, MotionFormatError, SceneError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ModeError, StageOrderError, ConfigError, pipeline.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MetricError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
