"""
End-to-end operations shared by the command line and the acceptance suite:
dataset building, staged training, split-wide generation and evaluation.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image

from .curriculum import STAGE_ORDER, Stage, StageReport, Trainer, plan_stages
from .data import EpisodeTensors
from .dualstream import DualStreamModel, GenerationRequest, GenerationResult, InferenceKind, ModelConfig, derive_seed
from .metrics import (
    UNAVAILABLE,
    MetricError,
    MetricReport,
    box_tracking_error,
    dynamic_degree,
    hand_region,
    laplacian_sharpness,
    motion_pi,
)
from .motion import load_motion, save_motion
from .runio import Checkpoint, RunConfig, file_sha256, load_checkpoint
from .synthworld import EpisodeRecord, build_dataset, load_dataset, write_dataset

log = logging.getLogger(__name__)
OUTPUT_ENV = "HOIAVATAR_OUTPUT_DIR"


def output_dir(default) -> Path:
    """Output directory, overridable through the environment."""
    return Path(os.environ.get(OUTPUT_ENV) or default)


def build_data(cfg: RunConfig, out) -> dict:
    rng = np.random.default_rng(derive_seed(cfg.seed, "world"))
    records = build_dataset(cfg.world, rng)
    return write_dataset(records, out, cfg.world, seed=cfg.seed)


def make_model(cfg: ModelConfig, seed: int) -> DualStreamModel:
    torch.manual_seed(derive_seed(seed, "init") % (2 ** 63))
    return DualStreamModel(cfg)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DualStreamModel, RunConfig]:
    cfg = RunConfig.from_dict(ckpt.config)
    model = DualStreamModel(cfg.model)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model, cfg


def tensors_for(records: list[EpisodeRecord], cfg: ModelConfig) -> EpisodeTensors:
    return EpisodeTensors.from_records(records, cfg.motion_canvas, cfg.half_width)


def latest_checkpoint(out: Path) -> Optional[Path]:
    """Finished checkpoint of the furthest completed stage in ``out``."""
    found = None
    for s in STAGE_ORDER:
        p = out / f"{s.value.lower()}.ckpt"
        if p.exists():
            found = p
    return found


def train(cfg: RunConfig, data: EpisodeTensors, out, stages=None, resume=None, max_steps: Optional[int] = None,
          on_step: Optional[Callable[[str, int, float], None]] = None, dataset_hash: Optional[str] = None
          ) -> list[StageReport]:
    """Run the requested stages, continuing the checkpoint chain found in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = make_model(cfg.model, cfg.seed)
    trainer = Trainer(model, data, cfg.curriculum, cfg.seed, config_snapshot=cfg.to_dict())
    if resume is not None:
        trainer.resume_from(load_checkpoint(resume))
    else:
        prev = latest_checkpoint(out)
        if prev is not None:
            trainer.resume_from(load_checkpoint(prev))
    plans = plan_stages(cfg.curriculum, stages)
    reports = []
    for plan in plans:
        if plan.stage in trainer.completed:
            log.info("%s already completed, skipping", plan.stage.value)
            continue
        cb = None if on_step is None else (lambda s, l, _st=plan.stage.value: on_step(_st, s, l))
        rep = trainer.run_stage(plan, out, max_steps=max_steps, on_step=cb)
        reports.append(rep)
        (out / f"losses_{plan.stage.value.lower()}.tsv").write_text(rep.loss_series_tsv())
        (out / f"report_{plan.stage.value.lower()}.json").write_text(json.dumps(rep.to_dict(), indent=1))
        if plan.stage not in trainer.completed:
            break
    write_manifest(cfg, out, dataset_hash)
    return reports


def write_manifest(cfg: RunConfig, out: Path, dataset_hash: Optional[str]) -> dict:
    ckpts = {p.name: file_sha256(p) for p in sorted(out.glob("*.ckpt"))}
    body = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "stage_budgets": list(cfg.curriculum.steps),
        "learning_rates": [p.lr for p in plan_stages(cfg.curriculum, None)] if cfg.curriculum.steps[2] else None,
        "batch_size": cfg.curriculum.batch_size,
        "ema": None,
        "dataset_hash": dataset_hash,
        "checkpoints": ckpts,
    }
    (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    return body


# =============================================================================
# Generation over a dataset split
# =============================================================================

def request_for(rec: EpisodeRecord, mode: InferenceKind | str, seed: int, steps: int) -> GenerationRequest:
    mode = mode if isinstance(mode, InferenceKind) else InferenceKind(str(mode).upper())
    use_audio = mode is not InferenceKind.T2MV
    return GenerationRequest(
        reference=rec.reference, command=rec.spec.command, task=rec.spec.task, mode=mode,
        audio=rec.audio if use_audio else None,
        motion=rec.motion if mode is InferenceKind.TAM2V else None,
        face_mask=rec.face_mask if use_audio else None,
        n_frames=rec.spec.n_frames, seed=seed, steps=steps,
    )


def save_generation(res: GenerationResult, out, meta: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(res.video):
        Image.fromarray(fr).save(out / f"frame_{k:03d}.png")
    if res.motion_frames is not None:
        for k, fr in enumerate(res.motion_frames):
            Image.fromarray(fr).save(out / f"motion_{k:03d}.png")
    if res.motion is not None:
        save_motion(res.motion, out / "motion.json")
    meta = dict(meta, mode=res.mode.value, motion_auxiliary=res.motion_auxiliary, frames=len(res.video))
    (out / "generation.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def generate_split(model: DualStreamModel, records: list[EpisodeRecord], mode, out, seed: int = 0,
                   steps: int = 50) -> list[Path]:
    dirs = []
    for rec in records:
        s = derive_seed(seed, rec.episode_id)
        res = model.generate(request_for(rec, mode, s, steps))
        dirs.append(save_generation(res, Path(out) / rec.episode_id,
                                    {"episode": rec.episode_id, "seed": s, "steps": steps}))
    return dirs


def load_generation(path) -> dict:
    path = Path(path)
    meta = json.loads((path / "generation.json").read_text())
    video = np.stack([np.asarray(Image.open(path / f"frame_{k:03d}.png").convert("RGB"))
                      for k in range(meta["frames"])])
    motion = load_motion(path / "motion.json") if (path / "motion.json").exists() else None
    return {"meta": meta, "video": video, "motion": motion}


# =============================================================================
# Evaluation
# =============================================================================

class EvalError(ValueError):
    pass


def evaluate_episode(rec: EpisodeRecord, video: np.ndarray, motion, mode: str) -> dict:
    row: dict = {}
    if rec.spec.task == "HOI" and motion is not None:
        row["pi"] = motion_pi(motion, rec.spec.command, window=rec.spec.interaction_window())
    row["dd"] = dynamic_degree(video)
    ref_motion = motion if motion is not None else rec.motion
    try:
        row["sharpness"] = laplacian_sharpness(video, hand_region(ref_motion, video.shape[1:3]))
    except MetricError:
        row["sharpness"] = UNAVAILABLE
    if mode == InferenceKind.TAM2V.value:
        row["box_err"] = box_tracking_error(video, rec.motion).error_px
    return row


def evaluate(records: list[EpisodeRecord], generations) -> MetricReport:
    gen_root = Path(generations)
    gen_ids = sorted(p.name for p in gen_root.iterdir() if (p / "generation.json").exists()) \
        if gen_root.exists() else []
    if not gen_ids:
        raise EvalError(f"no generations found under {gen_root}")
    by_id = {r.episode_id: r for r in records}
    unknown = [g for g in gen_ids if g not in by_id]
    if unknown:
        raise EvalError(f"generations without a matching dataset episode: {', '.join(unknown)}")
    report = MetricReport()
    for gid in gen_ids:
        g = load_generation(gen_root / gid)
        report.add(gid, **evaluate_episode(by_id[gid], g["video"], g["motion"], g["meta"]["mode"]))
    return report


def evaluate_ground_truth(records: list[EpisodeRecord]) -> MetricReport:
    report = MetricReport()
    for rec in records:
        report.add(rec.episode_id, **evaluate_episode(rec, rec.video, rec.motion, InferenceKind.TAM2V.value))
    return report
