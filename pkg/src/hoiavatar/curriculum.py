"""
Three-stage training: motion-stream pretraining, audio-driven video
pretraining, then joint finetuning over a mix of condition recipes.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .aim import FaceMask, encode_driving_motion
from .backbone import LatentGrid
from .data import EpisodeTensors, latent, ref_latent
from .dualstream import DualStreamModel, derive_seed
from .flowmatch import fm_loss, frame_loss_mask, make_flow_sample, sample_timesteps
from .pim import CurriculumConfig, Mode, sample_curriculum
from .runio import Checkpoint, CurriculumSettings, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    PIM_PRETRAIN = "PIM_PRETRAIN"
    AIM_AUDIO_PRETRAIN = "AIM_AUDIO_PRETRAIN"
    JOINT_FINETUNE = "JOINT_FINETUNE"


STAGE_ORDER = (Stage.PIM_PRETRAIN, Stage.AIM_AUDIO_PRETRAIN, Stage.JOINT_FINETUNE)
STAGE_ALIASES = {"pim": Stage.PIM_PRETRAIN, "aim": Stage.AIM_AUDIO_PRETRAIN, "joint": Stage.JOINT_FINETUNE}


class RecipeKind(str, enum.Enum):
    AUDIO_COND = "AUDIO_COND"
    MOTION_DRIVEN = "MOTION_DRIVEN"
    JOINT_GEN = "JOINT_GEN"
    PURE_I2V = "PURE_I2V"


class StageOrderError(RuntimeError):
    """Training requested out of curriculum order."""


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: Stage
    steps: int
    lr: float
    weights: tuple[tuple[RecipeKind, float], ...] = ()

    def __post_init__(self):
        if self.steps < 0 or not self.lr > 0:
            raise ValueError(f"invalid plan for {self.stage.value}: steps={self.steps}, lr={self.lr}")
        if self.weights:
            w = np.array([v for _, v in self.weights], dtype=np.float64)
            if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
                raise ValueError(f"invalid recipe weights {self.weights}")
            norm = tuple((k, float(v / w.sum())) for (k, _), v in zip(self.weights, w) if v > 0)
            object.__setattr__(self, "weights", norm)

    def probabilities(self) -> dict[RecipeKind, float]:
        return dict(self.weights)


def plan_stages(settings: CurriculumSettings = CurriculumSettings(),
                stages: Optional[Sequence[Stage | str]] = None) -> list[StagePlan]:
    """Stage plans in curriculum order.  A zero joint budget yields a two-stage plan."""
    if stages is not None:
        order = [Stage(s) if not isinstance(s, str) or s not in STAGE_ALIASES else STAGE_ALIASES[s] for s in stages]
        idx = [STAGE_ORDER.index(s) for s in order]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise StageOrderError(f"stages must follow {[s.value for s in STAGE_ORDER]}, got {[s.value for s in order]}")
    else:
        order = list(STAGE_ORDER)
    aw = settings.audio_stage_weights
    jw = settings.joint_weights
    weights = {
        Stage.PIM_PRETRAIN: (),
        Stage.AIM_AUDIO_PRETRAIN: ((RecipeKind.AUDIO_COND, aw[0]), (RecipeKind.PURE_I2V, aw[1])),
        Stage.JOINT_FINETUNE: ((RecipeKind.AUDIO_COND, jw[0]), (RecipeKind.MOTION_DRIVEN, jw[1]),
                               (RecipeKind.JOINT_GEN, jw[2]), (RecipeKind.PURE_I2V, jw[3])),
    }
    plans = []
    for s in order:
        k = STAGE_ORDER.index(s)
        steps = int(settings.steps[k])
        if s is Stage.JOINT_FINETUNE and steps == 0:
            warnings.warn("joint finetuning budget is zero; running a two-stage plan", UserWarning, stacklevel=2)
            continue
        plans.append(StagePlan(s, steps, settings.lrs[k] * settings.lr_scale, weights[s]))
    return plans


@dataclass(frozen=True)
class BatchRecipe:
    kind: RecipeKind
    audio: bool
    motion: str            # "none" | "clean" (encoded at t=0) | "noised"
    video_loss: bool = True
    motion_loss: bool = False


def sample_batch_recipe(rng: np.random.Generator, plan: StagePlan, joint_audio_prob: float = 0.5) -> BatchRecipe:
    if not plan.weights:
        raise ValueError(f"{plan.stage.value} does not mix condition recipes")
    kinds = [k for k, _ in plan.weights]
    p = np.array([w for _, w in plan.weights])
    kind = kinds[int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right").clip(max=len(p) - 1))]
    if kind is RecipeKind.AUDIO_COND:
        return BatchRecipe(kind, audio=True, motion="none")
    if kind is RecipeKind.MOTION_DRIVEN:
        return BatchRecipe(kind, audio=True, motion="clean")
    if kind is RecipeKind.JOINT_GEN:
        return BatchRecipe(kind, audio=bool(rng.random() < joint_audio_prob), motion="noised", motion_loss=True)
    return BatchRecipe(kind, audio=False, motion="none")


# =============================================================================
# Training loop
# =============================================================================

@dataclass
class StageReport:
    stage: Stage
    steps: int
    losses: list[float] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    breakdown: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "steps": self.steps, "losses": self.losses, "kinds": self.kinds,
                "breakdown": self.breakdown, "seconds": self.seconds, "checkpoint": self.checkpoint}

    def loss_series_tsv(self) -> str:
        rows = ["step\tkind\tloss"] + [f"{k}\t{m}\t{v:.8f}" for k, (m, v) in enumerate(zip(self.kinds, self.losses))]
        return "\n".join(rows) + "\n"


def lr_factor(settings: CurriculumSettings, step: int, total: int) -> float:
    """Multiplier on the stage learning rate at ``step`` (0-based)."""
    if settings.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {settings.lr_schedule!r}")
    warm = settings.warmup_steps
    if warm and step < warm:
        return (step + 1) / warm
    if settings.lr_schedule == "constant" or total <= warm:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def stage_parameters(model: DualStreamModel, stage: Stage) -> list[torch.nn.Parameter]:
    if stage is Stage.PIM_PRETRAIN:
        mods = [model.text, model.pim]
    elif stage is Stage.AIM_AUDIO_PRETRAIN:
        mods = [model.audio_encoder, model.aim]
    else:
        mods = [model]
    return [p for m in mods for p in m.parameters()]


class Trainer:
    """Runs stage plans on a model, keeping the checkpoint chain and all RNG state."""

    def __init__(self, model: DualStreamModel, data: EpisodeTensors, settings: CurriculumSettings,
                 seed: int = 0, completed: Sequence[str] = (), config_snapshot: Optional[dict] = None):
        self.model = model
        self.data = data
        self.settings = settings
        self.seed = seed
        self.completed = [Stage(s) for s in completed]
        self.config_snapshot = config_snapshot or {}
        self.curriculum = CurriculumConfig(*settings.mode_probs)
        self._resume: Optional[Checkpoint] = None

    # ------------------------------------------------------------------ chain
    def check_chain(self, stage: Stage) -> None:
        need = STAGE_ORDER[: STAGE_ORDER.index(stage)]
        missing = [s.value for s in need if s not in self.completed]
        if missing:
            raise StageOrderError(f"{stage.value} requires completed stages {missing}; "
                                  f"train them first (checkpoint chain has {[s.value for s in self.completed]})")

    # ------------------------------------------------------------------ batches
    def _conditions(self, idx: np.ndarray):
        m = self.model
        d = self.data
        cfg = m.cfg
        cond = m.conditioning([d.commands[i] for i in idx], [d.tasks[i] for i in idx])
        ix = torch.from_numpy(idx)
        ref_v = ref_latent(d.video[ix, 0], cfg.video_patch)
        ref_m = ref_latent(d.ref_motion[ix], cfg.motion_patch)
        return cond, ref_v, ref_m

    def _pim_loss(self, idx, rng, tgen):
        cfg = self.model.cfg
        mode = sample_curriculum(rng, self.curriculum, self.data.motion.shape[1])
        cond, _, ref_m = self._conditions(idx)
        z0 = latent(self.data.motion[torch.from_numpy(idx)], cfg.motion_patch)
        if mode.mode is Mode.DETECTION:
            z0 = LatentGrid(z0.data[:, :1], z0.positions[: z0.grid_h * z0.grid_w])
        t = sample_timesteps(len(idx), tgen)
        fs = make_flow_sample(z0.data, t, tgen)
        zt = fs.zt.clone()
        if mode.mode is Mode.CONTINUATION:
            zt[:, 0] = z0.data[:, 0]
        pred, _ = self.model.pim(z0.with_data(zt), ref_m, cond, t, mode)
        mask = frame_loss_mask(len(idx), z0.frames, z0.grid_h * z0.grid_w,
                               first_only=mode.mode is Mode.DETECTION, skip_first=mode.mode is Mode.CONTINUATION)
        return fm_loss(pred.tokens, fs.target.flatten(1, 3), mask), mode.mode.value

    def _video_loss(self, idx, recipe: BatchRecipe, rng, tgen):
        m = self.model
        cfg = m.cfg
        ix = torch.from_numpy(idx)
        cond, ref_v, ref_m = self._conditions(idx)
        z0v = latent(self.data.video[ix], cfg.video_patch)
        t = sample_timesteps(len(idx), tgen)
        fv = make_flow_sample(z0v.data, t, tgen)
        audio = mask = None
        if recipe.audio:
            audio = m.audio_features(self.data.audio_windows[ix])
            mask = FaceMask.from_pixels(self.data.face_mask[ix], cfg.video_patch)
        residuals = None
        motion_term = None
        if recipe.motion != "none":
            z0m = latent(self.data.motion[ix], cfg.motion_patch)
            if recipe.motion == "clean":
                residuals = encode_driving_motion(m.pim, z0m, ref_m, cond)
                if not bool((residuals.timestep == 0).all()):
                    raise AssertionError("driving motion must be encoded at t=0")
            else:
                fm = make_flow_sample(z0m.data, t, tgen)
                pred_m, residuals = m.pim(z0m.with_data(fm.zt), ref_m, cond, t)
                motion_term = fm_loss(pred_m.tokens, fm.target.flatten(1, 3))
        pred_v = m.aim(z0v.with_data(fv.zt), ref_v, audio, mask, residuals, t, cond)
        loss = fm_loss(pred_v.tokens, fv.target.flatten(1, 3))
        if motion_term is not None:
            loss = loss + self.settings.motion_loss_weight * motion_term
        return loss, recipe.kind.value

    def batch_loss(self, stage: Stage, plan: StagePlan, rng: np.random.Generator, tgen: torch.Generator):
        idx = rng.integers(0, len(self.data), size=self.settings.batch_size)
        if stage is Stage.PIM_PRETRAIN:
            return self._pim_loss(idx, rng, tgen)
        recipe = sample_batch_recipe(rng, plan, self.settings.joint_audio_prob)
        return self._video_loss(idx, recipe, rng, tgen)

    # ------------------------------------------------------------------ state
    def _fresh_state(self, plan: StagePlan):
        rng = np.random.default_rng(derive_seed(self.seed, plan.stage.value))
        tgen = torch.Generator().manual_seed(derive_seed(self.seed, plan.stage.value + "/torch"))
        return rng, tgen

    def checkpoint(self, plan: StagePlan, step: int, opt, rng, tgen, finished: bool) -> Checkpoint:
        completed = [s.value for s in self.completed]
        params = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return Checkpoint(params, self.config_snapshot, plan.stage.value, step, completed,
                          optimizer=None if finished else opt.state_dict(),
                          rng=None if finished else {"numpy": rng.bit_generator.state, "torch": tgen.get_state()},
                          extra={"finished": finished, "plan_steps": plan.steps, "lr": plan.lr})

    def resume_from(self, ckpt: Checkpoint) -> None:
        """Load a checkpoint; an unfinished one continues its stage on the next run_stage call."""
        self.model.load_state_dict(ckpt.params)
        self.completed = [Stage(s) for s in ckpt.completed]
        self._resume = None if ckpt.extra.get("finished", True) else ckpt

    # ------------------------------------------------------------------ run
    def run_stage(self, plan: StagePlan, out_dir=None, max_steps: Optional[int] = None,
                  on_step: Optional[Callable[[int, float], None]] = None) -> StageReport:
        """Train one stage.  ``max_steps`` stops early and leaves a resumable checkpoint."""
        self.check_chain(plan.stage)
        if plan.stage in self.completed:
            raise StageOrderError(f"{plan.stage.value} already completed in this checkpoint chain")
        params = stage_parameters(self.model, plan.stage)
        opt = torch.optim.Adam(params, lr=plan.lr, weight_decay=0.0)
        rng, tgen = self._fresh_state(plan)
        start = 0
        report = StageReport(plan.stage, plan.steps)
        if self._resume is not None:
            ck = self._resume
            if ck.stage != plan.stage.value:
                raise StageOrderError(f"resume checkpoint is mid-{ck.stage}, not {plan.stage.value}")
            opt.load_state_dict(ck.optimizer)
            rng.bit_generator.state = ck.rng["numpy"]
            tgen.set_state(ck.rng["torch"])
            start = ck.step
            report.losses = list(ck.extra.get("losses", []))
            report.kinds = list(ck.extra.get("kinds", []))
            self._resume = None
        stop = plan.steps if max_steps is None else min(plan.steps, max_steps)
        self.model.train()
        t0 = time.perf_counter()
        every = self.settings.checkpoint_every
        out = Path(out_dir) if out_dir is not None else None
        for step in range(start, stop):
            opt.zero_grad(set_to_none=True)
            for group in opt.param_groups:
                group["lr"] = plan.lr * lr_factor(self.settings, step, plan.steps)
            loss, kind = self.batch_loss(plan.stage, plan, rng, tgen)
            if not torch.isfinite(loss):
                self._dump_nonfinite(out, plan, step, kind, loss)
                raise NonFiniteLossError(f"non-finite loss {loss.item()} at {plan.stage.value} step {step} ({kind})")
            loss.backward()
            if self.settings.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, self.settings.grad_clip)
            opt.step()
            report.losses.append(float(loss.item()))
            report.kinds.append(kind)
            if on_step is not None:
                on_step(step, report.losses[-1])
            if out is not None and every and (step + 1) % every == 0 and step + 1 < plan.steps:
                self._save(out, plan, step + 1, opt, rng, tgen, report, finished=False)
        report.seconds = time.perf_counter() - t0
        report.breakdown = _breakdown(report)
        finished = stop >= plan.steps
        if finished:
            self.completed.append(plan.stage)
        if out is not None:
            report.checkpoint = str(self._save(out, plan, stop, opt, rng, tgen, report, finished))
        return report

    def _save(self, out: Path, plan, step, opt, rng, tgen, report, finished: bool) -> Path:
        ck = self.checkpoint(plan, step, opt, rng, tgen, finished)
        if not finished:
            ck.extra["losses"] = report.losses
            ck.extra["kinds"] = report.kinds
        name = f"{plan.stage.value.lower()}.ckpt" if finished else f"{plan.stage.value.lower()}-step{step:06d}.ckpt"
        path = out / name
        save_checkpoint(ck, path)
        return path

    def _dump_nonfinite(self, out, plan, step, kind, loss) -> None:
        bad = [n for n, p in self.model.named_parameters() if not torch.isfinite(p).all()]
        diag = {"stage": plan.stage.value, "step": step, "recipe": kind, "loss": repr(loss.item()),
                "nonfinite_parameters": bad}
        log.error("non-finite loss: %s", diag)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "nonfinite_dump.json").write_text(json.dumps(diag, indent=1))


def _breakdown(report: StageReport) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for k, v in zip(report.kinds, report.losses):
        by.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(by.items())}


def run_stage(plan: StagePlan, dataset: EpisodeTensors, model: DualStreamModel, rng_seed: int,
              settings: CurriculumSettings = CurriculumSettings(), completed: Sequence[str] = (),
              out_dir=None) -> StageReport:
    return Trainer(model, dataset, settings, rng_seed, completed).run_stage(plan, out_dir)


def load_chain(path, model: DualStreamModel, data: EpisodeTensors, settings: CurriculumSettings,
               seed: int) -> Trainer:
    trainer = Trainer(model, data, settings, seed)
    trainer.resume_from(load_checkpoint(path))
    return trainer
