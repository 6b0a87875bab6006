"""
Joint motion/video model: lockstep co-generation and inference-mode dispatch.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .aim import AIM, AudioEncoder, AudioFeatureSequence, AudioTrack, FaceMask, encode_driving_motion
from .backbone import LatentGrid, ShapeError, patchify, unpatchify
from .data import audio_track_windows, downsample, ref_latent, render_motion_frames, to_uint8, to_unit
from .flowmatch import euler_sample
from .motion import OBJECT_CLASSES, MotionSequence, parse_motion
from .pim import PIM, CommandEncoder, CommandVocab, StreamConfig, TaskConditioning
from .synthworld import vocabulary_words


class ModeError(ValueError):
    """Requested inference mode is inconsistent with the provided conditions."""


class InferenceKind(str, enum.Enum):
    T2MV = "T2MV"
    TA2V = "TA2V"
    TAM2V = "TAM2V"
    TA2MV = "TA2MV"


_REQUIRES = {
    InferenceKind.T2MV: {"text"},
    InferenceKind.TA2V: {"text", "audio"},
    InferenceKind.TAM2V: {"text", "audio", "motion"},
    InferenceKind.TA2MV: {"text", "audio"},
}


@dataclass(frozen=True)
class InferenceMode:
    mode: InferenceKind
    text: bool = True
    audio: bool = False
    motion: bool = False

    def validate(self, has_reference: bool = True) -> None:
        if not has_reference:
            raise ModeError(f"{self.mode.value} requires a reference image")
        provided = {k for k in ("text", "audio", "motion") if getattr(self, k)}
        missing = _REQUIRES[self.mode] - provided
        if missing:
            flags = ", ".join(f"--{m}" for m in sorted(missing))
            raise ModeError(f"mode {self.mode.value.lower()} requires {flags}")

    @property
    def uses_audio(self) -> bool:
        return self.mode is not InferenceKind.T2MV

    @property
    def motion_is_output(self) -> bool:
        return self.mode in (InferenceKind.T2MV, InferenceKind.TA2MV, InferenceKind.TA2V)


@dataclass
class GenerationRequest:
    reference: np.ndarray                    # (H, W, 3) uint8
    command: str
    task: str
    mode: InferenceKind | str = InferenceKind.T2MV
    audio: Optional[AudioTrack] = None
    motion: Optional[MotionSequence] = None
    face_mask: Optional[np.ndarray] = None   # (N, H, W) pixel mask; defaults to all-ones
    n_frames: int = 8
    seed: int = 0
    steps: int = 50

    def inference_mode(self) -> InferenceMode:
        return InferenceMode(InferenceKind(self.mode), text=True, audio=self.audio is not None,
                             motion=self.motion is not None)


@dataclass
class GenerationResult:
    video: np.ndarray                        # (N, H, W, 3) uint8
    motion: Optional[MotionSequence]
    motion_frames: Optional[np.ndarray]
    mode: InferenceKind
    motion_auxiliary: bool = False


@dataclass
class ModelConfig:
    video_canvas: int = 64
    motion_canvas: int = 32
    video_patch: int = 8
    motion_patch: int = 8
    frames: int = 8
    frame_range: tuple[int, int] = (8, 32)
    pim: StreamConfig = field(default_factory=StreamConfig)
    aim: StreamConfig = field(default_factory=StreamConfig)
    cond_dim: int = 64
    audio_dim: int = 32
    audio_hidden: int = 32
    audio_radius: int = 1
    audio_layers: Optional[list[int]] = None
    sample_rate: int = 16000
    fps: int = 25
    window_frames: float = 2.0

    @property
    def half_width(self) -> int:
        return int(round(self.window_frames * self.sample_rate / self.fps))

    @property
    def motion_grid(self) -> int:
        return self.motion_canvas // self.motion_patch

    @property
    def video_grid(self) -> int:
        return self.video_canvas // self.video_patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pim"] = StreamConfig(**d["pim"])
        d["aim"] = StreamConfig(**d["aim"])
        d["frame_range"] = tuple(d["frame_range"])
        return cls(**d)


def derive_seed(seed: int, name: str) -> int:
    """Named sub-seed, stable across runs and platforms."""
    key = [ord(c) for c in name]
    return int(np.random.SeedSequence([int(seed)] + key).generate_state(1)[0])


class DualStreamModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.pim.layers != cfg.aim.layers:
            raise ShapeError(f"motion stream has {cfg.pim.layers} layers, video stream {cfg.aim.layers}")
        if cfg.motion_grid > cfg.video_grid:
            raise ShapeError("motion token grid must not exceed the video token grid")
        self.cfg = cfg
        self.text = CommandEncoder(CommandVocab(vocabulary_words()), cfg.cond_dim)
        self.audio_encoder = AudioEncoder(cfg.audio_dim, cfg.audio_hidden)
        self.pim = PIM(cfg.pim, cfg.cond_dim)
        self.aim = AIM(cfg.aim, cfg.cond_dim, cfg.audio_dim, cfg.pim.dim, cfg.audio_layers, cfg.audio_radius)
        self._step = 0

    # ------------------------------------------------------------------ conditions
    def conditioning(self, commands, tasks) -> TaskConditioning:
        return self.text(commands, tasks)

    def audio_features(self, windows: torch.Tensor) -> AudioFeatureSequence:
        return AudioFeatureSequence(self.audio_encoder(windows), self.cfg.half_width)

    # ------------------------------------------------------------------ lockstep step
    def joint_denoise_step(self, z_video: LatentGrid, z_motion: Optional[LatentGrid], t, conditions: dict):
        """One co-generation evaluation: motion stream first, its residuals feed the video stream.

        ``t`` is a float or a ``(t_video, t_motion)`` pair, which must agree.
        ``conditions`` holds ``text``, ``audio``, ``face_mask``, ``ref_video``,
        ``ref_motion`` and optionally precomputed ``driving`` residuals.
        """
        if isinstance(t, (tuple, list)):
            if float(t[0]) != float(t[1]):
                raise ValueError(f"streams at different timesteps: video {t[0]}, motion {t[1]}")
            t = t[0]
        batch = z_video.data.shape[0]
        tt = torch.full((batch,), float(t), dtype=z_video.data.dtype)
        self._step += 1
        step = self._step
        v_motion = None
        driving = conditions.get("driving")
        if driving is not None:
            residuals = driving
        elif z_motion is not None:
            v_motion, residuals = self.pim(z_motion, conditions["ref_motion"], conditions["text"], tt)
            residuals.step = step
        else:
            residuals = None
        if residuals is not None and not residuals.meta.get("driving") and residuals.step != step:
            raise RuntimeError("video stream would consume a residual from another denoising step")
        v_video = self.aim(z_video, conditions["ref_video"], conditions.get("audio"), conditions.get("face_mask"),
                           residuals, tt, conditions["text"])
        return v_video, v_motion

    # ------------------------------------------------------------------ generation
    def _conditions(self, req: GenerationRequest, mode: InferenceMode) -> dict:
        cfg = self.cfg
        ref = np.asarray(req.reference, dtype=np.uint8)
        if ref.shape != (cfg.video_canvas, cfg.video_canvas, 3):
            raise ShapeError(f"reference must be {cfg.video_canvas}x{cfg.video_canvas}x3, got {ref.shape}")
        ref_t = torch.from_numpy(ref)[None]
        cond = {
            "text": self.conditioning([req.command], [req.task]),
            "ref_video": ref_latent(ref_t, cfg.video_patch),
            "ref_motion": ref_latent(torch.from_numpy(downsample(ref, cfg.motion_canvas))[None], cfg.motion_patch),
            "audio": None,
            "face_mask": None,
        }
        if mode.uses_audio:
            cond["audio"] = self.audio_features(audio_track_windows(req.audio, req.n_frames, cfg.half_width)[None])
            if req.face_mask is not None:
                cond["face_mask"] = FaceMask.from_pixels(np.asarray(req.face_mask, dtype=np.float32)[None],
                                                         cfg.video_patch)
            else:
                cond["face_mask"] = FaceMask.ones(1, req.n_frames * cfg.video_grid ** 2)
        return cond

    @torch.no_grad()
    def generate(self, req: GenerationRequest) -> GenerationResult:
        mode = req.inference_mode()
        mode.validate(req.reference is not None)
        cfg = self.cfg
        lo, hi = cfg.frame_range
        if not lo <= req.n_frames <= hi:
            raise ModeError(f"frame count {req.n_frames} outside trained range {lo}-{hi}")
        if mode.mode is InferenceKind.TAM2V and len(req.motion) != req.n_frames:
            raise ModeError(f"driving motion has {len(req.motion)} frames, request asks for {req.n_frames}")
        cond = self._conditions(req, mode)
        dtype = next(self.parameters()).dtype
        gv = torch.Generator().manual_seed(derive_seed(req.seed, "video"))
        gm = torch.Generator().manual_seed(derive_seed(req.seed, "motion"))
        n, gv_n, gm_n = req.n_frames, cfg.video_grid, cfg.motion_grid
        vdim, mdim = cfg.video_patch ** 2 * 3, cfg.motion_patch ** 2 * 3
        z_v = LatentGrid(torch.randn(1, n, gv_n, gv_n, vdim, generator=gv, dtype=dtype),
                         patchify(torch.zeros(n, cfg.video_canvas, cfg.video_canvas, 3), cfg.video_patch).positions)
        mpos = patchify(torch.zeros(n, cfg.motion_canvas, cfg.motion_canvas, 3), cfg.motion_patch).positions
        was_training = self.training
        self.eval()
        try:
            if mode.mode is InferenceKind.TAM2V:
                frames = render_motion_frames(req.motion, cfg.motion_canvas)
                clean = patchify(to_unit(frames)[None].to(dtype), cfg.motion_patch)
                cond["driving"] = encode_driving_motion(self.pim, clean, cond["ref_motion"], cond["text"])

                def field_fn(z, t, c):
                    return self.joint_denoise_step(z_v.with_data(z), None, t, c)[0].data

                video = euler_sample(field_fn, z_v.data, req.steps, cond)
                motion_frames = None
            else:
                z_m = LatentGrid(torch.randn(1, n, gm_n, gm_n, mdim, generator=gm, dtype=dtype), mpos)

                def field_fn(z, t, c):
                    vv, vm = self.joint_denoise_step(z_v.with_data(z[0]), z_m.with_data(z[1]), t, c)
                    return vv.data, vm.data

                video, motion_lat = euler_sample(field_fn, (z_v.data, z_m.data), req.steps, cond)
                motion_frames = to_uint8(unpatchify(motion_lat[0], cfg.motion_patch))
        finally:
            self.train(was_training)
        video_px = to_uint8(unpatchify(video[0], cfg.video_patch))
        motion = None
        if motion_frames is not None:
            motion = parse_motion(motion_frames, list(enumerate(OBJECT_CLASSES)), command=req.command,
                                  task=str(req.task), fps=cfg.fps)
        elif req.motion is not None:
            motion = req.motion
        return GenerationResult(video_px, motion, motion_frames, mode.mode,
                                motion_auxiliary=mode.mode is InferenceKind.TA2V)
