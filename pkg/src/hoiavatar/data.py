"""Episode records -> cached tensors -> model-ready batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .aim import AudioTrack, audio_windows
from .backbone import LatentGrid, patchify
from .motion import render_motion


def to_unit(frames) -> torch.Tensor:
    """uint8 pixels -> float32 in [-1, 1]."""
    return torch.as_tensor(np.asarray(frames)).float() / 127.5 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return ((x.detach().float().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()


def downsample(frames: np.ndarray, canvas: int) -> np.ndarray:
    """Box-filter ``(..., H, W, 3)`` uint8 frames to ``canvas x canvas``."""
    h, w = frames.shape[-3:-1]
    if h == canvas and w == canvas:
        return frames
    f = h // canvas
    if f * canvas != h or w != h:
        raise ValueError(f"cannot downsample {h}x{w} to {canvas}")
    x = frames.astype(np.float64).reshape(*frames.shape[:-3], canvas, f, canvas, f, 3).mean(axis=(-4, -2))
    return np.round(x).astype(np.uint8)


def render_motion_frames(motion, canvas: int) -> np.ndarray:
    return render_motion(motion.poses, motion.objects, (canvas, canvas))


@dataclass
class EpisodeTensors:
    """All episodes of a split pre-rendered at model resolution (uint8 where possible)."""

    ids: list[str]
    video: torch.Tensor            # (E, N, Hv, Wv, 3) uint8
    motion: torch.Tensor           # (E, N, Hm, Wm, 3) uint8
    ref_motion: torch.Tensor       # (E, Hm, Wm, 3) uint8, reference image at motion resolution
    face_mask: torch.Tensor        # (E, N, Hv, Wv) float32
    audio_windows: torch.Tensor    # (E, N, 2w) float32
    commands: list[str]
    tasks: list[str]

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence, motion_canvas: int, half_width: int) -> "EpisodeTensors":
        video = np.stack([r.video for r in records])
        motion = np.stack([render_motion_frames(r.motion, motion_canvas) for r in records])
        ref = np.stack([downsample(r.video[0], motion_canvas) for r in records])
        windows = np.stack([audio_windows(r.audio, r.spec.n_frames, half_width) for r in records])
        return cls(
            ids=[r.episode_id for r in records],
            video=torch.from_numpy(video),
            motion=torch.from_numpy(motion),
            ref_motion=torch.from_numpy(ref),
            face_mask=torch.from_numpy(np.stack([r.face_mask for r in records]).astype(np.float32)),
            audio_windows=torch.from_numpy(windows.astype(np.float32)),
            commands=[r.spec.command for r in records],
            tasks=[r.spec.task for r in records],
        )


def latent(frames_uint8: torch.Tensor, patch: int) -> LatentGrid:
    return patchify(to_unit(frames_uint8), patch)


def ref_latent(image_uint8: torch.Tensor, patch: int) -> LatentGrid:
    """Single reference image ``(B, H, W, 3)`` -> one-frame latent."""
    return patchify(to_unit(image_uint8).unsqueeze(-4), patch)


def audio_track_windows(track: AudioTrack, frames: int, half_width: int) -> torch.Tensor:
    return torch.from_numpy(audio_windows(track, frames, half_width).astype(np.float32))
