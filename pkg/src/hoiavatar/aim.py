"""
Video (rendering) stream: windowed audio features, face-masked audio
cross-attention, motion-to-video residual injection and the stream network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .backbone import (
    Attention,
    DiTBlock,
    FinalLayer,
    LatentGrid,
    ResidualStack,
    ShapeError,
    TimestepEmbedder,
    ZeroLinear,
)
from .pim import PIM, StreamConfig, TaskConditioning, conditioned_temb, prepend_reference


# =============================================================================
# Audio
# =============================================================================

@dataclass
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = 16000
    fps: int = 25

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if not np.isfinite(self.samples).all():
            raise ValueError("audio track contains non-finite samples")

    @property
    def samples_per_frame(self) -> float:
        return self.sample_rate / self.fps

    def n_frames(self) -> int:
        return int(len(self.samples) // self.samples_per_frame)


@dataclass
class AudioFeatureSequence:
    features: torch.Tensor          # (batch, frames, audio_dim)
    window_half_width: int

    @property
    def frames(self) -> int:
        return self.features.shape[-2]


class AudioTooShortError(ValueError):
    pass


def frame_centers(frames: int, sample_rate: int, fps: int) -> np.ndarray:
    """Centre sample of each video frame's audio span."""
    i = np.arange(frames)
    return np.round(i * sample_rate / fps + sample_rate / (2 * fps)).astype(np.int64)


def audio_windows(track: AudioTrack, frames: int, half_width: int) -> np.ndarray:
    """Zero-padded windows ``a[c_i - w : c_i + w]`` of shape ``(frames, 2w)``."""
    centers = frame_centers(frames, track.sample_rate, track.fps)
    a = track.samples
    if len(a) == 0 or centers[-1] - half_width >= len(a):
        raise AudioTooShortError(f"{len(a)} samples cannot cover {frames} frames at {track.fps} fps")
    padded = np.concatenate([np.zeros(half_width, np.float32), a, np.zeros(half_width, np.float32)])
    idx = centers[:, None] + np.arange(2 * half_width)[None, :]
    return padded[idx]


class AudioEncoder(nn.Module):
    """Strided-conv encoder over raw audio windows.

    Each window is split into ``n_segments`` equal sub-segments; every segment
    is encoded to a vector, the vectors are concatenated and projected.
    """

    def __init__(self, out_dim: int = 32, hidden: int = 32, n_segments: int = 4, bias: bool = True):
        super().__init__()
        self.n_segments = n_segments
        self.conv = nn.Sequential(
            nn.Conv1d(1, hidden // 2, kernel_size=10, stride=5, bias=bias),
            nn.GELU(approximate="tanh"),
            nn.Conv1d(hidden // 2, hidden, kernel_size=8, stride=4, bias=bias),
            nn.GELU(approximate="tanh"),
        )
        self.proj = nn.Linear(n_segments * hidden, out_dim, bias=bias)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """``windows``: (..., window_len) -> (..., out_dim)."""
        lead = windows.shape[:-1]
        seg = windows.reshape(-1, self.n_segments, windows.shape[-1] // self.n_segments)
        h = self.conv(seg.reshape(-1, 1, seg.shape[-1])).mean(-1)
        h = h.reshape(seg.shape[0], -1)
        return self.proj(h).reshape(*lead, -1)


def extract_audio_features(track: AudioTrack | list[AudioTrack], frames: int, encoder: nn.Module,
                           half_width: Optional[int] = None) -> AudioFeatureSequence:
    """Encode and aggregate a window around each frame's centre sample."""
    tracks = track if isinstance(track, list) else [track]
    if half_width is None:
        half_width = int(round(2 * tracks[0].samples_per_frame))
    win = np.stack([audio_windows(tr, frames, half_width) for tr in tracks])
    dtype = next(encoder.parameters()).dtype
    feats = encoder(torch.from_numpy(win).to(dtype))
    return AudioFeatureSequence(feats, half_width)


class FaceMask:
    """Per-token weights in [0, 1] over the video grid, from a pixel mask."""

    def __init__(self, weights: torch.Tensor):
        if (weights < 0).any() or (weights > 1).any():
            raise ValueError("face mask weights must lie in [0, 1]")
        self.weights = weights

    @classmethod
    def from_pixels(cls, pixel_mask, patch: int) -> "FaceMask":
        """Average a ``(..., frames, H, W)`` pixel mask over patches -> ``(..., tokens)``."""
        m = torch.as_tensor(np.asarray(pixel_mask), dtype=torch.float32)
        m = rearrange(m, "... f (gh p1) (gw p2) -> ... (f gh gw) (p1 p2)", p1=patch, p2=patch).mean(-1)
        return cls(m)

    @classmethod
    def ones(cls, batch: int, tokens: int) -> "FaceMask":
        return cls(torch.ones(batch, tokens))


class AudioCrossAttention(nn.Module):
    """Frame-aligned cross-attention from video tokens to audio features, gated by the face mask.

    A token in frame ``f`` attends to audio features ``f - radius .. f + radius``.
    """

    def __init__(self, dim: int, audio_dim: int, heads: int, radius: int = 1):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads, context_dim=audio_dim)
        self.radius = radius

    def frame_mask(self, token_frames: torch.Tensor, n_audio: int) -> torch.Tensor:
        f = token_frames.clamp(min=0)[:, None]
        a = torch.arange(n_audio)[None, :]
        return (a - f).abs() <= self.radius

    def forward(self, h: torch.Tensor, f_audio: torch.Tensor, mask: torch.Tensor,
                token_frames: torch.Tensor) -> torch.Tensor:
        attn_mask = self.frame_mask(token_frames, f_audio.shape[1])
        ca = self.attn(self.norm(h), context=f_audio.to(h.dtype), attn_mask=attn_mask)
        return h + ca * mask.to(h.dtype).unsqueeze(-1)


def audio_cross_attention(h: torch.Tensor, f_audio: AudioFeatureSequence, mask: FaceMask,
                          module: AudioCrossAttention, token_frames: torch.Tensor) -> torch.Tensor:
    n_frames = int(token_frames.max().item()) + 1
    if f_audio.frames != n_frames:
        raise ShapeError(f"{f_audio.frames} audio frames for {n_frames} video frames")
    return module(h, f_audio.features, mask.weights, token_frames)


# =============================================================================
# Motion-to-video aligner
# =============================================================================

def interp_residual(residual: torch.Tensor, motion_grid: tuple[int, int, int],
                    video_grid: tuple[int, int, int]) -> torch.Tensor:
    """Bilinear per-frame resize of ``(batch, F*hm*wm, d)`` to ``(batch, F*hv*wv, d)``."""
    fm, hm, wm = motion_grid
    fv, hv, wv = video_grid
    if fm != fv:
        raise ShapeError(f"motion has {fm} frames, video has {fv}")
    if hm > hv or wm > wv:
        raise ShapeError(f"motion grid {hm}x{wm} larger than video grid {hv}x{wv}")
    if (hm, wm) == (hv, wv):
        return residual
    b = residual.shape[0]
    x = rearrange(residual, "b (f h w) d -> (b f) d h w", f=fm, h=hm, w=wm)
    x = F.interpolate(x, size=(hv, wv), mode="bilinear", align_corners=False)
    return rearrange(x, "(b f) d h w -> b (f h w) d", b=b)


def m2v_inject(h_in: torch.Tensor, residual: torch.Tensor, proj: nn.Module, motion_grid, video_grid) -> torch.Tensor:
    """``h_in + proj(Interp(residual))`` on video tokens (``h_in`` excludes reference tokens)."""
    return h_in + proj(interp_residual(residual, motion_grid, video_grid))


# =============================================================================
# Stream network
# =============================================================================

class AIM(nn.Module):
    """Video DiT with audio cross-attention and per-layer motion residual injection."""

    def __init__(self, cfg: StreamConfig, cond_dim: int, audio_dim: int, motion_dim: int,
                 audio_layers: Optional[list[int]] = None, audio_radius: int = 1):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * 3
        self.embed = nn.Linear(patch_dim, cfg.dim)
        self.temb = TimestepEmbedder(cfg.dim)
        self.pool = nn.Linear(cond_dim, cfg.dim)
        self.blocks = nn.ModuleList(DiTBlock(cfg.dim, cfg.heads, cond_dim, cfg.mlp_mult) for _ in range(cfg.layers))
        self.audio_layers = list(range(cfg.layers)) if audio_layers is None else list(audio_layers)
        self.audio = nn.ModuleDict(
            {str(l): AudioCrossAttention(cfg.dim, audio_dim, cfg.heads, audio_radius) for l in self.audio_layers}
        )
        self.m2v = nn.ModuleList(ZeroLinear(motion_dim, cfg.dim) for _ in range(cfg.layers))
        self.final = FinalLayer(cfg.dim, patch_dim)
        self._trace = None

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def forward(self, noised_video: LatentGrid, ref: LatentGrid, audio: Optional[AudioFeatureSequence],
                mask: Optional[FaceMask], residuals: Optional[ResidualStack], t: torch.Tensor,
                text: Optional[TaskConditioning] = None) -> LatentGrid:
        seq = prepend_reference(ref, noised_video)
        n_ref = ref.grid_h * ref.grid_w
        tokens = seq.tokens
        batch = tokens.shape[0]
        video_grid = (noised_video.frames, noised_video.grid_h, noised_video.grid_w)
        if residuals is not None:
            if len(residuals) != self.n_layers:
                raise ShapeError(f"{len(residuals)} residual layers for {self.n_layers} video layers")
            if residuals.grid[0] != video_grid[0]:
                raise ShapeError(f"motion has {residuals.grid[0]} frames, video has {video_grid[0]}")
        if audio is not None and audio.frames != video_grid[0]:
            raise ShapeError(f"{audio.frames} audio frames for {video_grid[0]} video frames")
        t = torch.as_tensor(t, dtype=tokens.dtype).reshape(-1).expand(batch)
        x = self.embed(tokens)
        temb = conditioned_temb(self.temb(t), self.pool, text)
        cond = None if text is None else text.tokens.to(x.dtype)
        cond_mask = None if text is None else text.mask
        token_frames = seq.positions[:, 0]
        if audio is not None:
            weights = mask.weights if mask is not None else torch.ones(batch, tokens.shape[1] - n_ref)
            full_mask = torch.cat([torch.zeros(weights.shape[0], n_ref, dtype=weights.dtype), weights], dim=1)
        for l, blk in enumerate(self.blocks):
            if residuals is not None:
                x = torch.cat([x[:, :n_ref], m2v_inject(x[:, n_ref:], residuals.entries[l], self.m2v[l],
                                                        residuals.grid, video_grid)], dim=1)
            hook = None
            if audio is not None and str(l) in self.audio:
                hook = self._audio_hook(self.audio[str(l)], audio.features, full_mask, token_frames, l)
            x = blk(x, seq.positions, temb, cond=cond, cond_mask=cond_mask, mid_hook=hook)
        pred = self.final(x[:, n_ref:], temb)
        return LatentGrid.from_tokens(pred, *video_grid, noised_video.positions)

    def _audio_hook(self, module, feats, mask, token_frames, layer):
        def hook(h):
            out = module(h, feats, mask, token_frames)
            if self._trace is not None:
                self._trace.append((layer, h, out, mask))
            return out
        return hook

    def trace_audio(self, enabled: bool = True):
        """Record ``(layer, input, output, mask)`` for every audio injection."""
        self._trace = [] if enabled else None
        return self._trace


def aim_forward(noised_video, ref, audio, mask, residuals, temb_t, model: AIM, text=None):
    return model(noised_video, ref, audio, mask, residuals, temb_t, text)


def encode_driving_motion(pim: PIM, clean_motion: LatentGrid, ref: LatentGrid,
                          cond: Optional[TaskConditioning]) -> ResidualStack:
    """Run the motion stream as a feature encoder on a clean clip (timestep 0)."""
    if not torch.isfinite(clean_motion.data).all():
        raise ValueError("driving motion latent contains non-finite values")
    batch = clean_motion.data.shape[0]
    t0 = torch.zeros(batch, dtype=clean_motion.data.dtype)
    _, residuals = pim(clean_motion, ref, cond, t0)
    residuals.meta["driving"] = True
    return residuals
