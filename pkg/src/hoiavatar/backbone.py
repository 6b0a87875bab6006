"""
Diffusion-transformer building blocks shared by the motion and video streams.

Token layout everywhere is ``(batch, tokens, dim)`` with a companion integer
``positions`` tensor of shape ``(tokens, 3)`` holding ``(frame, h, w)``
patch indices.  Reference-frame tokens carry frame index ``-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


class ShapeError(ValueError):
    """Raised when tensor shapes or grid sizes are inconsistent."""


class NonFiniteError(ValueError):
    pass


# =============================================================================
# Latent grids and patchify
# =============================================================================

class PositionIndex(NamedTuple):
    l: int
    i: int
    j: int


@dataclass
class LatentGrid:
    """Patch-token grid.

    ``data`` has shape ``(..., frames, grid_h, grid_w, channels)``; ``positions``
    has one ``(l, i, j)`` row per token in row-major frame/h/w order.
    """

    data: torch.Tensor
    positions: torch.Tensor
    n_ref_frames: int = 0

    def __post_init__(self):
        n = self.frames * self.grid_h * self.grid_w
        if self.positions.shape != (n, 3):
            raise ShapeError(f"positions {tuple(self.positions.shape)} != ({n}, 3)")

    @property
    def frames(self) -> int:
        return self.data.shape[-4]

    @property
    def grid_h(self) -> int:
        return self.data.shape[-3]

    @property
    def grid_w(self) -> int:
        return self.data.shape[-2]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def tokens(self) -> torch.Tensor:
        return self.data.flatten(-4, -2)

    def with_data(self, data: torch.Tensor) -> "LatentGrid":
        return LatentGrid(data, self.positions, self.n_ref_frames)

    @classmethod
    def from_tokens(cls, tokens, frames, grid_h, grid_w, positions, n_ref_frames=0):
        data = tokens.unflatten(-2, (frames, grid_h, grid_w))
        return cls(data, positions, n_ref_frames)


def grid_positions(frames: int, grid_h: int, grid_w: int, first_frame: int = 0) -> torch.Tensor:
    l, i, j = torch.meshgrid(
        torch.arange(first_frame, first_frame + frames),
        torch.arange(grid_h),
        torch.arange(grid_w),
        indexing="ij",
    )
    return torch.stack([l, i, j], dim=-1).reshape(-1, 3)


def patchify(frames: torch.Tensor, patch_size: int) -> LatentGrid:
    """Lossless rearrangement of ``(..., F, H, W, 3)`` pixels into patch tokens."""
    *_, n_frames, h, w, c = frames.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"frame size {h}x{w} not divisible by patch {patch_size}")
    data = rearrange(
        frames, "... f (gh p1) (gw p2) c -> ... f gh gw (p1 p2 c)", p1=patch_size, p2=patch_size
    )
    return LatentGrid(data, grid_positions(n_frames, h // patch_size, w // patch_size))


def unpatchify(grid: LatentGrid | torch.Tensor, patch_size: int, channels: int = 3) -> torch.Tensor:
    data = grid.data if isinstance(grid, LatentGrid) else grid
    if data.shape[-1] != patch_size * patch_size * channels:
        raise ShapeError(f"channel dim {data.shape[-1]} != {patch_size}*{patch_size}*{channels}")
    return rearrange(
        data, "... f gh gw (p1 p2 c) -> ... f (gh p1) (gw p2) c", p1=patch_size, p2=patch_size, c=channels
    )


# =============================================================================
# 3D rotary position embedding
# =============================================================================

def rope_remap_reference(p: PositionIndex, grid_w: int, grid_h: int) -> PositionIndex:
    """Move a reference-frame token to the virtual frame -1, offset past the grid."""
    return PositionIndex(-1, p.i + grid_w, p.j + grid_h)


def reference_positions(grid_h: int, grid_w: int) -> torch.Tensor:
    pos = grid_positions(1, grid_h, grid_w)
    out = torch.empty_like(pos)
    out[:, 0] = -1
    out[:, 1] = pos[:, 1] + grid_w
    out[:, 2] = pos[:, 2] + grid_h
    return out


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def axis_dims(self) -> tuple[int, int, int]:
        """Rotary dims per (frame, height, width) axis; leftover pairs go to frame."""
        if self.head_dim % 2 or self.head_dim < 6:
            raise ShapeError(f"head_dim {self.head_dim} must be even and >= 6 for 3-axis RoPE")
        pairs = self.head_dim // 2
        spatial = pairs // 3
        return 2 * (pairs - 2 * spatial), 2 * spatial, 2 * spatial


def rope_angles(positions: torch.Tensor, cfg: RopeConfig, dtype=torch.float32) -> torch.Tensor:
    """Rotation angles of shape ``(tokens, head_dim // 2)``."""
    chunks = []
    for axis, d in enumerate(cfg.axis_dims()):
        inv_freq = 1.0 / cfg.base ** (torch.arange(0, d, 2, dtype=torch.float64) / d)
        chunks.append(positions[:, axis].to(torch.float64)[:, None] * inv_freq[None, :])
    return torch.cat(chunks, dim=-1).to(dtype)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """Rotate adjacent feature pairs of ``x`` (``(..., tokens, head_dim)``) by position angles."""
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"feature dim {x.shape[-1]} != head_dim {cfg.head_dim}")
    if x.shape[-2] != positions.shape[0]:
        raise ShapeError(f"{x.shape[-2]} tokens but {positions.shape[0]} positions")
    ang = rope_angles(positions, cfg, x.dtype)
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


# =============================================================================
# Layers
# =============================================================================

class ZeroLinear(nn.Linear):
    """Linear layer whose weight and bias start at exactly zero."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        nn.init.zeros_(self.weight)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


def zero_linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    return F.linear(x, weight, bias)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of t in [0, 1] followed by an MLP."""

    def __init__(self, dim: int, freq_dim: int = 64, max_period: float = 10000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.max_period = max_period
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def sinusoid(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(self.max_period) * torch.arange(half, dtype=torch.float64) / half
        ).to(t.dtype)
        args = (t * 1000.0)[:, None] * freqs[None, :]
        return torch.cat([args.cos(), args.sin()], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.sinusoid(t))


class Attention(nn.Module):
    """Multi-head attention; rotary embedding applied when positions are given."""

    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None, zero_out: bool = False,
                 rope_base: float = 10000.0):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        context_dim = context_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(context_dim, dim)
        self.v = nn.Linear(context_dim, dim)
        self.out = ZeroLinear(dim, dim) if zero_out else nn.Linear(dim, dim)
        self.rope = RopeConfig(self.head_dim, rope_base)

    def forward(self, x, context=None, positions=None, context_positions=None, attn_mask=None):
        context = x if context is None else context
        q = rearrange(self.q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.v(context), "b n (h d) -> b h n d", h=self.heads)
        if positions is not None:
            q = apply_rope(q, positions, self.rope)
            k = apply_rope(k, positions if context_positions is None else context_positions, self.rope)
        o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(rearrange(o, "b h n d -> b n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(approximate="tanh"), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class DiTBlock(nn.Module):
    """Self-attention (3D RoPE) + text cross-attention + FFN with adaLN scale/shift/gate.

    ``mid_hook`` runs between cross-attention and the FFN; the video stream
    uses it for audio injection.
    """

    def __init__(self, dim: int, heads: int, cond_dim: int, mlp_mult: int = 4):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.cross = Attention(dim, heads, context_dim=cond_dim, zero_out=True)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ffn = FeedForward(dim, mlp_mult)
        self.adaLN = nn.Sequential(nn.SiLU(), ZeroLinear(dim, 6 * dim))

    def forward(self, x, positions, temb, cond=None, cond_mask=None, mid_hook=None):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"token dim {x.shape[-1]} != block dim {self.dim}")
        if x.shape[-2] != positions.shape[0]:
            raise ShapeError(f"{x.shape[-2]} tokens but {positions.shape[0]} positions")
        if not torch.isfinite(x).all():
            raise NonFiniteError("non-finite tokens entering DiT block")
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.adaLN(temb).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a), positions=positions)
        if cond is not None and cond.shape[1] > 0:
            mask = None if cond_mask is None else cond_mask[:, None, None, :]
            x = x + self.cross(self.norm2(x), context=cond, attn_mask=mask)
        if mid_hook is not None:
            x = mid_hook(x)
        x = x + gate_f.unsqueeze(1) * self.ffn(modulate(self.norm3(x), shift_f, scale_f))
        return x


def dit_block_forward(x, cond, temb, params: DiTBlock, positions, cond_mask=None):
    return params(x, positions, temb, cond=cond, cond_mask=cond_mask)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN = nn.Sequential(nn.SiLU(), ZeroLinear(dim, 2 * dim))
        self.linear = ZeroLinear(dim, out_dim)

    def forward(self, x, temb):
        shift, scale = self.adaLN(temb).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


# =============================================================================
# Residual stack passed from the motion stream to the video stream
# =============================================================================

@dataclass
class ResidualStack:
    """Per-layer motion-stream residuals.

    ``entries[0]`` is the first block's output itself; ``entries[l]`` for
    ``l > 0`` is the difference between consecutive block outputs.  Arrays
    have shape ``(batch, motion_tokens, pim_dim)`` and cover motion tokens
    only (reference tokens are dropped).
    """

    entries: list[torch.Tensor]
    grid: tuple[int, int, int]
    timestep: Optional[torch.Tensor] = None
    step: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def final_output(self) -> torch.Tensor:
        return torch.stack(self.entries).sum(0)

    @classmethod
    def from_outputs(cls, outputs: list[torch.Tensor], grid, **kw) -> "ResidualStack":
        entries = [outputs[0]] + [outputs[l] - outputs[l - 1] for l in range(1, len(outputs))]
        return cls(entries, grid, **kw)

    @classmethod
    def zeros(cls, n_layers: int, batch: int, grid, dim: int, dtype=torch.float32) -> "ResidualStack":
        n = grid[0] * grid[1] * grid[2]
        return cls([torch.zeros(batch, n, dim, dtype=dtype) for _ in range(n_layers)], grid)
