"""
Rectified-flow objective and Euler sampler.

Path convention: ``z_t = (1 - t) * z0 + t * eps`` with ``t = 0`` clean and
``t = 1`` pure noise; the regression target is ``eps - z0``.  Sampling
integrates from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch


@dataclass
class FlowSample:
    z0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    zt: torch.Tensor
    target: torch.Tensor


def _expand_t(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def sample_timesteps(n: int, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Uniform timesteps on [0, 1]."""
    return torch.rand(n, generator=generator, dtype=dtype)


def make_flow_sample(z0: torch.Tensor, t, generator: Optional[torch.Generator] = None,
                     eps: Optional[torch.Tensor] = None) -> FlowSample:
    """Noise ``z0`` to timestep ``t`` (scalar, or one value per leading batch entry)."""
    t = torch.as_tensor(t, dtype=z0.dtype)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ValueError(f"timestep outside [0, 1]: {t}")
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    tt = _expand_t(t, z0)
    zt = (1 - tt) * z0 + tt * eps
    return FlowSample(z0=z0, eps=eps, t=t, zt=zt, target=eps - z0)


def reconstruct_clean(zt: torch.Tensor, target: torch.Tensor, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=zt.dtype)
    return zt - _expand_t(t, zt) * target


def fm_loss(prediction: torch.Tensor, target, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error over unmasked tokens.

    ``prediction``/``target`` have shape ``(..., tokens, channels)``; ``mask`` is
    a {0,1} array broadcastable to ``(..., tokens)``.  ``target`` may be a
    :class:`FlowSample`.
    """
    if isinstance(target, FlowSample):
        target = target.target
    if prediction.shape != target.shape:
        raise ValueError(f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    err = (prediction - target).pow(2)
    if mask is None:
        return err.mean()
    mask = torch.broadcast_to(mask.to(err.dtype), err.shape[:-1])
    total = mask.sum()
    if total == 0:
        raise ValueError("loss mask selects no tokens")
    # select rather than multiply so non-finite values on masked tokens cannot leak in
    per_token = torch.where(mask > 0, err.sum(-1) * mask, torch.zeros((), dtype=err.dtype))
    return per_token.sum() / (total * err.shape[-1])


def frame_loss_mask(batch: int, frames: int, tokens_per_frame: int, first_only: bool = False,
                    skip_first: bool = False) -> torch.Tensor:
    """Binary per-token mask for frame-ordered token sequences."""
    per_frame = torch.ones(frames)
    if first_only:
        per_frame[1:] = 0
    if skip_first:
        per_frame[0] = 0
    return per_frame.repeat_interleave(tokens_per_frame).expand(batch, -1).clone()


def euler_sample(model: Callable, z_init, steps: int = 50, cond=None,
                 guidance_scale: Optional[float] = None, null_cond=None):
    """Integrate ``dz/dt = model(z, t, cond)`` from t=1 to t=0 on a uniform grid.

    ``z_init`` may be a tensor or a tuple of tensors integrated in lockstep
    (``model`` then returns a matching tuple).  With ``guidance_scale`` set,
    the field is ``u_null + s * (u_cond - u_null)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    joint = isinstance(z_init, (tuple, list))
    z = tuple(z_init) if joint else (z_init,)
    ts = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    for k in range(steps):
        t, dt = ts[k].item(), (ts[k] - ts[k + 1]).item()
        arg = z if joint else z[0]
        u = model(arg, t, cond)
        u = tuple(u) if joint else (u,)
        if guidance_scale is not None:
            u_null = model(arg, t, null_cond)
            u_null = tuple(u_null) if joint else (u_null,)
            u = tuple(n + guidance_scale * (c - n) for c, n in zip(u, u_null))
        z = tuple(zi - dt * ui for zi, ui in zip(z, u))
    return z if joint else z[0]
