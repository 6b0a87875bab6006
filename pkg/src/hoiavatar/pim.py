"""
Motion (planning) stream: task/text conditioning, reference prepending,
environment-perception curriculum modes and the stream network itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    DiTBlock,
    FinalLayer,
    LatentGrid,
    ResidualStack,
    ShapeError,
    TimestepEmbedder,
    reference_positions,
)


class Task(str, enum.Enum):
    ACTION = "ACTION"
    HOI = "HOI"


class OutOfVocabularyError(KeyError):
    pass


class CommandVocab:
    """Closed whitespace-tokenized vocabulary; index 0 is padding."""

    def __init__(self, words: Sequence[str]):
        uniq = sorted(set(words))
        self.words = ["<pad>"] + uniq
        self.index = {w: k for k, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, command: str) -> list[int]:
        ids = []
        for w in command.lower().split():
            if w not in self.index or w == "<pad>":
                raise OutOfVocabularyError(f"word {w!r} not in command vocabulary")
            ids.append(self.index[w])
        return ids


@dataclass
class TaskConditioning:
    """Text-token embeddings with the task embedding appended as the final token.

    ``tokens`` is ``(batch, len, dim)``; ``mask`` marks real (non-padding) tokens.
    """

    tokens: torch.Tensor
    mask: torch.Tensor
    task: list[Task]

    @property
    def f_task(self) -> torch.Tensor:
        idx = self.mask.sum(1) - 1
        return self.tokens[torch.arange(len(idx)), idx]

    def pooled(self) -> torch.Tensor:
        """Mean over real tokens, ``(batch, dim)``."""
        m = self.mask.to(self.tokens.dtype).unsqueeze(-1)
        return (self.tokens * m).sum(1) / m.sum(1).clamp(min=1.0)

    def null(self) -> "TaskConditioning":
        return TaskConditioning(self.tokens[:, :0], self.mask[:, :0], self.task)


class CommandEncoder(nn.Module):
    """Learned word-embedding table standing in for a pretrained text encoder."""

    def __init__(self, vocab: CommandVocab, dim: int):
        super().__init__()
        self.vocab = vocab
        self.word = nn.Embedding(len(vocab), dim)
        self.task = nn.Embedding(len(Task), dim)
        nn.init.normal_(self.word.weight, std=1.0)
        nn.init.normal_(self.task.weight, std=1.0)

    def forward(self, commands: Sequence[str], tasks: Sequence[Task | str]) -> TaskConditioning:
        tasks = [Task(t) for t in tasks]
        ids = [self.vocab.encode(c) for c in commands]
        length = max(len(x) for x in ids) + 1
        dim = self.word.embedding_dim
        tokens = torch.zeros(len(ids), length, dim, dtype=self.word.weight.dtype)
        mask = torch.zeros(len(ids), length, dtype=torch.bool)
        task_ix = {t: k for k, t in enumerate(Task)}
        for b, (x, t) in enumerate(zip(ids, tasks)):
            if x:
                tokens[b, : len(x)] = self.word(torch.tensor(x))
            tokens[b, len(x)] = self.task(torch.tensor(task_ix[t]))
            mask[b, : len(x) + 1] = True
        return TaskConditioning(tokens, mask, tasks)


def conditioned_temb(temb: torch.Tensor, pool: nn.Module, cond: Optional[TaskConditioning]) -> torch.Tensor:
    """Timestep embedding plus the projected pooled command, which drives every adaLN modulation."""
    if cond is None or cond.tokens.shape[1] == 0:
        return temb
    return temb + pool(cond.pooled().to(temb.dtype))


def build_conditioning(command: str, task: Task | str, encoder: CommandEncoder) -> TaskConditioning:
    return encoder([command], [task])


def prepend_reference(ref_latent: LatentGrid, motion_latent: LatentGrid) -> LatentGrid:
    """Put reference tokens (virtual frame -1, offset spatial indices) in front of the clip."""
    if (ref_latent.grid_h, ref_latent.grid_w) != (motion_latent.grid_h, motion_latent.grid_w):
        raise ShapeError(
            f"reference grid {ref_latent.grid_h}x{ref_latent.grid_w} vs motion grid "
            f"{motion_latent.grid_h}x{motion_latent.grid_w}"
        )
    if ref_latent.frames != 1:
        raise ShapeError("reference latent must be a single frame")
    data = torch.cat([ref_latent.data, motion_latent.data], dim=-4)
    pos = torch.cat([reference_positions(ref_latent.grid_h, ref_latent.grid_w), motion_latent.positions])
    return LatentGrid(data, pos, n_ref_frames=1)


# =============================================================================
# Environment-perception curriculum
# =============================================================================

class Mode(str, enum.Enum):
    CONTINUATION = "CONTINUATION"
    PERCEPTION_GEN = "PERCEPTION_GEN"
    DETECTION = "DETECTION"


@dataclass(frozen=True)
class CurriculumMode:
    mode: Mode
    target_length: int

    def __post_init__(self):
        if self.mode is Mode.DETECTION and self.target_length != 1:
            raise ValueError("DETECTION mode requires target_length == 1")

    def loss_frames(self) -> np.ndarray:
        """Per-frame {0,1} loss weights over the target clip."""
        w = np.ones(self.target_length)
        if self.mode is Mode.CONTINUATION:
            w[0] = 0.0
        elif self.mode is Mode.DETECTION:
            w[1:] = 0.0
        return w


@dataclass(frozen=True)
class CurriculumConfig:
    continuation: float = 0.5
    perception_gen: float = 0.3
    detection: float = 0.2

    def probabilities(self) -> np.ndarray:
        p = np.array([self.continuation, self.perception_gen, self.detection], dtype=np.float64)
        if (p < 0).any() or not np.isfinite(p).all() or p.sum() <= 0:
            raise ValueError(f"invalid curriculum probabilities {p.tolist()}")
        return p / p.sum()


def sample_curriculum(rng: np.random.Generator, config: CurriculumConfig = CurriculumConfig(),
                      n_frames: int = 8) -> CurriculumMode:
    """Draw a training mode; detection is the single-frame case of perception-as-generation."""
    p = config.probabilities()
    u = rng.random()
    if u < p[0]:
        return CurriculumMode(Mode.CONTINUATION, n_frames)
    # P(detection | not continuation) = p[2] / (p[1] + p[2])
    if u < p[0] + p[1]:
        return CurriculumMode(Mode.PERCEPTION_GEN, n_frames)
    return CurriculumMode(Mode.DETECTION, 1)


# =============================================================================
# Stream network
# =============================================================================

@dataclass(frozen=True)
class StreamConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 4
    patch: int = 8
    mlp_mult: int = 4


class PIM(nn.Module):
    """Motion-planning DiT.  Returns the motion vector field and per-layer residuals."""

    def __init__(self, cfg: StreamConfig, cond_dim: int):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * 3
        self.embed = nn.Linear(patch_dim, cfg.dim)
        self.temb = TimestepEmbedder(cfg.dim)
        self.pool = nn.Linear(cond_dim, cfg.dim)
        self.blocks = nn.ModuleList(DiTBlock(cfg.dim, cfg.heads, cond_dim, cfg.mlp_mult) for _ in range(cfg.layers))
        self.final = FinalLayer(cfg.dim, patch_dim)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def forward(self, noised_motion: LatentGrid, ref: LatentGrid, cond: Optional[TaskConditioning],
                t: torch.Tensor, mode: Optional[CurriculumMode] = None):
        if mode is not None and noised_motion.frames != mode.target_length:
            raise ShapeError(f"{mode.mode.value} expects {mode.target_length} frames, got {noised_motion.frames}")
        seq = prepend_reference(ref, noised_motion)
        n_ref = ref.grid_h * ref.grid_w
        tokens = seq.tokens
        if tokens.dim() != 3:
            raise ShapeError("expected batched latents (batch, frames, h, w, c)")
        t = torch.as_tensor(t, dtype=tokens.dtype).reshape(-1).expand(tokens.shape[0])
        x = self.embed(tokens)
        temb = conditioned_temb(self.temb(t), self.pool, cond)
        cond_tokens = None if cond is None else cond.tokens.to(x.dtype)
        cond_mask = None if cond is None else cond.mask
        outs = []
        for blk in self.blocks:
            x = blk(x, seq.positions, temb, cond=cond_tokens, cond_mask=cond_mask)
            outs.append(x[:, n_ref:])
        pred = self.final(x[:, n_ref:], temb)
        grid = (noised_motion.frames, noised_motion.grid_h, noised_motion.grid_w)
        residuals = ResidualStack.from_outputs(outs, grid, timestep=t.detach())
        return LatentGrid.from_tokens(pred, *grid, noised_motion.positions), residuals


def pim_forward(noised_motion, ref, cond, temb_t, mode, model: PIM):
    return model(noised_motion, ref, cond, temb_t, mode)
