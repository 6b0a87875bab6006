"""
Run configuration files and the self-describing checkpoint container.

Checkpoint layout::

    b"HOIACKPT" | u32 little-endian header length | JSON header | raw tensor bytes

The header lists every tensor as ``{name, dtype, shape, offset, nbytes}``;
tensor bytes are little-endian and contiguous.  ``hash`` is a sha256 over
the parameter bytes (sorted by name) and the canonical config JSON, so it
identifies the model; ``payload_sha256`` guards every stored byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .dualstream import ModelConfig
from .synthworld import WorldConfig

SCHEMA_VERSION = 1
MAGIC = b"HOIACKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# =============================================================================
# Run configuration
# =============================================================================

@dataclass
class CurriculumSettings:
    """Stage budgets, learning rates and condition-mix weights."""

    steps: tuple[int, int, int] = (2000, 1000, 800)
    lrs: tuple[float, float, float] = (1e-5, 1e-5, 2e-6)
    lr_scale: float = 1.0
    # "constant" or "cosine" (decay to zero over the stage after linear warmup)
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 4
    grad_clip: float = 1.0
    mode_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    # joint-stage recipe weights: audio-conditioned, motion-driven, joint generation, pure image-to-video
    joint_weights: tuple[float, float, float, float] = (30.0, 15.0, 60.0, 0.0)
    # audio-stage recipe weights: audio-conditioned, pure image-to-video
    audio_stage_weights: tuple[float, float] = (0.9, 0.1)
    joint_audio_prob: float = 0.5
    motion_loss_weight: float = 1.0
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    curriculum: CurriculumSettings = field(default_factory=CurriculumSettings)
    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 0
    dataset: str = "data"
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        try:
            cur = dict(d.get("curriculum", {}))
            for k in ("steps", "lrs", "mode_probs", "joint_weights", "audio_stage_weights"):
                if k in cur:
                    cur[k] = tuple(cur[k])
            world = dict(d.get("world", {}))
            if "classes" in world:
                world["classes"] = tuple(world["classes"])
            model = ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig()
            return cls(model=model, curriculum=CurriculumSettings(**cur), world=WorldConfig(**world),
                       seed=int(d.get("seed", 0)), dataset=d.get("dataset", "data"),
                       output_dir=d.get("output_dir", "runs/default"), schema_version=version)
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}") from e

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# =============================================================================
# Checkpoints
# =============================================================================

@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    config: dict
    stage: str
    step: int
    completed: list[str] = field(default_factory=list)
    optimizer: Optional[dict] = None
    rng: Optional[dict] = None
    extra: dict[str, Any] = field(default_factory=dict)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            t = self.params[name].detach().contiguous()
            h.update(name.encode())
            h.update(_to_bytes(t))
        h.update(canonical_json(self.config).encode())
        return h.hexdigest()


def _to_bytes(t: torch.Tensor) -> bytes:
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[t.dtype], copy=False)).tobytes()


def _flatten_optimizer(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for idx, st in state["state"].items():
        keys = {}
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"optim/{idx}/{k}"] = v
                keys[k] = "tensor"
            else:
                keys[k] = v
        meta["state"][str(idx)] = keys
    return tensors, meta


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    state = {}
    for idx, keys in meta["state"].items():
        state[int(idx)] = {k: tensors[f"optim/{idx}/{k}"] if v == "tensor" else v for k, v in keys.items()}
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    optim_meta = None
    if ckpt.optimizer is not None:
        opt_t, optim_meta = _flatten_optimizer(ckpt.optimizer)
        tensors.update(opt_t)
    rng_meta = None
    if ckpt.rng is not None:
        rng_meta = {k: v for k, v in ckpt.rng.items() if k != "torch"}
        if "torch" in ckpt.rng:
            tensors["rng/torch"] = ckpt.rng["torch"]
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        data = _to_bytes(t)
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    digest = ckpt.content_hash()
    header = {
        "format": "hoiavatar.checkpoint", "version": CHECKPOINT_VERSION, "stage": ckpt.stage, "step": ckpt.step,
        "completed": list(ckpt.completed), "config": ckpt.config, "optimizer": optim_meta, "rng": rng_meta,
        "extra": ckpt.extra, "tensors": entries, "hash": digest,
        "payload_sha256": hashlib.sha256(b"".join(blobs)).hexdigest(),
    }
    head = canonical_json(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return digest


def load_checkpoint(path, verify: bool = True) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start: start + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = raw[start + n:]
    if verify and "payload_sha256" in header and hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: tensor payload corrupted")
    tensors = {}
    for e in header["tensors"]:
        buf = body[e["offset"]: e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[e["dtype"]])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = _unflatten_optimizer(tensors, header["optimizer"])
    rng = None
    if header.get("rng") is not None:
        rng = dict(header["rng"])
        if "rng/torch" in tensors:
            rng["torch"] = tensors["rng/torch"]
    ckpt = Checkpoint(params, header["config"], header["stage"], header["step"], header["completed"],
                      optimizer, rng, header.get("extra", {}))
    if verify and ckpt.content_hash() != header["hash"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    return ckpt


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
