"""
Procedural grounded-interaction world: a 2D stick-figure actor, 1-3 objects,
a closed command vocabulary, scripted ground-truth motion, rendered video,
head masks and pseudo-speech audio.
"""

from __future__ import annotations

import hashlib
import io
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .aim import AudioTrack
from .motion import (
    CLASS_COLORS,
    JOINT,
    K,
    LIMBS,
    OBJECT_CLASSES,
    MotionSequence,
    save_motion,
    load_motion,
)

ACTIONS = {
    "wave": "wave",
    "raise both hands": "raise",
    "clap your hands": "clap",
    "squat down": "squat",
    "nod your head": "nod",
    "stretch your arms": "stretch",
    "kick your leg": "kick",
    "bow": "bow",
}
HOI_VERBS = ("pick up the", "lift the", "touch the", "push the", "tap the", "grab the")
TEMPLATES = tuple(ACTIONS) + HOI_VERBS

# rest-pose offsets from the hip centre, normalized canvas units (y down)
REST_POSE = np.array([
    (0.00, -0.36),                   # nose
    (-0.08, -0.26), (0.08, -0.26),   # shoulders
    (-0.11, -0.15), (0.11, -0.15),   # elbows
    (-0.12, -0.04), (0.12, -0.04),   # wrists
    (-0.05, 0.00), (0.05, 0.00),     # hips
    (-0.06, 0.15), (0.06, 0.15),     # knees
    (-0.06, 0.30), (0.06, 0.30),     # ankles
])
UPPER_ARM = FOREARM = 0.13
HEAD_RADIUS = 0.07
ROOT_Y = 0.62

VIDEO_BACKGROUND = (24, 24, 32)
SKIN = (170, 135, 115)
SHIRT = (40, 70, 160)
PANTS = (55, 55, 75)
MOUTH = (60, 10, 20)
EYE = (20, 20, 20)
_TORSO = {(1, 2), (1, 7), (2, 8), (7, 8)}
_ARMS = {(1, 3), (3, 5), (2, 4), (4, 6)}
_NECK = {(0, 1), (0, 2)}

DATASET_FORMAT = "hoiavatar.dataset"


class SceneError(ValueError):
    pass


def vocabulary_words() -> list[str]:
    words = set()
    for t in TEMPLATES:
        words.update(t.split())
    words.update(OBJECT_CLASSES)
    return sorted(words)


# =============================================================================
# Scene description
# =============================================================================

@dataclass
class SceneObject:
    id: int
    cls: str
    center: tuple[float, float]
    size: tuple[float, float]

    @property
    def box(self) -> np.ndarray:
        cx, cy = self.center
        w, h = self.size
        return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


@dataclass
class SceneSpec:
    root: tuple[float, float]
    objects: list[SceneObject]
    template: str
    target_id: Optional[int] = None
    n_frames: int = 8
    canvas: tuple[int, int] = (64, 64)
    fps: int = 25
    sample_rate: int = 16000
    envelope: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise SceneError(f"scene needs 1-3 objects, got {len(self.objects)}")
        if len({o.cls for o in self.objects}) != len(self.objects):
            raise SceneError("object classes within a scene must be distinct")
        if self.template not in TEMPLATES:
            raise SceneError(f"unknown command template {self.template!r}")
        if self.task == "HOI" and self.target is None:
            raise SceneError(f"command {self.command!r} references an object absent from the scene")
        if not self.envelope:
            self.envelope = [0.0] * self.n_frames
        if len(self.envelope) != self.n_frames:
            raise SceneError("envelope length must equal n_frames")

    @property
    def task(self) -> str:
        return "HOI" if self.template in HOI_VERBS else "ACTION"

    @property
    def target(self) -> Optional[SceneObject]:
        for o in self.objects:
            if o.id == self.target_id:
                return o
        return None

    @property
    def command(self) -> str:
        if self.task == "HOI":
            tgt = self.target
            return f"{self.template} {tgt.cls if tgt else '?'}"
        return self.template

    @property
    def combo(self) -> tuple[str, str]:
        """(template, class) key used for disjoint dataset splits."""
        anchor = self.target if self.task == "HOI" else self.objects[0]
        return self.template, anchor.cls

    def reach_frames(self) -> int:
        return max(1, int(round(3 * self.n_frames / 8)))

    def interaction_window(self) -> tuple[int, int]:
        if self.task != "HOI":
            return 0, self.n_frames
        return min(self.reach_frames(), self.n_frames - 1), self.n_frames

    def to_dict(self) -> dict:
        d = asdict(self)
        d["command"] = self.command
        d["task"] = self.task
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = [SceneObject(o["id"], o["cls"], tuple(o["center"]), tuple(o["size"])) for o in d["objects"]]
        return cls(tuple(d["root"]), objs, d["template"], d.get("target_id"), d["n_frames"],
                   tuple(d["canvas"]), d["fps"], d["sample_rate"], list(d["envelope"]))


# =============================================================================
# Kinematic scripts
# =============================================================================

def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _elbow(shoulder, wrist, outward: float):
    """Two-link IK: elbow position bent away from the body (``outward`` = +-1)."""
    d = wrist - shoulder
    dist = float(np.hypot(*d))
    if dist < 1e-9:
        return shoulder + np.array([outward * UPPER_ARM, 0.0])
    reach = UPPER_ARM + FOREARM
    if dist >= reach:
        return shoulder + d * (UPPER_ARM / dist)
    a = (UPPER_ARM ** 2 - FOREARM ** 2 + dist ** 2) / (2 * dist)
    h = np.sqrt(max(UPPER_ARM ** 2 - a ** 2, 0.0))
    base = shoulder + d * (a / dist)
    perp = np.array([-d[1], d[0]]) / dist
    # choose the bend that points outward / downward
    cand = [base + h * perp, base - h * perp]
    return max(cand, key=lambda p: outward * (p[0] - shoulder[0]) + 0.5 * (p[1] - shoulder[1]))


def rest_pose(root) -> np.ndarray:
    return np.asarray(root, dtype=np.float64)[None, :] + REST_POSE


def _set_arm(pose, side: str, wrist):
    s, e, w = (JOINT[f"{side}_shoulder"], JOINT[f"{side}_elbow"], JOINT[f"{side}_wrist"])
    outward = -1.0 if side == "l" else 1.0
    pose[w] = wrist
    pose[e] = _elbow(pose[s], np.asarray(wrist, dtype=np.float64), outward)


def _action_pose(kind: str, root, phase: float, k: int) -> np.ndarray:
    """Pose for ACTION families at clip phase in [0, 1] and frame index k."""
    pose = rest_pose(root)
    ls, rs = pose[JOINT["l_shoulder"]].copy(), pose[JOINT["r_shoulder"]].copy()
    ramp = _smoothstep(phase * 2.5)
    osc = np.sin(np.pi * k / 2)
    if kind == "wave":
        wrist = rs + np.array([0.06 + 0.05 * osc * ramp, -0.18 * ramp])
        _set_arm(pose, "r", pose[JOINT["r_wrist"]] + (wrist - pose[JOINT["r_wrist"]]) * ramp)
    elif kind == "raise":
        for side, sh, dx in (("l", ls, -0.05), ("r", rs, 0.05)):
            rest = pose[JOINT[f"{side}_wrist"]].copy()
            _set_arm(pose, side, rest + (sh + np.array([dx, -0.22]) - rest) * ramp)
    elif kind == "clap":
        mid = 0.5 * (ls + rs) + np.array([0.0, 0.06])
        gap = 0.015 + 0.03 * (1 + osc) / 2
        for side, sgn in (("l", -1), ("r", 1)):
            rest = pose[JOINT[f"{side}_wrist"]].copy()
            _set_arm(pose, side, rest + (mid + np.array([sgn * gap, 0.0]) - rest) * ramp)
    elif kind == "squat":
        drop = 0.08 * np.sin(np.pi * phase)
        pose[:K - 4] += np.array([0.0, drop])
        pose[JOINT["l_knee"]] += np.array([-0.04 * drop / 0.08, drop / 2])
        pose[JOINT["r_knee"]] += np.array([0.04 * drop / 0.08, drop / 2])
    elif kind == "nod":
        pose[JOINT["nose"]] += np.array([0.0, 0.025 * (1 + osc) / 2 * ramp])
    elif kind == "stretch":
        for side, sh, sgn in (("l", ls, -1), ("r", rs, 1)):
            rest = pose[JOINT[f"{side}_wrist"]].copy()
            _set_arm(pose, side, rest + (sh + np.array([sgn * 0.24, 0.0]) - rest) * ramp)
    elif kind == "kick":
        lift = ramp * np.sin(np.pi * phase)
        pose[JOINT["r_knee"]] += np.array([0.05, -0.06]) * lift
        pose[JOINT["r_ankle"]] += np.array([0.12, -0.10]) * lift
    elif kind == "bow":
        dip = 0.06 * np.sin(np.pi * phase)
        for j in ("nose", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist"):
            pose[JOINT[j]] += np.array([0.0, dip])
    else:
        raise SceneError(f"unknown action {kind!r}")
    return pose


_MANIPULATION = {
    "pick up the": np.array([0.0, -0.10]),
    "lift the": np.array([0.0, -0.14]),
    "push the": np.array([0.07, 0.0]),       # x sign flipped to point away from the actor
    "grab the": np.array([-0.05, 0.0]),      # towards the actor
    "touch the": np.zeros(2),
    "tap the": np.zeros(2),
}


def script_motion(spec: SceneSpec, rng: Optional[np.random.Generator] = None) -> MotionSequence:
    """Ground-truth motion for a scene.

    HOI commands run reach -> grasp -> manipulate -> release with the nearer
    hand; the target box follows the wrist once grasped.  ACTION commands move
    joints only.  Scripts are deterministic in ``spec``; ``rng`` is accepted
    for API symmetry with stochastic script families.
    """
    n = spec.n_frames
    root = np.asarray(spec.root, dtype=np.float64)
    boxes = np.stack([np.stack([o.box for o in spec.objects])] * n)
    kps = np.zeros((n, K, 2))
    if spec.task == "ACTION":
        kind = ACTIONS[spec.template]
        for k in range(n):
            kps[k] = _action_pose(kind, root, k / max(n - 1, 1), k)
    else:
        tgt = spec.target
        ti = spec.objects.index(tgt)
        side = "l" if tgt.center[0] < root[0] else "r"
        away = -1.0 if side == "l" else 1.0
        shift = _MANIPULATION[spec.template] * np.array([away, 1.0])
        kr = spec.reach_frames()
        start = rest_pose(root)[JOINT[f"{side}_wrist"]]
        grasp = np.asarray(tgt.center, dtype=np.float64)
        n_manip = max(n - kr - 2, 1)
        for k in range(n):
            pose = rest_pose(root)
            if k < kr:
                wrist = start + (grasp - start) * _smoothstep(k / kr)
                offset = np.zeros(2)
            else:
                # manipulate over frames kr+1 .. n-2, release on the last frame
                frac = min(max(k - kr, 0) / n_manip, 1.0)
                offset = shift * _smoothstep(frac)
                if spec.template == "tap the":
                    offset = offset + np.array([0.0, -0.02 * ((k - kr) % 2)])
                wrist = grasp + offset
            _set_arm(pose, side, wrist)
            kps[k] = pose
            if k >= kr and spec.template != "tap the":
                boxes[k, ti] = tgt.box + np.concatenate([offset, offset])
    return MotionSequence(kps, boxes, [o.id for o in spec.objects], [o.cls for o in spec.objects],
                          command=spec.command, task=spec.task, fps=spec.fps)


def random_walk_motion(spec: SceneSpec, rng: np.random.Generator, step: float = 0.04) -> MotionSequence:
    """Floor baseline: rest pose whose wrists drift by a Gaussian random walk; boxes static."""
    n = spec.n_frames
    kps = np.repeat(rest_pose(spec.root)[None], n, axis=0)
    for w in ("l_wrist", "r_wrist"):
        walk = np.cumsum(rng.normal(0, step, size=(n, 2)), axis=0)
        walk[0] = 0
        kps[:, JOINT[w]] = np.clip(kps[:, JOINT[w]] + walk, 0, 1)
    boxes = np.stack([np.stack([o.box for o in spec.objects])] * n)
    return MotionSequence(kps, boxes, [o.id for o in spec.objects], [o.cls for o in spec.objects],
                          command=spec.command, task=spec.task, fps=spec.fps)


# =============================================================================
# Rendering
# =============================================================================

SUPERSAMPLE = 4


def head_mask(center, radius: float, canvas: tuple[int, int]) -> np.ndarray:
    """Analytic disc mask: pixel centres within ``radius`` (pixels) of ``center`` (pixels)."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs + 0.5 - center[0]) ** 2 + (ys + 0.5 - center[1]) ** 2) <= radius ** 2


def _render_video_frame(kp: np.ndarray, boxes: np.ndarray, classes: list[str], aperture: float,
                        canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    s = SUPERSAMPLE
    H, W = h * s, w * s
    img = Image.new("RGB", (W, H), VIDEO_BACKGROUND)
    d = ImageDraw.Draw(img)
    px = kp * np.array([W, H])
    limb_w = max(1, int(round(2.5 * W / 64)))
    for a, b in LIMBS:
        if (a, b) in _NECK:
            continue
        color = SHIRT if (a, b) in _TORSO else SKIN if (a, b) in _ARMS else PANTS
        d.line([tuple(px[a]), tuple(px[b])], fill=color, width=limb_w)
    for j in ("l_wrist", "r_wrist"):
        cx, cy = px[JOINT[j]]
        r = limb_w * 0.75
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=SKIN)
    # neck
    neck = 0.5 * (px[JOINT["l_shoulder"]] + px[JOINT["r_shoulder"]])
    d.line([tuple(neck), tuple(px[JOINT["nose"]])], fill=SKIN, width=limb_w)
    hr = HEAD_RADIUS * W
    cx, cy = px[JOINT["nose"]]
    d.ellipse([cx - hr, cy - hr, cx + hr, cy + hr], fill=SKIN)
    er = 0.12 * hr
    for ex in (-0.35, 0.35):
        d.ellipse([cx + ex * hr - er, cy - 0.25 * hr - er, cx + ex * hr + er, cy - 0.25 * hr + er], fill=EYE)
    mw, mh = 0.45 * hr, max(0.06, 0.4 * aperture) * hr
    my = cy + 0.45 * hr
    d.ellipse([cx - mw, my - mh, cx + mw, my + mh], fill=MOUTH)
    for k, cls in enumerate(classes):
        b = boxes[k] * np.array([W, H, W, H])
        d.rectangle([b[0], b[1], b[2] - 1, b[3] - 1], fill=CLASS_COLORS[cls])
    arr = np.asarray(img, dtype=np.float64).reshape(h, s, w, s, 3).mean(axis=(1, 3))
    return np.round(arr).astype(np.uint8)


def render_episode(spec: SceneSpec, motion: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(frames (N,H,W,3) uint8, face_mask (N,H,W) bool)``.

    Mouth aperture follows the per-frame audio envelope; objects are drawn on
    top of the actor.
    """
    if len(motion) != spec.n_frames:
        raise SceneError(f"motion has {len(motion)} frames, scene expects {spec.n_frames}")
    h, w = spec.canvas
    kp = motion.keypoints
    hr = HEAD_RADIUS
    if (kp < 0).any() or (kp > 1).any() or (motion.boxes < 0).any() or (motion.boxes > 1).any():
        raise SceneError("scene elements overflow the canvas")
    heads = kp[:, JOINT["nose"]]
    if (heads - hr < 0).any() or (heads + hr > 1).any():
        raise SceneError("head overflows the canvas")
    frames, masks = [], []
    for k in range(spec.n_frames):
        frames.append(_render_video_frame(kp[k], motion.boxes[k], motion.object_classes,
                                          float(spec.envelope[k]), spec.canvas))
        masks.append(head_mask(heads[k] * np.array([w, h]), hr * w, spec.canvas))
    return np.stack(frames), np.stack(masks)


def mouth_activity(frames: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mean darkening of the head region relative to its brightest frame, per frame."""
    lum = frames.astype(np.float64).mean(-1)
    vals = np.array([lum[k][masks[k]].mean() for k in range(len(frames))])
    return vals.max() - vals


# =============================================================================
# Audio
# =============================================================================

def synth_audio(envelope, length: int, rng: np.random.Generator, sample_rate: int = 16000, fps: int = 25,
                band: tuple[float, float] = (200.0, 4000.0)) -> AudioTrack:
    """Band-limited noise whose per-frame RMS equals the envelope value."""
    env = np.asarray(envelope, dtype=np.float64)
    spf = sample_rate / fps
    if length < int(round(len(env) * spf)):
        length = int(round(len(env) * spf))
    noise = rng.standard_normal(length)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0
    x = np.fft.irfft(spec, n=length)
    out = np.zeros(length)
    for k, e in enumerate(env):
        a, b = int(round(k * spf)), int(round((k + 1) * spf))
        seg = x[a:b]
        rms = np.sqrt(np.mean(seg ** 2))
        if rms > 0:
            out[a:b] = seg / rms * e
    return AudioTrack(out.astype(np.float32), sample_rate, fps)


def frame_rms(track: AudioTrack, frames: int) -> np.ndarray:
    spf = track.samples_per_frame
    return np.array([
        np.sqrt(np.mean(track.samples[int(round(k * spf)): int(round((k + 1) * spf))].astype(np.float64) ** 2))
        for k in range(frames)
    ])


def speech_envelope(n_frames: int, rng: np.random.Generator, p_voiced: float = 0.7) -> list[float]:
    env = np.where(rng.random(n_frames) < p_voiced, rng.uniform(0.3, 1.0, n_frames), 0.0)
    return [round(float(v), 4) for v in env]


def write_wav(track: AudioTrack, path) -> None:
    pcm = np.clip(np.round(track.samples * 32767.0 / 4.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(track.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path, fps: int = 25) -> AudioTrack:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
        return AudioTrack(pcm.astype(np.float32) * 4.0 / 32767.0, f.getframerate(), fps)


# =============================================================================
# Scene sampling and datasets
# =============================================================================

@dataclass
class WorldConfig:
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    n_frames: int = 8
    canvas: int = 64
    fps: int = 25
    sample_rate: int = 16000
    hoi_fraction: float = 0.7
    test_unseen_class: bool = False
    classes: tuple[str, ...] = OBJECT_CLASSES


def split_combos(config: WorldConfig) -> dict[str, set[tuple[str, str]]]:
    """Latin-square assignment of (template, class) combos to splits.

    For template ``t`` the classes at offsets ``t`` and ``t + 1`` go to test and
    val, so every class and every template still appears in train.
    """
    classes = list(config.classes)
    if len(classes) < 3:
        raise SceneError("need at least 3 object classes for disjoint train/val/test combos")
    held = classes[-1] if config.test_unseen_class else None
    splits = {"train": set(), "val": set(), "test": set()}
    for ti, tpl in enumerate(TEMPLATES):
        for ci, cls in enumerate(classes):
            off = (ci - ti) % len(classes)
            if cls == held:
                splits["test"].add((tpl, cls))
            elif off == 0:
                splits["test"].add((tpl, cls))
            elif off == 1:
                splits["val"].add((tpl, cls))
            else:
                splits["train"].add((tpl, cls))
    return splits


def sample_scene(rng: np.random.Generator, combo: tuple[str, str], config: WorldConfig,
                 allowed_classes: Optional[list[str]] = None, max_tries: int = 200) -> SceneSpec:
    template, anchor_cls = combo
    pool = [c for c in (allowed_classes or config.classes) if c != anchor_cls]
    for _ in range(max_tries):
        rx = rng.uniform(0.38, 0.62)
        n_obj = int(rng.integers(1, 4))
        classes = [anchor_cls] + list(rng.choice(pool, size=min(n_obj - 1, len(pool)), replace=False))
        sides = rng.permutation(["l", "r"]).tolist()
        slots = [(sides[0], "up"), (sides[1], "up"), (sides[0], "down")][: len(classes)]
        objs = []
        ok = True
        for oid, (cls, (side, level)) in enumerate(zip(classes, slots)):
            ow, oh = rng.uniform(0.10, 0.16), rng.uniform(0.10, 0.16)
            dx = rng.uniform(0.19, 0.26) + ow / 2 - 0.05
            cx = rx - dx if side == "l" else rx + dx
            cy = rng.uniform(0.30, 0.38) if level == "up" else rng.uniform(0.50, 0.56)
            o = SceneObject(oid, str(cls), (round(float(cx), 4), round(float(cy), 4)),
                            (round(float(ow), 4), round(float(oh), 4)))
            b = o.box
            if b[0] < 0.02 or b[2] > 0.98:
                ok = False
                break
            objs.append(o)
        if not ok:
            continue
        spec = SceneSpec((round(float(rx), 4), ROOT_Y), objs, template,
                         target_id=0 if template in HOI_VERBS else None,
                         n_frames=config.n_frames, canvas=(config.canvas, config.canvas),
                         fps=config.fps, sample_rate=config.sample_rate,
                         envelope=speech_envelope(config.n_frames, rng))
        motion = script_motion(spec)
        if (motion.boxes[..., :2] < 0.01).any() or (motion.boxes[..., 2:] > 0.99).any():
            continue
        if (motion.keypoints < 0.01).any() or (motion.keypoints > 0.99).any():
            continue
        return spec
    raise SceneError(f"could not place a valid scene for {combo}")


@dataclass
class EpisodeRecord:
    episode_id: str
    split: str
    spec: SceneSpec
    motion: MotionSequence
    video: np.ndarray          # (N, H, W, 3) uint8
    face_mask: np.ndarray      # (N, H, W) bool
    audio: AudioTrack

    @property
    def reference(self) -> np.ndarray:
        return self.video[0]


def make_episode(spec: SceneSpec, episode_id: str, split: str, rng: np.random.Generator) -> EpisodeRecord:
    motion = script_motion(spec)
    video, mask = render_episode(spec, motion)
    n_samples = int(round(spec.n_frames * spec.sample_rate / spec.fps))
    audio = synth_audio(spec.envelope, n_samples, rng, spec.sample_rate, spec.fps)
    return EpisodeRecord(episode_id, split, spec, motion, video, mask, audio)


def build_dataset(config: WorldConfig, rng: np.random.Generator) -> list[EpisodeRecord]:
    splits = split_combos(config)
    held = config.classes[-1] if config.test_unseen_class else None
    records = []
    for split, count in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        combos = sorted(splits[split])
        hoi = [c for c in combos if c[0] in HOI_VERBS]
        act = [c for c in combos if c[0] not in HOI_VERBS]
        allowed = [c for c in config.classes if c != held] if split != "test" else list(config.classes)
        for k in range(count):
            group = hoi if (rng.random() < config.hoi_fraction and hoi) or not act else act
            combo = group[int(rng.integers(len(group)))]
            spec = sample_scene(rng, combo, config, allowed)
            records.append(make_episode(spec, f"{split}-{k:04d}", split, rng))
    return records


# =============================================================================
# On-disk layout
# =============================================================================

def _png_bytes(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(records: list[EpisodeRecord], root, config: Optional[WorldConfig] = None, seed=None) -> dict:
    """One directory per episode plus ``manifest.json`` with content hashes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    episodes = []
    for rec in records:
        d = root / rec.episode_id
        d.mkdir(exist_ok=True)
        files = {}
        for k, fr in enumerate(rec.video):
            data = _png_bytes(fr)
            (d / f"frame_{k:03d}.png").write_bytes(data)
            files[f"frame_{k:03d}.png"] = sha256(data)
        mask_bytes = _png_bytes((rec.face_mask.reshape(-1, rec.face_mask.shape[-1]) * 255).astype(np.uint8))
        (d / "face_mask.png").write_bytes(mask_bytes)
        files["face_mask.png"] = sha256(mask_bytes)
        save_motion(rec.motion, d / "motion.json")
        write_wav(rec.audio, d / "audio.wav")
        (d / "scene.json").write_text(json.dumps(rec.spec.to_dict(), indent=1))
        for name in ("motion.json", "audio.wav", "scene.json"):
            files[name] = sha256((d / name).read_bytes())
        ep_hash = sha256(json.dumps(files, sort_keys=True).encode())
        episodes.append({"id": rec.episode_id, "split": rec.split, "command": rec.spec.command,
                         "task": rec.spec.task, "hash": ep_hash, "files": files})
    body = {"format": DATASET_FORMAT, "version": 1, "seed": seed,
            "config": asdict(config) if config else None, "episodes": episodes}
    body["hash"] = sha256(json.dumps(body, sort_keys=True).encode())
    (root / "manifest.json").write_text(json.dumps(body, indent=1))
    return body


def read_episode(root, entry: dict) -> EpisodeRecord:
    d = Path(root) / entry["id"]
    spec = SceneSpec.from_dict(json.loads((d / "scene.json").read_text()))
    frames = np.stack([np.asarray(Image.open(d / f"frame_{k:03d}.png").convert("RGB")) for k in range(spec.n_frames)])
    mask = np.asarray(Image.open(d / "face_mask.png")).reshape(spec.n_frames, *spec.canvas) > 127
    return EpisodeRecord(entry["id"], entry["split"], spec, load_motion(d / "motion.json"), frames, mask,
                         read_wav(d / "audio.wav", spec.fps))


def load_dataset(root, splits: Optional[set[str]] = None) -> list[EpisodeRecord]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root}: not a dataset directory")
    return [read_episode(root, e) for e in manifest["episodes"] if splits is None or e["split"] in splits]
