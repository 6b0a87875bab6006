"""
Motion representation: skeletal keypoints plus object boxes, their RGB
rasterization, the inverse parser, and the on-disk motion document.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

JOINTS = (
    "nose", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
K = len(JOINTS)
JOINT = {name: k for k, name in enumerate(JOINTS)}
WRISTS = (JOINT["l_wrist"], JOINT["r_wrist"])

LIMBS = (
    (0, 1), (0, 2), (1, 2), (1, 3), (3, 5), (2, 4), (4, 6),
    (1, 7), (2, 8), (7, 8), (7, 9), (9, 11), (8, 10), (10, 12),
)

OBJECT_CLASSES = ("box", "cup", "ball", "book", "bottle", "phone")

MOTION_FORMAT = "hoiavatar.motion"
MOTION_VERSION = 1


def _hsv(h, s, v):
    return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(h, s, v))


# joints: saturated hues; limbs: dark hues; boxes: pastel hues.  Joint and box
# colours are >= 80 apart in RGB from every other entry; limbs only need to be
# told apart from joints and boxes, not from each other.
JOINT_COLORS = np.array([_hsv(k / K, 1.0, 1.0) for k in range(K)], dtype=np.uint8)
LIMB_COLORS = np.array([_hsv((k + 0.5) / len(LIMBS), 1.0, 0.45) for k in range(len(LIMBS))], dtype=np.uint8)
CLASS_COLORS = {c: _hsv((k + 0.5) / len(OBJECT_CLASSES), 0.45, 1.0) for k, c in enumerate(OBJECT_CLASSES)}
BACKGROUND = (0, 0, 0)


class KeypointClampWarning(UserWarning):
    pass


class MotionFormatError(ValueError):
    pass


@dataclass
class PoseFrame:
    keypoints: np.ndarray          # (K, 2) normalized x, y
    visibility: np.ndarray         # (K,) bool


@dataclass
class ObjectBoxFrame:
    ids: list[int]
    classes: list[str]
    boxes: np.ndarray              # (M, 4) normalized x_min, y_min, x_max, y_max
    presence: np.ndarray           # (M,) bool


@dataclass
class MotionSequence:
    """Per-frame keypoints and object boxes for one clip (arrays over frames)."""

    keypoints: np.ndarray                      # (N, K, 2)
    boxes: np.ndarray                          # (N, M, 4)
    object_ids: list[int] = field(default_factory=list)
    object_classes: list[str] = field(default_factory=list)
    visibility: Optional[np.ndarray] = None    # (N, K)
    presence: Optional[np.ndarray] = None      # (N, M)
    command: str = ""
    task: str = "ACTION"
    fps: int = 25
    canvas: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(len(self.keypoints), -1, 4)
        n, m = self.boxes.shape[:2]
        if n < 1:
            raise MotionFormatError("motion needs at least one frame")
        if self.keypoints.shape != (n, K, 2):
            raise MotionFormatError(f"keypoints shape {self.keypoints.shape} != ({n}, {K}, 2)")
        if len(self.object_ids) != m or len(self.object_classes) != m:
            raise MotionFormatError("object ids/classes do not match box count")
        if self.visibility is None:
            self.visibility = np.ones((n, K), dtype=bool)
        if self.presence is None:
            self.presence = np.ones((n, m), dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        self.presence = np.asarray(self.presence, dtype=bool)
        self.canvas = tuple(self.canvas)

    def __len__(self):
        return len(self.keypoints)

    @property
    def poses(self) -> list[PoseFrame]:
        return [PoseFrame(self.keypoints[t], self.visibility[t]) for t in range(len(self))]

    @property
    def objects(self) -> list[ObjectBoxFrame]:
        return [ObjectBoxFrame(list(self.object_ids), list(self.object_classes), self.boxes[t], self.presence[t])
                for t in range(len(self))]

    @cached_property
    def rendered(self) -> np.ndarray:
        return render_motion(self.poses, self.objects, self.canvas)

    def object_index(self, object_id: int) -> int:
        return self.object_ids.index(object_id)

    def box_centers(self) -> np.ndarray:
        return 0.5 * (self.boxes[..., :2] + self.boxes[..., 2:])

    def to_dict(self) -> dict:
        frames = []
        for t in range(len(self)):
            frames.append({
                "keypoints": np.round(self.keypoints[t], 6).tolist(),
                "visibility": self.visibility[t].tolist(),
                "boxes": [
                    {"id": int(oid), "box": np.round(self.boxes[t, k], 6).tolist(), "present": bool(self.presence[t, k])}
                    for k, oid in enumerate(self.object_ids)
                ],
            })
        return {
            "format": MOTION_FORMAT,
            "version": MOTION_VERSION,
            "fps": self.fps,
            "canvas": list(self.canvas),
            "command": self.command,
            "task": self.task,
            "skeleton": list(JOINTS),
            "objects": [{"id": int(i), "class": c} for i, c in zip(self.object_ids, self.object_classes)],
            "frames": frames,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MotionSequence":
        if doc.get("format") != MOTION_FORMAT:
            raise MotionFormatError(f"not a motion document: format={doc.get('format')!r}")
        if list(doc.get("skeleton", JOINTS)) != list(JOINTS):
            raise MotionFormatError("unsupported skeleton layout")
        objects = doc.get("objects", [])
        ids = [int(o["id"]) for o in objects]
        frames = doc["frames"]
        kp = np.array([f["keypoints"] for f in frames], dtype=np.float64)
        vis = np.array([f.get("visibility", [True] * K) for f in frames], dtype=bool)
        boxes = np.zeros((len(frames), len(ids), 4))
        pres = np.zeros((len(frames), len(ids)), dtype=bool)
        for t, f in enumerate(frames):
            for rec in f["boxes"]:
                k = ids.index(int(rec["id"]))
                boxes[t, k] = rec["box"]
                pres[t, k] = rec.get("present", True)
        return cls(kp, boxes, ids, [o["class"] for o in objects], vis, pres,
                   command=doc.get("command", ""), task=doc.get("task", "ACTION"),
                   fps=int(doc.get("fps", 25)), canvas=tuple(doc.get("canvas", (256, 256))))


def save_motion(motion: MotionSequence, path) -> None:
    Path(path).write_text(json.dumps(motion.to_dict(), indent=1))


def load_motion(path) -> MotionSequence:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MotionFormatError(f"{path}: {e}") from e
    return MotionSequence.from_dict(doc)


# =============================================================================
# Rasterization
# =============================================================================

def _stroke_sizes(canvas: tuple[int, int]) -> tuple[int, float, int]:
    s = min(canvas)
    limb_w = max(1, int(round(s / 64)))
    joint_r = max(1.0, 1.5 * s / 64)
    box_w = max(1, int(round(s / 128)))
    return limb_w, joint_r, box_w


def box_pixels(box, canvas: tuple[int, int]) -> tuple[int, int, int, int]:
    """Inclusive pixel rectangle covered by a normalized box."""
    h, w = canvas
    x0, y0 = int(round(box[0] * w)), int(round(box[1] * h))
    x1, y1 = int(round(box[2] * w)) - 1, int(round(box[3] * h)) - 1
    return x0, y0, max(x0, x1), max(y0, y1)


def render_motion_frame(pose: Optional[PoseFrame], objects: Optional[ObjectBoxFrame],
                        canvas: tuple[int, int] = (256, 256)) -> np.ndarray:
    h, w = canvas
    limb_w, joint_r, box_w = _stroke_sizes(canvas)
    img = Image.new("RGB", (w, h), BACKGROUND)
    draw = ImageDraw.Draw(img)
    if objects is not None:
        for k, cls in enumerate(objects.classes):
            if not objects.presence[k]:
                continue
            b = objects.boxes[k]
            if not (b[0] < b[2] and b[1] < b[3]):
                raise ValueError(f"degenerate box for object {objects.ids[k]}: {b}")
            draw.rectangle(box_pixels(b, canvas), outline=CLASS_COLORS[cls], width=box_w)
    if pose is not None and len(pose.keypoints):
        kp = np.asarray(pose.keypoints, dtype=np.float64)
        if (kp < 0).any() or (kp > 1).any():
            warnings.warn("keypoints outside [0, 1] clamped", KeypointClampWarning, stacklevel=3)
            kp = kp.clip(0, 1)
        px = np.stack([kp[:, 0] * w, kp[:, 1] * h], axis=-1)
        vis = pose.visibility
        for e, (a, b) in enumerate(LIMBS):
            if vis[a] and vis[b]:
                draw.line([tuple(px[a]), tuple(px[b])], fill=tuple(int(c) for c in LIMB_COLORS[e]), width=limb_w)
        # wrists last so they are never occluded by other joints
        order = [k for k in range(K) if k not in WRISTS] + list(WRISTS)
        for k in order:
            if vis[k]:
                cx, cy = px[k]
                draw.ellipse([cx - joint_r, cy - joint_r, cx + joint_r, cy + joint_r],
                             fill=tuple(int(c) for c in JOINT_COLORS[k]))
    return np.asarray(img, dtype=np.uint8)


def render_motion(poses: Sequence[Optional[PoseFrame]], objects: Sequence[Optional[ObjectBoxFrame]],
                  canvas: tuple[int, int] = (256, 256)) -> np.ndarray:
    """Rasterize a motion clip to ``(N, H, W, 3)`` uint8 frames.

    Boxes are class-coloured outlines, limbs fixed-palette segments and joints
    filled discs on a black background.
    """
    if len(poses) != len(objects):
        raise ValueError(f"{len(poses)} pose frames but {len(objects)} object frames")
    return np.stack([render_motion_frame(p, o, tuple(canvas)) for p, o in zip(poses, objects)])


# =============================================================================
# Parsing (inverse of render_motion)
# =============================================================================

def _palette():
    colors = [JOINT_COLORS[k] for k in range(K)] + [LIMB_COLORS[e] for e in range(len(LIMBS))]
    colors += [CLASS_COLORS[c] for c in OBJECT_CLASSES]
    return np.array(colors, dtype=np.float64)


_PALETTE = _palette()
_N_JOINT, _N_LIMB = K, len(LIMBS)


def classify_pixels(frame: np.ndarray, tol: float = 60.0) -> np.ndarray:
    """Label each pixel with its nearest palette entry, -1 for background/unmatched."""
    f = np.asarray(frame, dtype=np.float64)
    d2 = ((f[..., None, :] - _PALETTE) ** 2).sum(-1)
    lab = d2.argmin(-1)
    lab[d2.min(-1) > tol ** 2] = -1
    return lab


def _largest_component(mask: np.ndarray, dilate: int = 1, keep_frac: float = 1.0) -> np.ndarray:
    """Keep the largest connected blob, plus any blob at least ``keep_frac`` of its size."""
    if not mask.any():
        return mask
    grown = ndimage.binary_dilation(mask, iterations=dilate) if dilate else mask
    lab, n = ndimage.label(grown)
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    keep = 1 + np.flatnonzero(sizes >= keep_frac * sizes.max())
    return mask & np.isin(lab, keep)


def _outline_coverage(mask: np.ndarray, kept: np.ndarray) -> float:
    """Fraction of the border of ``kept``'s extent that ``mask`` covers."""
    ys, xs = np.nonzero(kept)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    border = np.zeros_like(mask)
    border[y0:y1, x0:x1] = True
    border[y0 + 1:y1 - 1, x0 + 1:x1 - 1] = False
    return float(mask[border].mean())


def parse_motion_frame(frame: np.ndarray, objects: Sequence[tuple[int, str]] = (), tol: float = 60.0,
                       min_pixels: int = 1, min_outline: float = 0.3):
    """Recover keypoints and boxes from one rendered frame.

    Returns ``(keypoints (K,2), visibility (K,), boxes (M,4), presence (M,))``
    in normalized coordinates.  Joint centres are centroids of the largest
    blob of the joint's colour; boxes are the extents of the class colour's
    largest outline component.  A box whose border is less than
    ``min_outline`` class-coloured is reported absent, so scattered pixels of
    the class colour cannot merge into a frame-filling box.
    """
    h, w = frame.shape[:2]
    lab = classify_pixels(frame, tol)
    kp = np.zeros((K, 2))
    vis = np.zeros(K, dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    for k in range(K):
        m = _largest_component(lab == k, dilate=0)
        if m.sum() >= min_pixels:
            kp[k] = ((xs[m].mean() + 0.5) / w, (ys[m].mean() + 0.5) / h)
            vis[k] = True
    boxes = np.zeros((len(objects), 4))
    pres = np.zeros(len(objects), dtype=bool)
    for k, (_, cls) in enumerate(objects):
        raw = lab == _N_JOINT + _N_LIMB + OBJECT_CLASSES.index(cls)
        m = _largest_component(raw, dilate=1, keep_frac=0.1)
        if m.sum() >= max(min_pixels, 2) and _outline_coverage(raw, m) >= min_outline:
            boxes[k] = (xs[m].min() / w, ys[m].min() / h, (xs[m].max() + 1) / w, (ys[m].max() + 1) / h)
            pres[k] = True
    return kp, vis, boxes, pres


def parse_motion(frames: np.ndarray, objects: Sequence[tuple[int, str]] = (), tol: float = 60.0,
                 min_pixels: int = 1, **meta) -> MotionSequence:
    """Inverse of :func:`render_motion` for clips in the synthetic rendering style."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    parsed = [parse_motion_frame(f, objects, tol, min_pixels) for f in frames]
    kp, vis, boxes, pres = (np.stack(x) for x in zip(*parsed))
    # absent boxes get a valid placeholder so the sequence stays well-formed
    boxes[~pres] = (0.0, 0.0, 1e-6, 1e-6)
    return MotionSequence(kp, boxes, [o[0] for o in objects], [o[1] for o in objects], vis, pres,
                          canvas=frames.shape[1:3], **meta)
