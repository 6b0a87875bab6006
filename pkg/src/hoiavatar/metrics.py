"""
Desk-scale interaction and video-quality metrics plus adapters for
metrics that need external models.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .motion import CLASS_COLORS, OBJECT_CLASSES, WRISTS, MotionSequence, ObjectBoxFrame, PoseFrame

UNAVAILABLE = "unavailable"
EXTERNAL_METRICS = ("vlm_qa", "clip_re", "dino_consistency", "sync_confidence")
# contact margin: 2 px on a 64 px canvas, kept in normalized units so it scales with resolution
CONTACT_MARGIN = 2.0 / 64.0


class MetricError(ValueError):
    pass


def target_class(command: str) -> str:
    words = command.lower().split()
    if not words or words[-1] not in OBJECT_CLASSES:
        raise MetricError(f"command {command!r} does not name an object class")
    return words[-1]


def _window(n: int, window: Optional[tuple[int, int]]) -> range:
    if window is None:
        return range(n)
    lo, hi = max(0, window[0]), min(n, window[1])
    if lo >= hi:
        raise MetricError(f"empty interaction window {window} for {n} frames")
    return range(lo, hi)


def pixel_interaction(boxes: Sequence[ObjectBoxFrame], poses: Sequence[PoseFrame], command: str,
                      window: Optional[tuple[int, int]] = None, margin: float = CONTACT_MARGIN,
                      hands: Sequence[int] = WRISTS) -> float:
    """Fraction of window frames where a visible hand keypoint touches the target box.

    Contact means the keypoint lies inside the box grown by ``margin``
    (normalized units).  Frames where the target is not detected count as
    no contact; a target class missing from the object list is an error.
    """
    if len(boxes) != len(poses):
        raise MetricError(f"{len(boxes)} box frames vs {len(poses)} pose frames")
    cls = target_class(command)
    if not boxes or cls not in boxes[0].classes:
        raise MetricError(f"target object {cls!r} absent from the scene")
    k = boxes[0].classes.index(cls)
    frames = _window(len(boxes), window)
    hits = 0
    for t in frames:
        if not boxes[t].presence[k]:
            continue
        x0, y0, x1, y1 = boxes[t].boxes[k]
        for j in hands:
            if not poses[t].visibility[j]:
                continue
            x, y = poses[t].keypoints[j]
            if x0 - margin <= x <= x1 + margin and y0 - margin <= y <= y1 + margin:
                hits += 1
                break
    return hits / len(frames)


def motion_pi(motion: MotionSequence, command: Optional[str] = None,
              window: Optional[tuple[int, int]] = None, margin: float = CONTACT_MARGIN) -> float:
    return pixel_interaction(motion.objects, motion.poses, command or motion.command, window, margin)


def dynamic_degree(frames: np.ndarray) -> float:
    """Mean absolute frame-to-frame difference over the 0-255 range; 0 for a static clip, 1 at most."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim < 3 or len(f) < 2:
        raise MetricError("dynamic degree needs at least two frames")
    return float(np.abs(np.diff(f, axis=0)).mean() / 255.0)


def laplacian_sharpness(frames: np.ndarray, region_mask: np.ndarray) -> float:
    """Variance of the discrete Laplacian of luminance inside the region, averaged over frames."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 3 and f.shape[-1] == 3:
        f = f[None]
    lum = f.mean(-1) if f.shape[-1] == 3 else f
    mask = np.asarray(region_mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, lum.shape)
    if mask.shape != lum.shape:
        raise MetricError(f"region mask shape {mask.shape} vs frames {lum.shape}")
    scores = []
    for img, m in zip(lum, mask):
        if not m.any():
            continue
        scores.append(ndimage.laplace(img, mode="nearest")[m].var())
    if not scores:
        raise MetricError("empty sharpness region")
    return float(np.mean(scores))


def hand_region(motion: MotionSequence, canvas: tuple[int, int], radius: float = 4 / 64) -> np.ndarray:
    """Discs around visible wrists, as a ``(N, H, W)`` mask."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((len(motion), h, w), dtype=bool)
    r = radius * min(h, w)
    for t in range(len(motion)):
        for j in WRISTS:
            if motion.visibility[t, j]:
                cx, cy = motion.keypoints[t, j] * (w, h)
                out[t] |= (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    return out


def parse_video_boxes(frames: np.ndarray, classes: Sequence[str], tol: float = 40.0,
                      min_pixels: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Boxes of filled class-coloured objects in rendered video frames.

    Returns normalized ``(N, M, 4)`` boxes and a ``(N, M)`` found flag.
    """
    f = np.asarray(frames, dtype=np.float64)
    n, h, w = f.shape[:3]
    boxes = np.zeros((n, len(classes), 4))
    found = np.zeros((n, len(classes)), dtype=bool)
    for k, cls in enumerate(classes):
        col = np.asarray(CLASS_COLORS[cls], dtype=np.float64)
        close = ((f - col) ** 2).sum(-1) <= tol ** 2
        for t in range(n):
            lab, cnt = ndimage.label(close[t])
            if cnt == 0:
                continue
            sizes = ndimage.sum(close[t], lab, index=np.arange(1, cnt + 1))
            best = 1 + int(sizes.argmax())
            if sizes.max() < min_pixels:
                continue
            ys, xs = np.nonzero(lab == best)
            boxes[t, k] = (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)
            found[t, k] = True
    return boxes, found


@dataclass
class TrackingResult:
    error_px: float | str
    failure_rate: float


def box_tracking_error(frames: np.ndarray, driving: MotionSequence, max_failure: float = 0.2,
                       tol: float = 40.0) -> TrackingResult:
    """Mean pixel distance between box centres found in ``frames`` and the driving boxes."""
    frames = np.asarray(frames)
    if len(frames) != len(driving):
        raise MetricError(f"{len(frames)} frames vs {len(driving)} driving frames")
    h, w = frames.shape[1:3]
    boxes, found = parse_video_boxes(frames, driving.object_classes, tol)
    expected = driving.presence
    n_expected = int(expected.sum())
    if n_expected == 0:
        raise MetricError("driving motion has no visible boxes")
    ok = found & expected
    failure = 1.0 - ok.sum() / n_expected
    if failure > max_failure:
        return TrackingResult(UNAVAILABLE, float(failure))
    scale = np.array([w, h], dtype=np.float64)
    c_gen = 0.5 * (boxes[..., :2] + boxes[..., 2:]) * scale
    c_ref = driving.box_centers() * scale
    dist = np.linalg.norm(c_gen - c_ref, axis=-1)[ok]
    return TrackingResult(float(dist.mean()), float(failure))


# =============================================================================
# External-model metrics
# =============================================================================

@dataclass
class ExternalAdapter:
    """Subprocess protocol: a JSON request on stdin, a JSON score document on stdout.

    Request: ``{"metric": name, "episodes": [{"id", "video_dir", "command"}]}``.
    Response: ``{"scores": {episode_id: float}}``.
    """

    metric: str
    command: Optional[list[str]] = None
    timeout: float = 600.0

    def score(self, episodes: list[dict]) -> dict[str, float | str]:
        if not self.command:
            return {e["id"]: UNAVAILABLE for e in episodes}
        req = json.dumps({"metric": self.metric, "episodes": episodes})
        proc = subprocess.run(self.command, input=req, capture_output=True, text=True,
                              timeout=self.timeout, check=False)
        if proc.returncode != 0:
            raise MetricError(f"{self.metric} adapter failed ({proc.returncode}): {proc.stderr.strip()}")
        scores = json.loads(proc.stdout)["scores"]
        return {e["id"]: float(scores[e["id"]]) if e["id"] in scores else UNAVAILABLE for e in episodes}


# =============================================================================
# Reports
# =============================================================================

def _mean(values) -> float | str:
    vals = [v for v in values if isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)]
    return float(np.mean(vals)) if vals else UNAVAILABLE


@dataclass
class MetricReport:
    episodes: dict[str, dict[str, float | str]] = field(default_factory=dict)

    COLUMNS = ("pi", "dd", "sharpness", "box_err") + EXTERNAL_METRICS

    def add(self, episode_id: str, **values) -> None:
        row = {c: UNAVAILABLE for c in self.COLUMNS}
        row.update(values)
        self.episodes[episode_id] = row

    def aggregate(self) -> dict[str, float | str]:
        return {c: _mean(r.get(c) for r in self.episodes.values()) for c in self.COLUMNS}

    def to_tsv(self) -> str:
        def fmt(v):
            return f"{v:.6f}" if isinstance(v, float) else str(v)
        lines = ["\t".join(("episode",) + self.COLUMNS)]
        for eid in sorted(self.episodes):
            lines.append("\t".join([eid] + [fmt(self.episodes[eid].get(c, UNAVAILABLE)) for c in self.COLUMNS]))
        agg = self.aggregate()
        lines.append("\t".join(["MEAN"] + [fmt(agg[c]) for c in self.COLUMNS]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"episodes": self.episodes, "aggregate": self.aggregate()}, indent=1, sort_keys=True)

    def table(self) -> str:
        agg = self.aggregate()
        width = max(len(c) for c in self.COLUMNS)
        rows = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        for c in self.COLUMNS:
            v = agg[c]
            rows.append(f"{c:<{width}}  {v:.4f}" if isinstance(v, float) else f"{c:<{width}}  {v}")
        return "\n".join(rows)
