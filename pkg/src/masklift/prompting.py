"""Positive-negative-positive prompt points for an external promptable segmenter."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_NEGATIVES = 5


@dataclass(frozen=True)
class InstanceDetection:
    obj_id: int
    center: tuple[float, float]
    polygon: np.ndarray
    frame: int = 0

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise ValueError(f"detection {self.obj_id}: polygon needs >= 3 (x, y) vertices")
        c = tuple(float(v) for v in self.center)
        if len(c) != 2 or not all(np.isfinite(c)):
            raise ValueError(f"detection {self.obj_id}: center must be two finite numbers")
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "center", c)


@dataclass
class PromptSet:
    frame_index: int
    obj_id: int
    positives: list[tuple[float, float]] = field(default_factory=list)
    negatives: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "frame": self.frame_index,
            "obj_id": self.obj_id,
            "positive": [list(p) for p in self.positives],
            "negative": [list(p) for p in self.negatives],
        }


def point_in_polygon(p, poly) -> bool:
    """Even-odd rule; points on an edge or vertex count as inside."""
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or len(poly) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    x, y = float(p[0]), float(p[1])
    a = poly
    b = np.roll(poly, -1, axis=0)
    ex, ey = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    cross = ex * (y - a[:, 1]) - ey * (x - a[:, 0])
    scale = np.maximum(np.hypot(ex, ey), 1e-300)
    within = (
        (np.minimum(a[:, 0], b[:, 0]) <= x) & (x <= np.maximum(a[:, 0], b[:, 0]))
        & (np.minimum(a[:, 1], b[:, 1]) <= y) & (y <= np.maximum(a[:, 1], b[:, 1]))
    )
    if np.any(within & (np.abs(cross) / scale <= 1e-9)):
        return True
    straddles = (a[:, 1] > y) != (b[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = a[:, 0] + (y - a[:, 1]) * ex / ey
    return bool(np.count_nonzero(straddles & (x < x_cross)) % 2)


def _positive_points(det: InstanceDetection, grid: int, radius: int) -> list[tuple[float, float]]:
    cx, cy = det.center
    points = [(cx, cy)]
    for k in range(-radius, radius + 1):
        if k == 0:
            continue
        for dx, dy in ((k * grid, 0), (0, k * grid)):
            q = (cx + dx, cy + dy)
            if point_in_polygon(q, det.polygon):
                points.append(q)
    return points


def generate_pnp_prompts(detections, grid: int = 3, radius: int = 1) -> list[PromptSet]:
    """One prompt set per detection, output sorted by (frame, obj_id).

    Negatives are the centers of the five nearest other detections in the same frame
    (fewer if the frame has fewer); distance ties go to the lower obj_id. Positives are
    the center plus grid-spaced offsets along x and y that fall inside the polygon.
    """
    dets = sorted(detections, key=lambda d: (d.frame, d.obj_id))
    if not dets:
        raise ValueError("need at least one detection")
    if grid <= 0 or radius < 0:
        raise ValueError("grid must be positive and radius non-negative")
    out = []
    by_frame: dict[int, list[InstanceDetection]] = {}
    for d in dets:
        by_frame.setdefault(d.frame, []).append(d)
    for frame, group in by_frame.items():
        centers = np.array([d.center for d in group])
        for i, det in enumerate(group):
            dist = np.hypot(*(centers - centers[i]).T)
            others = [j for j in np.lexsort(([d.obj_id for d in group], dist)) if j != i]
            negatives = [tuple(centers[j]) for j in others[:N_NEGATIVES]]
            out.append(PromptSet(frame, det.obj_id, _positive_points(det, grid, radius), negatives))
    return out


def read_detections(path) -> list[InstanceDetection]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError("detections file must hold a JSON array")
    try:
        return [
            InstanceDetection(int(d["obj_id"]), tuple(d["center"]), np.asarray(d["polygon"]), int(d["frame"]))
            for d in doc
        ]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed detection entry: {exc}") from exc


def write_prompts(path, prompts: list[PromptSet]) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in prompts], indent=1))
