"""Instance segmentation and regression metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import LabeledPointCloud


@dataclass(frozen=True)
class InstanceOverlap:
    intersection: int
    pred_size: int
    truth_size: int

    def __post_init__(self):
        if min(self.intersection, self.pred_size, self.truth_size) < 0:
            raise ValueError("counts must be non-negative")
        if self.intersection > min(self.pred_size, self.truth_size):
            raise ValueError("intersection exceeds a set size")

    @property
    def union(self) -> int:
        return self.pred_size + self.truth_size - self.intersection

    def scores(self) -> dict:
        if self.pred_size == 0 and self.truth_size == 0:
            raise ValueError("both prediction and truth are empty")
        inter = self.intersection
        iou = inter / self.union
        precision = inter / self.pred_size if self.pred_size else 0.0
        recall = inter / self.truth_size if self.truth_size else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return {"iou": iou, "precision": precision, "recall": recall, "f1": f1}


def _labels(x) -> np.ndarray:
    return x.instance_ids if isinstance(x, LabeledPointCloud) else np.asarray(x)


def overlap(pred_labels: np.ndarray, truth_labels: np.ndarray, pred_id: int, truth_id: int) -> InstanceOverlap:
    p = pred_labels == pred_id
    t = truth_labels == truth_id
    return InstanceOverlap(int(np.count_nonzero(p & t)), int(np.count_nonzero(p)), int(np.count_nonzero(t)))


def segmentation_metrics(pred, truth, id_map: Iterable[tuple[int, int]] | None = None,
                         matcher: str = "explicit") -> dict:
    """Per-pair IoU, precision, recall and F1 plus their mIoU.

    ``pred`` and ``truth`` are clouds (or label arrays) over the same points in the same
    order. Without ``id_map`` pairs are formed by :func:`greedy_match`; the output records
    which matcher was used.
    """
    pl, tl = _labels(pred), _labels(truth)
    if pl.shape != tl.shape:
        raise ValueError(f"prediction has {len(pl)} points, truth has {len(tl)}")
    if id_map is None:
        id_map = greedy_match(pl, tl)
        matcher = "greedy-iou"
    pairs = [(int(a), int(b)) for a, b in id_map]
    if not pairs:
        raise ValueError("no instance pairs to evaluate")
    per = []
    for pid, tid in pairs:
        s = overlap(pl, tl, pid, tid).scores()
        per.append({"pred_id": pid, "truth_id": tid, **s})
    return {"matcher": matcher, "instances": per, "miou": float(np.mean([r["iou"] for r in per]))}


def greedy_match(pred_labels: np.ndarray, truth_labels: np.ndarray, ignore: int = -1) -> list[tuple[int, int]]:
    """Pair each truth instance with at most one prediction, highest IoU first.

    Truth instances left without a positive-IoU partner are paired with an unused
    prediction id (scoring 0) so they still count in the mean.
    """
    pl, tl = np.asarray(pred_labels), np.asarray(truth_labels)
    p_ids = [int(i) for i in np.unique(pl) if i != ignore]
    t_ids = [int(i) for i in np.unique(tl) if i != ignore]
    cand = []
    for t in t_ids:
        for p in p_ids:
            o = overlap(pl, tl, p, t)
            if o.intersection:
                cand.append((-o.intersection / o.union, t, p))
    cand.sort()
    used_p, used_t, pairs = set(), set(), []
    for _, t, p in cand:
        if t not in used_t and p not in used_p:
            pairs.append((p, t))
            used_t.add(t)
            used_p.add(p)
    spare = min(p_ids + t_ids + [ignore]) - 1
    for t in t_ids:
        if t not in used_t:
            while spare in pl:
                spare -= 1
            pairs.append((spare, t))
            spare -= 1
    return sorted(pairs, key=lambda pt: pt[1])


def regression_metrics(y_true: Sequence[float], y_pred: Sequence[float]) -> dict:
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.ndim != 1 or yt.shape != yp.shape or len(yt) == 0:
        raise ValueError("y_true and y_pred must be equal-length non-empty 1D sequences")
    resid = yt - yp
    ss_tot = float(np.sum((yt - yt.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 undefined: y_true has zero variance")
    return {
        "rmse": math.sqrt(float(np.mean(resid ** 2))),
        "mae": float(np.mean(np.abs(resid))),
        "r2": 1.0 - float(np.sum(resid ** 2)) / ss_tot,
    }


def avg_inference_time(durations: Sequence[float]) -> float:
    d = [float(x) for x in durations]
    if not d:
        raise ValueError("need at least one duration")
    if any(x <= 0 or not math.isfinite(x) for x in d):
        raise ValueError("durations must be positive and finite")
    return math.fsum(d) / len(d)


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")
