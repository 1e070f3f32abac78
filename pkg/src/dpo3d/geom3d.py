"""Oriented 3D boxes: rotated BEV IoU, 3D IoU, L1 box distance and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def wrap_angles(a: np.ndarray) -> np.ndarray:
    out = np.fmod(np.asarray(a, dtype=np.float64), 2.0 * np.pi)
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    return np.where(out > np.pi, out - 2.0 * np.pi, out)


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.dx, self.dy, self.dz)}")
        vals = (self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.yaw])

    @classmethod
    def from_array(cls, row) -> "Box3D":
        return cls(*(float(v) for v in row[:7]))

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz

    def scaled(self, factor: float) -> "Box3D":
        return Box3D(self.cx, self.cy, self.cz, self.dx * factor, self.dy * factor,
                     self.dz * factor, self.yaw)


@dataclass(frozen=True)
class ScoredBox:
    box: Box3D
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.array([[b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.yaw] for b in boxes])


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated footprints of two boxes."""
    return float(kernels.bev_iou_pair(a.as_array(), b.as_array()))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return float(kernels.bev_intersection(a.as_array(), b.as_array()))


def _z_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.cz - 0.5 * a.dz, b.cz - 0.5 * b.dz)
    hi = min(a.cz + 0.5 * a.dz, b.cz + 0.5 * b.dz)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV overlap times vertical overlap over the union volume."""
    h = _z_overlap(a, b)
    if h <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * h
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


def bev_iou_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    return kernels.bev_iou_matrix(boxes_to_array(a), boxes_to_array(b))


def iou_3d_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    aa = boxes_to_array(a)
    bb = boxes_to_array(b)
    bev = kernels.bev_iou_matrix(aa, bb)
    if bev.size == 0:
        return bev
    area_a = aa[:, 3] * aa[:, 4]
    area_b = bb[:, 3] * bb[:, 4]
    # recover intersection area from the IoU: I = iou * (Aa + Ab) / (1 + iou)
    inter_area = bev * (area_a[:, None] + area_b[None, :]) / (1.0 + bev)
    lo = np.maximum((aa[:, 2] - 0.5 * aa[:, 5])[:, None], (bb[:, 2] - 0.5 * bb[:, 5])[None, :])
    hi = np.minimum((aa[:, 2] + 0.5 * aa[:, 5])[:, None], (bb[:, 2] + 0.5 * bb[:, 5])[None, :])
    inter = inter_area * np.clip(hi - lo, 0.0, None)
    vol_a = area_a * aa[:, 5]
    vol_b = area_b * bb[:, 5]
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def box_l1(a: Box3D, b: Box3D) -> float:
    """Sum of absolute differences of centre, size and wrapped yaw."""
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.cz - b.cz)
            + abs(a.dx - b.dx) + abs(a.dy - b.dy) + abs(a.dz - b.dz)
            + abs(wrap_angle(a.yaw - b.yaw)))


def box_l1_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    aa = boxes_to_array(a)
    bb = boxes_to_array(b)
    diff = np.abs(aa[:, None, :6] - bb[None, :, :6]).sum(axis=2)
    dyaw = np.abs(wrap_angles(aa[:, None, 6] - bb[None, :, 6]))
    return diff + dyaw


def priority_order(scores: np.ndarray, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    """Descending score; ties by ascending (cx, cy)."""
    return np.lexsort((cy, cx, -np.asarray(scores)))


def nms(boxes: Sequence[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    """Greedy BEV non-maximum suppression, output in descending score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if not boxes:
        return []
    arr = boxes_to_array([b.box for b in boxes])
    scores = np.array([b.score for b in boxes])
    order = priority_order(scores, arr[:, 0], arr[:, 1])
    keep = kernels.nms_sorted(arr[order], iou_thresh)
    return [boxes[int(order[k])] for k in keep]
