"""Reliable Hungarian matching between pseudo-labels and perturbed predictions.

Pseudo-labels are paired one-to-one with the boxes predicted after the
dual perturbation; each pseudo-label's matched cost is tiered against
global quantiles of every cost seen so far in the stream.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geom3d import Box3D, bev_iou, box_l1, box_l1_matrix, boxes_to_array

SENTINEL = 1e9
EMPTY = -1
INFINITE = math.inf


class Tier(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2


def box_cost(a: Box3D, b: Box3D, w_iou: float = 1.0, w_l1: float = 1.0) -> float:
    if w_iou < 0 or w_l1 < 0 or (w_iou == 0 and w_l1 == 0):
        raise ValueError("cost weights must be non-negative and not both zero")
    return w_iou * (1.0 - bev_iou(a, b)) + w_l1 * box_l1(a, b)


def cost_matrix(a: Sequence[Box3D], b: Sequence[Box3D], w_iou: float = 1.0,
                w_l1: float = 1.0) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    iou = kernels.bev_iou_matrix(boxes_to_array(a), boxes_to_array(b))
    return w_iou * (1.0 - iou) + w_l1 * box_l1_matrix(a, b)


def hungarian(cost) -> np.ndarray:
    """Optimal permutation for a square cost matrix (row i -> column perm[i]).

    Ties between optimal assignments go to the lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] < 1:
        raise ValueError("cost must be a non-empty square matrix")
    if np.isnan(cost).any():
        raise ValueError("cost contains NaN")
    cost = np.minimum(cost, SENTINEL)
    return kernels.hungarian(cost)


@dataclass
class MatchResult:
    assignment: np.ndarray      # padded-column index per pseudo-label
    per_box_cost: np.ndarray    # inf where paired with EMPTY
    n_perturbed: int = 0

    @property
    def matched_index(self) -> np.ndarray:
        """Index into the perturbed list, or EMPTY."""
        return np.where(self.assignment < self.n_perturbed, self.assignment, EMPTY)


def match_predictions(pseudo: Sequence[Box3D], perturbed: Sequence[Box3D],
                      w_iou: float = 1.0, w_l1: float = 1.0) -> MatchResult:
    n, m = len(pseudo), len(perturbed)
    size = max(n, m)
    if size == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), np.zeros(0), 0)
    padded = np.full((size, size), SENTINEL)
    if n and m:
        padded[:n, :m] = cost_matrix(pseudo, perturbed, w_iou, w_l1)
    perm = hungarian(padded)
    assign = perm[:n]
    costs = np.where(assign < m, padded[np.arange(n), assign], INFINITE)
    return MatchResult(assign.astype(np.int64), costs, m)


@dataclass
class TierThresholds:
    c1: float
    c2: float
    alpha: float


@dataclass
class CostHistory:
    """Every matched cost seen in the stream, kept sorted (sentinels last)."""
    values: list = field(default_factory=list)
    include_sentinels: bool = True

    @property
    def n(self) -> int:
        return len(self.values)

    def insert(self, costs) -> None:
        for c in np.asarray(costs, dtype=np.float64).ravel():
            c = float(c)
            if not math.isfinite(c) or c >= SENTINEL:
                if not self.include_sentinels:
                    continue
                c = SENTINEL
            bisect.insort(self.values, c)


def _ceil_index(q: float, n: int) -> int:
    # guard against q * n landing a hair above an integer
    return max(1, math.ceil(round(q * n, 9)))


def update_thresholds(history: CostHistory, new_costs, alpha: float = 0.08
                      ) -> Optional[TierThresholds]:
    """Insert ``new_costs`` and return the alpha / (1 - alpha) quantile thresholds.

    Indices follow the 1-based ceiling convention. Returns None while the
    history is empty.
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    history.insert(new_costs)
    n = history.n
    if n == 0:
        return None
    a = history.values
    return TierThresholds(a[_ceil_index(alpha, n) - 1], a[_ceil_index(1.0 - alpha, n) - 1], alpha)


def tier_of(cost: float, th: Optional[TierThresholds]) -> Tier:
    if not math.isfinite(cost) or cost >= SENTINEL:
        return Tier.LOW
    if th is None:
        return Tier.MEDIUM
    if cost < th.c1:
        return Tier.HIGH
    if cost > th.c2:
        return Tier.LOW
    return Tier.MEDIUM


def tier_boxes(result: MatchResult, pseudo: Sequence[Box3D], th: Optional[TierThresholds]
               ) -> list[tuple[Box3D, Tier]]:
    """Label each pseudo-label High / Medium / Low from its matched cost."""
    return [(box, tier_of(float(c), th)) for box, c in zip(pseudo, result.per_box_cost)]
