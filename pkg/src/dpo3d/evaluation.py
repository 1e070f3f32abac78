"""KITTI-style average precision (40 recall positions) and the closed gap."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .geom3d import Box3D, ScoredBox, bev_iou_matrix, iou_3d_matrix

N_RECALL_POINTS = 40
RECALL_POSITIONS = np.arange(1, N_RECALL_POINTS + 1) / N_RECALL_POINTS


@dataclass
class APCurve:
    ap: float
    precision: np.ndarray = field(repr=False)   # interpolated, at RECALL_POSITIONS
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalResult:
    ap_3d: float
    ap_bev: float
    precision_3d: np.ndarray = field(repr=False)
    precision_bev: np.ndarray = field(repr=False)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _group(items):
    out = defaultdict(list)
    for sid, obj in items:
        out[sid].append(obj)
    return out


def average_precision(preds: Sequence[tuple[Hashable, ScoredBox]],
                      gts: Sequence[tuple[Hashable, Box3D]],
                      iou_fn: Callable = iou_3d_matrix,
                      iou_thresh: float = 0.7) -> APCurve:
    """Greedy per-scene matching then 40-point interpolated AP.

    ``iou_fn`` maps two box lists to an IoU matrix; pass ``bev_iou_matrix``
    for AP_BEV.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    n_gt = len(gts)
    if n_gt == 0:
        ap = 1.0 if not preds else 0.0
        return APCurve(ap, np.full(N_RECALL_POINTS, ap), 0, len(preds), 0)
    gt_by_scene = _group(gts)
    pred_by_scene = _group(preds)
    scores, hits = [], []
    for sid, plist in pred_by_scene.items():
        glist = gt_by_scene.get(sid, [])
        order = sorted(range(len(plist)), key=lambda k: (-plist[k].score, k))
        plist = [plist[k] for k in order]
        iou = iou_fn([p.box for p in plist], glist) if glist else np.zeros((len(plist), 0))
        taken = np.zeros(len(glist), dtype=bool)
        for k, p in enumerate(plist):
            hit = False
            if glist:
                cand = np.where(taken, -1.0, iou[k])
                j = int(np.argmax(cand))
                if cand[j] >= iou_thresh:
                    taken[j] = True
                    hit = True
            scores.append(p.score)
            hits.append(hit)
    scores = np.asarray(scores)
    hits = np.asarray(hits, dtype=bool)
    tp_total = int(hits.sum())
    fp_total = int((~hits).sum())
    if scores.size == 0:
        return APCurve(0.0, np.zeros(N_RECALL_POINTS), 0, 0, n_gt)
    # stable sort keeps ties in scene order, which is deterministic
    order = np.argsort(-scores, kind="stable")
    h = hits[order]
    tp = np.cumsum(h)
    fp = np.cumsum(~h)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # interpolated precision: best precision at any recall >= r
    best_after = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros(N_RECALL_POINTS)
    for k, r in enumerate(RECALL_POSITIONS):
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < recall.size:
            interp[k] = best_after[idx]
    return APCurve(float(interp.mean()), interp, tp_total, fp_total, n_gt - tp_total)


def evaluate(preds, gts, iou_thresh: float = 0.7) -> EvalResult:
    r3 = average_precision(preds, gts, iou_3d_matrix, iou_thresh)
    rb = average_precision(preds, gts, bev_iou_matrix, iou_thresh)
    return EvalResult(r3.ap, rb.ap, r3.precision, rb.precision, r3.tp, r3.fp, r3.fn)


def closed_gap(ap_method: float, ap_noadapt: float, ap_oracle: float) -> float:
    """Share of the no-adapt -> oracle gap closed, in percent."""
    denom = ap_oracle - ap_noadapt
    if denom == 0:
        raise ZeroDivisionError("oracle and no-adapt AP coincide")
    return (ap_method - ap_noadapt) / denom * 100.0
