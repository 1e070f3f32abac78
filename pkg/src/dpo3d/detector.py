"""Toy dense BEV detector: a per-cell two-layer tanh perceptron.

Each cell's C-dim feature maps to 8 outputs
``[objectness logit, dcx, dcy, cz, log dx, log dy, log dz, yaw]``. The
backward pass is written out by hand and returns gradients with respect to
both the parameters and the input grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .geom3d import Box3D, ScoredBox, priority_order, wrap_angles
from .matcher import Tier

N_OUT = 8
N_REG = 7
SMOOTH_L1_BETA = 1.0
LOG_DIM_CLIP = 4.0


class NoSupervision(Exception):
    """Raised when a target map has no positive or negative cell."""


@dataclass
class Params:
    vector: np.ndarray
    channels: int
    hidden: int = 16

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.size(self.channels, self.hidden),):
            raise ValueError("parameter vector length does not match (channels, hidden)")

    @staticmethod
    def size(channels: int, hidden: int) -> int:
        return channels * hidden + hidden + hidden * N_OUT + N_OUT

    def _slices(self):
        C, Hh = self.channels, self.hidden
        a = C * Hh
        b = a + Hh
        c = b + Hh * N_OUT
        return (slice(0, a), slice(a, b), slice(b, c), slice(c, c + N_OUT))

    @property
    def W1(self) -> np.ndarray:
        return self.vector[self._slices()[0]].reshape(self.channels, self.hidden)

    @property
    def b1(self) -> np.ndarray:
        return self.vector[self._slices()[1]]

    @property
    def W2(self) -> np.ndarray:
        return self.vector[self._slices()[2]].reshape(self.hidden, N_OUT)

    @property
    def b2(self) -> np.ndarray:
        return self.vector[self._slices()[3]]

    def with_vector(self, v: np.ndarray) -> "Params":
        return Params(np.array(v, dtype=np.float64), self.channels, self.hidden)

    def copy(self) -> "Params":
        return self.with_vector(self.vector.copy())

    @classmethod
    def from_parts(cls, W1, b1, W2, b2) -> "Params":
        W1 = np.asarray(W1, dtype=np.float64)
        vec = np.concatenate([W1.ravel(), np.ravel(b1), np.ravel(W2), np.ravel(b2)])
        return cls(vec, W1.shape[0], W1.shape[1])

    @classmethod
    def zeros(cls, channels: int, hidden: int = 16) -> "Params":
        return cls(np.zeros(cls.size(channels, hidden)), channels, hidden)


def init_params(channels: int, hidden: int = 16, seed: int = 0) -> Params:
    rng = np.random.default_rng([int(seed), 0x1417])
    W1 = rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, hidden))
    W2 = rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(hidden, N_OUT))
    b2 = np.array([-4.0, 0.0, 0.0, 0.8, math.log(4.0), math.log(1.8), math.log(1.6), 0.0])
    return Params.from_parts(W1, np.zeros(hidden), W2, b2)


@dataclass(frozen=True)
class GridMeta:
    height: int
    width: int
    cell_size: float = 1.0

    @classmethod
    def of(cls, bev) -> "GridMeta":
        vals = getattr(bev, "values", bev)
        return cls(vals.shape[-3], vals.shape[-2], float(getattr(bev, "cell_size", 1.0)))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) centre grids of shape H x W."""
        xs = (np.arange(self.width) + 0.5) * self.cell_size
        ys = (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)


@dataclass
class RawPrediction:
    out: np.ndarray        # (..., H, W, 8)
    hidden: np.ndarray     # (..., H, W, Hh) tanh activations
    inputs: np.ndarray     # (..., H, W, C) as float64


@dataclass
class TargetMap:
    cls: np.ndarray   # int8 in {1 positive, 0 negative, -1 ignore}
    reg: np.ndarray   # float64 (H, W, 7), meaningful only where positive

    @property
    def n_positive(self) -> int:
        return int((self.cls == 1).sum())

    @property
    def n_negative(self) -> int:
        return int((self.cls == 0).sum())


@dataclass
class GradPair:
    grad_params: np.ndarray
    grad_input: np.ndarray


def _as_array(bev) -> np.ndarray:
    if isinstance(bev, (list, tuple)):
        return np.stack([np.asarray(getattr(b, "values", b), dtype=np.float64) for b in bev])
    return np.asarray(getattr(bev, "values", bev), dtype=np.float64)


def forward(params: Params, bev) -> RawPrediction:
    """Apply the per-cell head to a grid (H,W,C) or a batch (B,H,W,C)."""
    x = _as_array(bev)
    if x.shape[-1] != params.channels:
        raise ValueError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    h = np.tanh(x @ params.W1 + params.b1)
    out = h @ params.W2 + params.b2
    return RawPrediction(out, h, x)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode(raw: RawPrediction, grid_meta: GridMeta, score_thresh: float = 0.5,
           nms_thresh: float = 0.1) -> list[ScoredBox]:
    """Threshold objectness, convert cells to boxes, then suppress overlaps."""
    if not (0 < score_thresh < 1 and 0 < nms_thresh < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    out = raw.out
    if out.ndim != 3:
        raise ValueError("decode expects a single-scene prediction (H, W, 8)")
    scores = _sigmoid(out[..., 0])
    ii, jj = np.nonzero(scores >= score_thresh)
    if ii.size == 0:
        return []
    cs = grid_meta.cell_size
    o = out[ii, jj]
    cx = (jj + 0.5 + o[:, 1]) * cs
    cy = (ii + 0.5 + o[:, 2]) * cs
    cz = o[:, 3] * cs
    dims = np.exp(np.clip(o[:, 4:7], -LOG_DIM_CLIP, LOG_DIM_CLIP))
    yaw = wrap_angles(o[:, 7])
    sc = scores[ii, jj]
    arr = np.column_stack([cx, cy, cz, dims, yaw])
    order = priority_order(sc, cx, cy)
    keep = order[kernels.nms_sorted(arr[order], nms_thresh)]
    return [ScoredBox(Box3D(*map(float, arr[k])), float(min(1.0, sc[k]))) for k in keep]


def decode_boxes(raw: RawPrediction, grid_meta: GridMeta, score_thresh: float,
                 nms_thresh: float) -> list[Box3D]:
    return [sb.box for sb in decode(raw, grid_meta, score_thresh, nms_thresh)]


def regression_target(box: Box3D, px: np.ndarray, py: np.ndarray, cell_size: float) -> np.ndarray:
    n = px.shape[0]
    t = np.empty((n, N_REG))
    t[:, 0] = (box.cx - px) / cell_size
    t[:, 1] = (box.cy - py) / cell_size
    t[:, 2] = box.cz / cell_size
    t[:, 3] = math.log(box.dx)
    t[:, 4] = math.log(box.dy)
    t[:, 5] = math.log(box.dz)
    t[:, 6] = box.yaw
    return t


def assign_targets(boxes: Sequence[tuple[Box3D, Tier]], grid_meta: GridMeta) -> TargetMap:
    """Dense supervision: High -> positive, Medium -> ignore, else negative.

    A cell inside several footprints follows the highest-tier box, then the
    box with the nearest centre.
    """
    H, W, cs = grid_meta.height, grid_meta.width, grid_meta.cell_size
    best_rank = np.full((H, W), -1, dtype=np.int64)
    best_dist = np.full((H, W), np.inf)
    best_idx = np.full((H, W), -1, dtype=np.int64)
    for k, (box, tier) in enumerate(boxes):
        r = 0.5 * math.hypot(box.dx, box.dy)
        j0 = max(0, int(math.floor((box.cx - r) / cs - 0.5)))
        j1 = min(W, int(math.ceil((box.cx + r) / cs + 0.5)))
        i0 = max(0, int(math.floor((box.cy - r) / cs - 0.5)))
        i1 = min(H, int(math.ceil((box.cy + r) / cs + 0.5)))
        if j0 >= j1 or i0 >= i1:
            continue
        px, py = np.meshgrid((np.arange(j0, j1) + 0.5) * cs, (np.arange(i0, i1) + 0.5) * cs)
        ox, oy = px - box.cx, py - box.cy
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        u = ox * c + oy * s
        v = -ox * s + oy * c
        inside = (np.abs(u) < 0.5 * box.dx) & (np.abs(v) < 0.5 * box.dy)
        dist = np.hypot(ox, oy)
        rank = int(tier)
        sub_rank = best_rank[i0:i1, j0:j1]
        sub_dist = best_dist[i0:i1, j0:j1]
        better = inside & ((rank > sub_rank) | ((rank == sub_rank) & (dist < sub_dist)))
        sub_rank[better] = rank
        sub_dist[better] = dist[better]
        best_idx[i0:i1, j0:j1][better] = k
    cls = np.zeros((H, W), dtype=np.int8)
    cls[best_rank == int(Tier.MEDIUM)] = -1
    reg = np.zeros((H, W, N_REG))
    pos = best_rank == int(Tier.HIGH)
    cls[pos] = 1
    px, py = grid_meta.cell_centers()
    for k in np.unique(best_idx[pos]):
        sel = pos & (best_idx == k)
        reg[sel] = regression_target(boxes[int(k)][0], px[sel], py[sel], cs)
    return TargetMap(cls, reg)


def ground_truth_targets(gt_boxes: Sequence[Box3D], grid_meta: GridMeta) -> TargetMap:
    return assign_targets([(b, Tier.HIGH) for b in gt_boxes], grid_meta)


def _stack_targets(targets) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(targets, TargetMap):
        return targets.cls, targets.reg
    return np.stack([t.cls for t in targets]), np.stack([t.reg for t in targets])


def _smooth_l1(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    small = a < SMOOTH_L1_BETA
    val = np.where(small, 0.5 * d * d / SMOOTH_L1_BETA, a - 0.5 * SMOOTH_L1_BETA)
    grad = np.where(small, d / SMOOTH_L1_BETA, np.sign(d))
    return val, grad


def _loss_and_dout(out: np.ndarray, cls: np.ndarray, reg: np.ndarray, reg_weight: float):
    """Loss over pooled cells of the (batch of) maps, and dLoss/dOut."""
    if out.shape[:-1] != cls.shape:
        raise ValueError("prediction and target shapes differ")
    sup = cls >= 0
    pos = cls == 1
    n_sup = int(sup.sum())
    if n_sup == 0:
        raise NoSupervision("target map has no supervised cell")
    n_pos = int(pos.sum())
    logit = out[..., 0]
    y = pos.astype(np.float64)
    # softplus(z) - y z, stable for large |z|
    bce = np.logaddexp(0.0, logit) - y * logit
    loss = float(bce[sup].sum()) / n_sup
    dout = np.zeros_like(out)
    dout[..., 0] = np.where(sup, _sigmoid(logit) - y, 0.0) / n_sup
    if n_pos:
        d = out[..., 1:][pos] - reg[pos]
        val, grad = _smooth_l1(d)
        loss += reg_weight * float(val.sum()) / n_pos
        dreg = np.zeros(out.shape[:-1] + (N_REG,))
        dreg[pos] = reg_weight * grad / n_pos
        dout[..., 1:] = dreg
    return loss, dout


def detection_loss(raw: RawPrediction, targets, reg_weight: float = 1.0) -> float:
    """Mean BCE over supervised cells plus weighted smooth-L1 on positives.

    The regression term is the per-cell sum over the 7 channels averaged over
    positive cells. Raises NoSupervision if nothing is supervised.
    """
    cls, reg = _stack_targets(targets)
    loss, _ = _loss_and_dout(raw.out, cls, reg, reg_weight)
    return loss


def backward(params: Params, bev, targets, reg_weight: float = 1.0
             ) -> tuple[float, GradPair]:
    raw = forward(params, bev)
    cls, reg = _stack_targets(targets)
    loss, dout = _loss_and_dout(raw.out, cls, reg, reg_weight)
    C, Hh = params.channels, params.hidden
    h = raw.hidden.reshape(-1, Hh)
    do = dout.reshape(-1, N_OUT)
    x = raw.inputs.reshape(-1, C)
    dW2 = h.T @ do
    db2 = do.sum(axis=0)
    da = (do @ params.W2.T) * (1.0 - h * h)
    dW1 = x.T @ da
    db1 = da.sum(axis=0)
    dx = (da @ params.W1.T).reshape(raw.inputs.shape)
    g = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    return loss, GradPair(g, dx)


def loss_at(params: Params, bev, targets, reg_weight: float = 1.0) -> float:
    return detection_loss(forward(params, bev), targets, reg_weight)


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 16
    epochs: int = 30
    lr: float = 1.0
    lr_final: float = 0.05
    batch_size: int = 8
    reg_weight: float = 1.0
    seed: int = 0


def pretrain(dataset, cfg: TrainConfig = TrainConfig()) -> Params:
    """Plain minibatch SGD on ground-truth targets; deterministic in ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    meta = GridMeta.of(dataset[0].bev)
    channels = dataset[0].bev.values.shape[-1]
    params = init_params(channels, cfg.hidden, cfg.seed)
    if cfg.epochs == 0:
        return params
    x_all = np.stack([s.bev.values.astype(np.float64) for s in dataset])
    tg = [ground_truth_targets(s.gt_boxes, meta) for s in dataset]
    cls_all = np.stack([t.cls for t in tg])
    reg_all = np.stack([t.reg for t in tg])
    rng = np.random.default_rng([int(cfg.seed), 0x7A1])
    vec = params.vector.copy()
    n = len(dataset)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            # cosine decay from lr to lr_final
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * step / total))
            step += 1
            idx = np.sort(order[start:start + cfg.batch_size])
            p = params.with_vector(vec)
            try:
                _, grads = backward(p, x_all[idx], TargetMap(cls_all[idx], reg_all[idx]),
                                    cfg.reg_weight)
            except NoSupervision:
                continue
            vec = vec - lr * grads.grad_params
    return params.with_vector(vec)
