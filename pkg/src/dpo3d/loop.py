"""Single-pass streaming adaptation with an early cutoff on matching cost."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import detector as det
from . import matcher as mt
from .evaluation import EvalResult, evaluate
from .parallel import ordered_map
from .perturb import StepRecord, compute_perturbation, dpo_step


class NoBoxes(Exception):
    """A batch produced no pseudo-labels, so its mean cost is undefined."""


@dataclass(frozen=True)
class AdaptConfig:
    rho: float = 1e-4
    rho_z: Optional[float] = None
    alpha: float = 0.08
    gamma: float = 0.5
    eta: float = 1e-3
    c_stop: float = -1.0
    pseudo_score_thresh: float = 0.5
    eval_score_thresh: float = 0.1
    nms_thresh: float = 0.1
    w_iou: float = 1.0
    w_l1: float = 1.0
    reg_weight: float = 1.0
    perturb_weights: bool = True
    perturb_inputs: bool = True
    use_matcher: bool = True
    include_sentinels: bool = True
    adapt: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.rho_z is not None and not self.rho_z > 0:
            raise ValueError("rho_z must be > 0")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not 0 < self.eval_score_thresh <= self.pseudo_score_thresh < 1:
            raise ValueError("need 0 < eval_score_thresh <= pseudo_score_thresh < 1")
        if not 0 < self.nms_thresh < 1:
            raise ValueError("nms_thresh must lie in (0, 1)")


@dataclass
class EmaState:
    gamma: float = 0.5
    c_stop: float = -1.0
    c_ema: float = float("nan")
    t: int = 0
    stopped: bool = False


def batch_mean_cost(result: mt.MatchResult) -> float:
    """Mean matched cost with infinite entries counted at the sentinel value."""
    costs = np.asarray(result.per_box_cost, dtype=np.float64)
    if costs.size == 0:
        raise NoBoxes("no pseudo-labels in batch")
    return float(np.where(np.isfinite(costs), np.minimum(costs, mt.SENTINEL), mt.SENTINEL).mean())


def update_ema(state: EmaState, c_box_t: float) -> EmaState:
    if state.stopped:
        raise ValueError("EMA is frozen after the stop")
    if state.t == 0:
        c = float(c_box_t)
    else:
        # gamma * c + (1 - gamma) * c_ema, arranged so a constant input is an exact fixed point
        c = state.c_ema + state.gamma * (c_box_t - state.c_ema)
    return replace(state, c_ema=c, t=state.t + 1)


def should_stop(state: EmaState) -> bool:
    if state.t < 1:
        raise ValueError("no cost observed yet")
    return state.c_ema <= state.c_stop


@dataclass
class BatchRecord:
    t: int
    mode: str                      # "adapt", "skipped" or "inference"
    n_pseudo: int = 0
    n_perturbed: int = 0
    mean_cost: Optional[float] = None
    c_ema: Optional[float] = None
    n_high: int = 0
    n_medium: int = 0
    n_low: int = 0
    loss_clean: Optional[float] = None
    loss_perturbed: Optional[float] = None
    grad_norm: Optional[float] = None
    reason: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


@dataclass
class AdaptReport:
    records: list = field(default_factory=list)
    stop_batch: Optional[int] = None
    metrics: Optional[EvalResult] = None
    predictions: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        m = self.metrics
        return {
            "stop_batch": self.stop_batch,
            "n_batches": len(self.records),
            "metrics": None if m is None else {
                "ap_3d": m.ap_3d, "ap_bev": m.ap_bev, "tp": m.tp, "fp": m.fp, "fn": m.fn},
            "records": [r.to_dict() for r in self.records],
        }


def _scene_values(scene) -> np.ndarray:
    return np.asarray(getattr(getattr(scene, "bev", scene), "values", scene), dtype=np.float64)


def _decode_batch(raw: det.RawPrediction, meta: det.GridMeta, thresh: float, nms_thresh: float):
    def one(b):
        return det.decode(det.RawPrediction(raw.out[b], raw.hidden[b], raw.inputs[b]),
                          meta, thresh, nms_thresh)
    return ordered_map(one, range(raw.out.shape[0]))


def adapt_stream(theta_s: det.Params, stream: Sequence[Sequence], cfg: AdaptConfig = AdaptConfig(),
                 on_batch: Optional[Callable[[BatchRecord], None]] = None,
                 evaluate_online: bool = True) -> tuple[det.Params, AdaptReport]:
    """Adapt ``theta_s`` over the stream, predicting every batch before its update.

    Returns the final parameters and a report whose metrics score the online
    predictions against the scenes' ground truth.
    """
    params = theta_s.copy()
    history = mt.CostHistory(include_sentinels=cfg.include_sentinels)
    ema = EmaState(gamma=cfg.gamma, c_stop=cfg.c_stop)
    report = AdaptReport()
    preds, gts = [], []
    sid = 0
    for t, batch in enumerate(stream):
        z = np.stack([_scene_values(s) for s in batch])
        meta = det.GridMeta.of(batch[0].bev)
        raw = det.forward(params, z)
        scored = _decode_batch(raw, meta, cfg.eval_score_thresh, cfg.nms_thresh)
        for b, scene in enumerate(batch):
            preds.extend((sid + b, sb) for sb in scored[b])
            gts.extend((sid + b, gb) for gb in scene.gt_boxes)
        sid += len(batch)

        if not cfg.adapt or ema.stopped:
            rec = BatchRecord(t, "inference")
            report.records.append(rec)
            if on_batch:
                on_batch(rec)
            continue

        pseudo = [[sb.box for sb in sc if sb.score >= cfg.pseudo_score_thresh] for sc in scored]
        n_pseudo = sum(len(p) for p in pseudo)
        rec = BatchRecord(t, "adapt", n_pseudo=n_pseudo)
        if n_pseudo == 0:
            rec.mode, rec.reason = "skipped", "no pseudo-labels"
            report.records.append(rec)
            if on_batch:
                on_batch(rec)
            continue

        raw_targets = [det.assign_targets([(b, mt.Tier.HIGH) for b in p], meta) for p in pseudo]
        targets = raw_targets
        if cfg.use_matcher:
            pert = compute_perturbation(params, z, raw_targets, cfg.rho, cfg.rho_z, cfg.reg_weight)
            eps_w = pert.epsilon_w if cfg.perturb_weights else 0.0
            eps_z = pert.epsilon_z if cfg.perturb_inputs else 0.0
            raw_p = det.forward(params.with_vector(params.vector + eps_w), z + eps_z)
            perturbed = [[sb.box for sb in sc] for sc in
                         _decode_batch(raw_p, meta, cfg.pseudo_score_thresh, cfg.nms_thresh)]
            results = ordered_map(lambda b: mt.match_predictions(pseudo[b], perturbed[b],
                                                                 cfg.w_iou, cfg.w_l1),
                                  range(len(batch)))
            all_costs = np.concatenate([r.per_box_cost for r in results])
            # the current batch joins the history before its own boxes are tiered
            th = mt.update_thresholds(history, all_costs, cfg.alpha)
            tiered = [mt.tier_boxes(r, p, th) for r, p in zip(results, pseudo)]
            targets = [det.assign_targets(tb, meta) for tb in tiered]
            tiers = [tier for tb in tiered for _, tier in tb]
            rec.n_perturbed = sum(len(p) for p in perturbed)
            rec.n_high = tiers.count(mt.Tier.HIGH)
            rec.n_medium = tiers.count(mt.Tier.MEDIUM)
            rec.n_low = tiers.count(mt.Tier.LOW)
            rec.mean_cost = batch_mean_cost(mt.MatchResult(np.zeros(0), all_costs))
            if rec.n_high == 0:
                rec.mode, rec.reason = "skipped", "no supervision"
        else:
            rec.n_high = n_pseudo

        if rec.mode == "skipped":
            step = StepRecord(skipped=True, reason=rec.reason)
        else:
            new_params, step = dpo_step(params, z, targets, cfg.rho, cfg.eta,
                                        cfg.perturb_weights, cfg.perturb_inputs, cfg.rho_z,
                                        cfg.reg_weight)
        if step.skipped:
            rec.mode, rec.reason = "skipped", step.reason
        else:
            if not (math.isfinite(step.loss_clean) and math.isfinite(step.loss_perturbed)
                    and np.all(np.isfinite(new_params.vector))):
                raise FloatingPointError(f"non-finite loss or parameters at batch {t}")
            params = new_params
            rec.loss_clean = step.loss_clean
            rec.loss_perturbed = step.loss_perturbed
            rec.grad_norm = step.grad_norm

        if rec.mean_cost is not None:
            ema = update_ema(ema, rec.mean_cost)
            rec.c_ema = ema.c_ema
            if should_stop(ema):
                ema = replace(ema, stopped=True)
                report.stop_batch = t
        report.records.append(rec)
        if on_batch:
            on_batch(rec)

    if evaluate_online:
        report.metrics = evaluate(preds, gts)
    report.predictions = preds
    return params, report


def plateau_c_stop(c_ema_trace: Sequence[float], rel_drop: float = 0.05, patience: int = 2
                   ) -> float:
    """EMA level at the first plateau of a pilot run.

    The plateau starts at the first batch after which the EMA fails to drop
    by more than ``rel_drop`` (relative) for ``patience`` consecutive
    batches; the returned threshold is the EMA at that batch.
    """
    trace = [c for c in c_ema_trace if c is not None and math.isfinite(c)]
    if not trace:
        raise ValueError("empty EMA trace")
    flat = 0
    for k in range(1, len(trace)):
        if trace[k] > trace[k - 1] * (1.0 - rel_drop):
            flat += 1
            if flat >= patience:
                return trace[k - patience]
        else:
            flat = 0
    return trace[-1]
