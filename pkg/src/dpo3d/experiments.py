"""Experiment harness: seeded data, pretraining, ablation rows and sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import detector as det
from .config import RunConfig, with_adapt, with_seed
from .evaluation import EvalResult, closed_gap, evaluate
from .loop import AdaptConfig, AdaptReport, adapt_stream, plateau_c_stop
from .scene_gen import apply_shift, generate_dataset, make_stream

# stream tags for derive_seed
_SOURCE, _SOURCE_EVAL, _STREAM, _ORACLE, _ORACLE_SHIFT = 1, 2, 3, 4, 5

# (row name, AdaptConfig toggles); the first row runs inference only
VARIANTS = (
    ("no-adapt", dict(adapt=False)),
    ("self-training", dict(perturb_weights=False, perturb_inputs=False, use_matcher=False)),
    ("+weights", dict(perturb_weights=True, perturb_inputs=False, use_matcher=False)),
    ("+weights+inputs", dict(perturb_weights=True, perturb_inputs=True, use_matcher=False)),
    ("+weights+matcher", dict(perturb_weights=True, perturb_inputs=False, use_matcher=True)),
    ("dpo", dict(perturb_weights=True, perturb_inputs=True, use_matcher=True)),
)
ORACLE = "oracle"
CSV_COLUMNS = ("method", "ap_3d", "ap_3d_sd", "ap_bev", "ap_bev_sd",
               "closed_gap_3d", "closed_gap_bev", "stop_batch")
SWEEP_PARAMS = ("rho", "alpha", "gamma", "c_stop", "eta")


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


def source_scenes(cfg: RunConfig, seed: int):
    return generate_dataset(cfg.n_train, derive_seed(seed, _SOURCE), cfg.gen)


def source_eval_scenes(cfg: RunConfig, seed: int):
    return generate_dataset(cfg.n_source_eval, derive_seed(seed, _SOURCE_EVAL), cfg.gen)


def test_stream(cfg: RunConfig, seed: int):
    return make_stream(cfg.n_batches, cfg.batch_size, cfg.shift, derive_seed(seed, _STREAM), cfg.gen)


def oracle_scenes(cfg: RunConfig, seed: int):
    base = generate_dataset(cfg.n_train, derive_seed(seed, _ORACLE), cfg.gen)
    rng = np.random.default_rng(derive_seed(seed, _ORACLE_SHIFT))
    return [apply_shift(s, cfg.shift, int(k), cfg.gen)
            for s, k in zip(base, rng.integers(0, 2**31, len(base)))]


def pretrain_source(cfg: RunConfig, seed: int) -> det.Params:
    return det.pretrain(source_scenes(cfg, seed), replace(cfg.train, seed=seed))


def predict(params: det.Params, scenes, score_thresh: float = 0.1, nms_thresh: float = 0.1):
    """Inference-only predictions and ground truth keyed by scene index."""
    preds, gts = [], []
    for k, s in enumerate(scenes):
        meta = det.GridMeta.of(s.bev)
        preds.extend((k, sb) for sb in det.decode(det.forward(params, s.bev), meta,
                                                 score_thresh, nms_thresh))
        gts.extend((k, b) for b in s.gt_boxes)
    return preds, gts


def evaluate_params(params: det.Params, scenes, score_thresh: float = 0.1,
                    nms_thresh: float = 0.1) -> EvalResult:
    return evaluate(*predict(params, scenes, score_thresh, nms_thresh))


@dataclass
class RunResult:
    method: str
    seed: int
    ap_3d: float
    ap_bev: float
    stop_batch: Optional[int] = None
    report: Optional[AdaptReport] = field(default=None, repr=False)


def run_variant(theta_s: det.Params, stream, adapt_cfg: AdaptConfig, method: str, seed: int,
                on_batch=None) -> RunResult:
    _, rep = adapt_stream(theta_s, stream, adapt_cfg, on_batch=on_batch)
    return RunResult(method, seed, rep.metrics.ap_3d * 100, rep.metrics.ap_bev * 100,
                     rep.stop_batch, rep)


def run_oracle(cfg: RunConfig, seed: int, stream) -> RunResult:
    params = det.pretrain(oracle_scenes(cfg, seed), replace(cfg.train, seed=seed))
    r = evaluate_params(params, [s for b in stream for s in b],
                        cfg.adapt.eval_score_thresh, cfg.adapt.nms_thresh)
    return RunResult(ORACLE, seed, r.ap_3d * 100, r.ap_bev * 100)


@dataclass
class AblationTable:
    runs: list                      # RunResult per (variant, seed)
    seeds: tuple
    params: dict = field(default_factory=dict, repr=False)    # seed -> source model

    def rows(self) -> list[dict]:
        methods = [ORACLE] + [name for name, _ in VARIANTS]
        by = {m: [r for r in self.runs if r.method == m] for m in methods}
        base3 = _mean([r.ap_3d for r in by["no-adapt"]])
        baseb = _mean([r.ap_bev for r in by["no-adapt"]])
        orc3 = _mean([r.ap_3d for r in by[ORACLE]])
        orcb = _mean([r.ap_bev for r in by[ORACLE]])
        out = []
        for m in methods:
            runs = by[m]
            if not runs:
                continue
            a3 = [r.ap_3d for r in runs]
            ab = [r.ap_bev for r in runs]
            stops = [r.stop_batch for r in runs]
            out.append({
                "method": m,
                "ap_3d": _mean(a3), "ap_3d_sd": _sd(a3),
                "ap_bev": _mean(ab), "ap_bev_sd": _sd(ab),
                "closed_gap_3d": _gap(_mean(a3), base3, orc3),
                "closed_gap_bev": _gap(_mean(ab), baseb, orcb),
                "stop_batch": ";".join("none" if s is None else str(s) for s in stops),
            })
        return out

    def mean_ap_3d(self, method: str) -> float:
        return _mean([r.ap_3d for r in self.runs if r.method == method])

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), CSV_COLUMNS)

    def runs_csv(self) -> str:
        rows = [{"method": r.method, "seed": r.seed, "ap_3d": r.ap_3d, "ap_bev": r.ap_bev,
                 "stop_batch": "none" if r.stop_batch is None else r.stop_batch}
                for r in self.runs]
        return rows_to_csv(rows, ("method", "seed", "ap_3d", "ap_bev", "stop_batch"))


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def _sd(xs) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def _gap(m: float, n: float, o: float) -> float:
    try:
        return closed_gap(m, n, o)
    except ZeroDivisionError:
        return float("nan")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def run_ablation(cfg: RunConfig, seeds: Optional[Sequence[int]] = None,
                 variants=VARIANTS, with_oracle: bool = True, log=None,
                 pretrained: Optional[dict] = None) -> AblationTable:
    """Pretrain once per seed, then run every variant on that seed's stream.

    ``pretrained`` maps seeds to source models to reuse instead of training.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    runs, models = [], {}
    for seed in seeds:
        if pretrained and seed in pretrained:
            theta_s = pretrained[seed]
        else:
            theta_s = pretrain_source(cfg, seed)
        models[seed] = theta_s
        stream = test_stream(cfg, seed)
        if with_oracle:
            runs.append(run_oracle(cfg, seed, stream))
        for name, toggles in variants:
            r = run_variant(theta_s, stream, replace(cfg.adapt, **toggles), name, seed)
            runs.append(r)
            if log:
                log(f"seed {seed} {name}: AP3D {r.ap_3d:.2f} AP_BEV {r.ap_bev:.2f}")
    return AblationTable(runs, seeds, models)


def run_sweep(cfg: RunConfig, param: str, values: Sequence[float],
              theta_s: Optional[det.Params] = None) -> str:
    """Full DPO once per value on the identical stream; returns the CSV text."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if theta_s is None:
        theta_s = pretrain_source(cfg, cfg.seed)
    stream = test_stream(cfg, cfg.seed)
    rows = []
    for v in values:
        run_cfg = with_adapt(cfg, **{param: float(v)})
        r = run_variant(theta_s, stream, run_cfg.adapt, "dpo", cfg.seed)
        rows.append({"param": param, "value": float(v), "ap_3d": r.ap_3d, "ap_bev": r.ap_bev,
                     "stop_batch": "none" if r.stop_batch is None else r.stop_batch})
    return rows_to_csv(rows, ("param", "value", "ap_3d", "ap_bev", "stop_batch"))


@dataclass
class EarlyStopResult:
    seed: int
    c_stop: float
    stop_batch: Optional[int]
    n_batches: int
    ap_no_adapt: float
    ap_full: float
    ap_stopped: float

    @property
    def retained(self) -> float:
        """Share of the full-run AP_3D gain kept by the early-stopped run."""
        gain = self.ap_full - self.ap_no_adapt
        if gain <= 0:
            return float("nan")
        return (self.ap_stopped - self.ap_no_adapt) / gain


def calibrate_early_stop(cfg: RunConfig, seed: int, theta_s: Optional[det.Params] = None,
                         stream=None, full: Optional[RunResult] = None,
                         no_adapt: Optional[RunResult] = None) -> EarlyStopResult:
    """Pick c_stop at the first plateau of a never-stopping run, then rerun with it."""
    if theta_s is None:
        theta_s = pretrain_source(cfg, seed)
    if stream is None:
        stream = test_stream(cfg, seed)
    base = replace(cfg.adapt, perturb_weights=True, perturb_inputs=True, use_matcher=True)
    if full is None:
        full = run_variant(theta_s, stream, replace(base, c_stop=-1.0), "dpo", seed)
    if no_adapt is None:
        no_adapt = run_variant(theta_s, stream, replace(base, adapt=False), "no-adapt", seed)
    trace = [r.c_ema for r in full.report.records]
    c_stop = plateau_c_stop(trace)
    stopped = run_variant(theta_s, stream, replace(base, c_stop=c_stop), "dpo-stop", seed)
    return EarlyStopResult(seed, c_stop, stopped.stop_batch, len(stream),
                           no_adapt.ap_3d, full.ap_3d, stopped.ap_3d)
