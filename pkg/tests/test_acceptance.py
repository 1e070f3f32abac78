"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from dpo3d import config, kernels, loop, perturb
from dpo3d import detector as det
from dpo3d import experiments as ex
from dpo3d.evaluation import closed_gap
from dpo3d.geom3d import Box3D, bev_iou
from dpo3d.matcher import INFINITE, CostHistory, Tier, tier_of, update_thresholds
from dpo3d.scene_gen import GenConfig, generate_scene

from test_geom3d import mc_bev_iou

PRESET = "composite-heavy"
MARGIN_AP3D = 5.0


@pytest.fixture(scope="module")
def heavy():
    return config.load_preset(PRESET)


@pytest.fixture(scope="module")
def ablation(heavy):
    t0 = time.perf_counter()
    table = ex.run_ablation(heavy)
    return table, (time.perf_counter() - t0) / len(table.seeds)


def pseudo_targets(params, batch, cfg):
    """All-High targets from the confident detections, as the adaptation loop builds them."""
    meta = det.GridMeta.of(batch[0].bev)
    z = np.stack([s.bev.values.astype(np.float64) for s in batch])
    raw = det.forward(params, z)
    targets, n = [], 0
    for b in range(len(batch)):
        boxes = det.decode_boxes(det.RawPrediction(raw.out[b], raw.hidden[b], raw.inputs[b]),
                                 meta, cfg.pseudo_score_thresh, cfg.nms_thresh)
        n += len(boxes)
        targets.append(det.assign_targets([(bx, Tier.HIGH) for bx in boxes], meta))
    return z, targets, n


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


def test_01_gradient_correctness(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    gen = GenConfig(height=10, width=10, max_objects=2, margin=2.5, min_center_gap=4.0,
                    clutter_sigma=0.05)
    worst_w = worst_z = 0.0
    for trial in range(20):
        scene = generate_scene(int(rng.integers(2**31)), gen)
        p = det.init_params(gen.channels, 16, seed=trial)
        p.vector[:] += rng.normal(0, 0.3, p.vector.size)
        tiers = [Tier(int(t)) for t in rng.integers(0, 3, len(scene.gt_boxes))]
        targets = det.assign_targets(list(zip(scene.gt_boxes, tiers)),
                                     det.GridMeta.of(scene.bev))
        if targets.n_positive + targets.n_negative == 0:
            targets = det.ground_truth_targets(scene.gt_boxes, det.GridMeta.of(scene.bev))
        z = scene.bev.values.astype(np.float64)[None].copy()
        _, gp = det.backward(p, z, [targets])
        f = lambda: det.loss_at(p, z, [targets])
        worst_w = max(worst_w, rel_err(gp.grad_params, central_difference(f, p.vector, 1e-5)))
        worst_z = max(worst_z, rel_err(gp.grad_input, central_difference(f, z, 1e-5)))
    elapsed = time.perf_counter() - t0
    ok = worst_w < 1e-4 and worst_z < 1e-4 and elapsed < 30
    acceptance_log(1, "gradient correctness", ok,
                   f"max rel err params {worst_w:.2e}, inputs {worst_z:.2e}, {elapsed:.1f}s")
    assert ok


def test_02_perturbation_norms(heavy, ablation, monkeypatch, acceptance_log):
    table, _ = ablation
    seed = table.seeds[0]
    seen = []
    original = loop.compute_perturbation

    def recording(*args, **kwargs):
        pert = original(*args, **kwargs)
        seen.append(pert)
        return pert

    monkeypatch.setattr(loop, "compute_perturbation", recording)
    loop.adapt_stream(table.params[seed], ex.test_stream(heavy, seed), heavy.adapt)
    rho = heavy.adapt.rho
    worst_w = worst_z = 0.0
    n_w = n_z = 0
    for pert in seen:
        if not pert.degenerate_w:
            worst_w = max(worst_w, abs(np.linalg.norm(pert.epsilon_w) / rho - 1))
            n_w += 1
        for b in np.flatnonzero(~pert.degenerate_z):
            worst_z = max(worst_z, abs(np.linalg.norm(pert.epsilon_z[b]) / rho - 1))
            n_z += 1
    ok = n_w > 0 and n_z > 0 and worst_w < 1e-9 and worst_z < 1e-9
    acceptance_log(2, "perturbation norms", ok,
                   f"{n_w} weight / {n_z} input perturbations, max rel dev "
                   f"{worst_w:.1e} / {worst_z:.1e}")
    assert ok


def test_03_first_order_dominance(heavy, ablation, acceptance_log):
    t0 = time.perf_counter()
    table, _ = ablation
    seed = table.seeds[0]
    params = table.params[seed]
    rho, n_dirs = 1e-3, 50
    rng = np.random.default_rng(7)
    wins_w = wins_z = total = 0
    n_batches = 0
    for batch in ex.test_stream(heavy, seed):
        z, targets, n = pseudo_targets(params, batch, heavy.adapt)
        if n == 0:
            continue
        pert = perturb.compute_perturbation(params, z, targets, rho)
        if pert.degenerate_w or pert.degenerate_z.any():
            continue
        lw = det.loss_at(params.with_vector(params.vector + pert.epsilon_w), z, targets)
        lz = det.loss_at(params, z + pert.epsilon_z, targets)
        for _ in range(n_dirs):
            d = rng.standard_normal(params.vector.size)
            d *= rho / np.linalg.norm(d)
            wins_w += lw >= det.loss_at(params.with_vector(params.vector + d), z, targets)
            dz = rng.standard_normal(z.shape)
            dz *= rho / np.sqrt((dz.reshape(len(z), -1) ** 2).sum(1)).reshape(-1, 1, 1, 1)
            wins_z += lz >= det.loss_at(params, z + dz, targets)
            total += 1
        n_batches += 1
        if n_batches == 20:
            break
    elapsed = time.perf_counter() - t0
    fw, fz = wins_w / max(total, 1), wins_z / max(total, 1)
    ok = n_batches == 20 and fw >= 0.95 and fz >= 0.95 and elapsed < 120
    acceptance_log(3, "first-order dominance", ok,
                   f"{n_batches} batches, weights {fw:.3f}, inputs {fz:.3f}, {elapsed:.1f}s")
    assert ok


def test_04_hungarian_optimality(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    failures = 0
    checked = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        index = {tuple(p): k for k, p in enumerate(perms)}
        for _ in range(200):
            cost = rng.uniform(0, 1, size=(n, n))
            totals = cost[np.arange(n), perms].sum(axis=1)
            for mod in kernels.backends():
                got = index[tuple(int(v) for v in mod.hungarian(cost))]
                failures += totals[got] != totals.min()
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 60
    acceptance_log(4, "Hungarian optimality", ok,
                   f"{checked - failures}/{checked} exact optima, {elapsed:.1f}s")
    assert ok


def test_05_rotated_iou_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        a = Box3D(0.0, 0.0, 0.0, rng.uniform(1, 5), rng.uniform(0.5, 3), 1.0,
                  rng.uniform(-math.pi, math.pi))
        b = Box3D(rng.uniform(-2, 2), rng.uniform(-2, 2), 0.0, rng.uniform(1, 5),
                  rng.uniform(0.5, 3), 1.0, rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(bev_iou(a, b) - mc_bev_iou(a, b, 10**6, rng)))
    sq = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    quarter = bev_iou(sq, Box3D(0, 0, 0, 1, 1, 1, math.pi / 4))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and abs(quarter - 1 / math.sqrt(2)) < 1e-6 and elapsed < 120
    acceptance_log(5, "rotated IoU oracle", ok,
                   f"max |iou - MC| {worst:.4f}, pi/4 case {quarter:.9f}, {elapsed:.1f}s")
    assert ok


def test_06_ema_stop_contracts(heavy, ablation, acceptance_log):
    fixed = True
    for gamma in (0.1, 0.5, 0.9, 1.0):
        for c in (0.0, 0.731, 3.3e-7, 1e9):
            s = loop.EmaState(gamma=gamma)
            for _ in range(200):
                s = loop.update_ema(s, c)
                fixed &= s.c_ema == c

    table, _ = ablation
    seed = table.seeds[0]
    theta = table.params[seed]
    stream = ex.test_stream(heavy, seed)
    dpo = next(r for r in table.runs if r.method == "dpo" and r.seed == seed)
    j = next(r for r in dpo.report.records if r.c_ema is not None)
    # c_stop equal to the first EMA value stops right there; one ulp below does not
    out, rep = loop.adapt_stream(theta, stream, replace(heavy.adapt, c_stop=j.c_ema))
    k = rep.stop_batch
    below = math.nextafter(j.c_ema, -math.inf)
    _, rep_below = loop.adapt_stream(theta, stream, replace(heavy.adapt, c_stop=below))
    inclusive = k == j.t and rep_below.stop_batch != j.t
    prefix, _ = loop.adapt_stream(theta, stream[:j.t + 1], replace(heavy.adapt, c_stop=j.c_ema))
    frozen = (out.vector.tobytes() == prefix.vector.tobytes()
              and out.vector.tobytes() != theta.vector.tobytes()
              and all(r.mode == "inference" for r in rep.records[j.t + 1:]))
    ok = fixed and inclusive and frozen
    acceptance_log(6, "EMA and stop contracts", ok,
                   f"fixed point {fixed}, stop at batch {k} for c_stop = c_ema[{j.t}], "
                   f"frozen after stop {frozen}")
    assert ok


def test_07_quantile_tiering(acceptance_log):
    rng = np.random.default_rng(0)
    costs = rng.gamma(2.0, 1.0, 10_000)
    costs[rng.random(10_000) < 0.05] = INFINITE
    th = update_thresholds(CostHistory(), costs, alpha=0.08)
    tiers = np.array([tier_of(float(c), th) for c in costs])
    frac_high = float(np.mean(tiers == Tier.HIGH))
    inf_low = bool(np.all(tiers[~np.isfinite(costs)] == Tier.LOW))
    ok = abs(frac_high - 0.08) <= 0.01 and inf_low
    acceptance_log(7, "quantile tiering", ok,
                   f"High fraction {frac_high:.4f}, INFINITE always Low {inf_low}")
    assert ok


def test_08_ablation_ordering(ablation, acceptance_log):
    table, per_seed = ablation
    m = {name: table.mean_ap_3d(name) for name, _ in ex.VARIANTS}
    chain = ["dpo", "+weights+inputs", "+weights", "no-adapt"]
    ordered = all(m[a] >= m[b] for a, b in zip(chain, chain[1:]))
    margin = m["dpo"] - m["no-adapt"]
    fast = per_seed < 300
    ok = ordered and margin >= MARGIN_AP3D and fast
    print(table.to_csv())
    acceptance_log(8, "ablation ordering", ok,
                   " >= ".join(f"{c} {m[c]:.2f}" for c in chain)
                   + f"; ordering {'holds' if ordered else 'violated'}; margin {margin:+.2f} "
                   f"(need >= {MARGIN_AP3D}); {per_seed:.0f}s per seed")
    assert ok


def test_09_early_stop(heavy, ablation, acceptance_log):
    table, _ = ablation
    results = []
    for seed in table.seeds:
        full = next(r for r in table.runs if r.method == "dpo" and r.seed == seed)
        base = next(r for r in table.runs if r.method == "no-adapt" and r.seed == seed)
        results.append(ex.calibrate_early_stop(heavy, seed, table.params[seed],
                                               ex.test_stream(heavy, seed), full, base))
    ok = True
    parts = []
    for r in results:
        early = r.stop_batch is not None and r.stop_batch < 0.5 * r.n_batches
        kept = r.retained >= 0.9
        ok &= early and kept
        parts.append(f"seed {r.seed}: stop {r.stop_batch}/{r.n_batches}, gain "
                     f"{r.ap_full - r.ap_no_adapt:+.2f}, retained {r.retained:.2f}")
    acceptance_log(9, "early stop", ok, "; ".join(parts))
    assert ok


def test_10_closed_gap(acceptance_log):
    value = closed_gap(55.74, 27.48, 73.45)
    ok = abs(value - 61.47) <= 0.01
    acceptance_log(10, "closed gap arithmetic", ok, f"{value:.4f}")
    assert ok


def test_11_determinism(heavy, ablation, acceptance_log):
    table, _ = ablation
    again = ex.run_ablation(heavy)
    same = table.to_csv() == again.to_csv() and table.runs_csv() == again.runs_csv()
    acceptance_log(11, "determinism", same,
                   f"ablation CSV {len(table.to_csv())} bytes, identical {same}")
    assert same
