"""Acceptance criteria. Each test records one PASS/FAIL line in the terminal summary.

The training experiments (plug-in trend, lambda sweep, similarity) share
one cached set of runs and take roughly half an hour on a single core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from aenet import tensorcore as tc
from aenet.ae import AEBlock, ae_core, ae_forward
from aenet.gradcheck import run_suite
from aenet.losses import LossConfig, bce_loss, dice_loss, total_loss
from aenet.prior import EmptyMaskError, prior_pack
from aenet.trainer import ARMS, TrainConfig, bench_prior, bench_similarity, train
from oracles import hand_evaluation, identity_block, oracle_prior, random_case, random_instance

SEEDS = (0, 1, 2, 3, 4)


def test_formula_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    prior_worst = 0.0
    for i in range(50):
        f_q, sups = random_instance(rng, k=1 + i % 3, soft=bool(i % 2))
        pack = prior_pack(f_q, sups)
        got = (pack.proto_fg.value, pack.proto_bg.value, pack.fg.value, pack.bg.value, pack.disc.value)
        prior_worst = max(prior_worst, *(np.abs(a - b).max() for a, b in zip(got, oracle_prior(f_q, sups))))
    ae_worst = 0.0
    for i in range(50):
        f_q, f_s, m = random_case(rng, 4)
        block = identity_block(rng, 4) if i % 2 else AEBlock.init(rng, 4)
        t = (1.0, 0.5, 2.0)[i % 3]
        out = ae_forward(block, f_q, f_s, m, t)
        q, s, disc, alpha, p = hand_evaluation(block, f_q, f_s, m, t)
        ae_worst = max(
            ae_worst,
            np.abs(out.f_q.value.reshape(4, -1).T - q).max(),
            np.abs(out.f_s.value.reshape(4, -1).T - s).max(),
            np.abs(out.m_disc.value.ravel() - disc).max(),
            abs(out.alpha.item() - alpha),
            np.abs(out.p_fused.value - p).max(),
        )
    dt = time.perf_counter() - t0
    criterion(
        "formula fidelity",
        prior_worst < 1e-6 and ae_worst < 1e-6 and dt < 10,
        f"prior max diff {prior_worst:.1e}, AE max diff {ae_worst:.1e} (< 1e-6), {dt:.1f}s (< 10s)",
    )


def test_gradient_suite(criterion):
    rep = run_suite(seed=0, eps=1e-4, tol=1e-4, points=20)
    worst = max(c["max_rel_error"] for c in rep["checks"])
    failed = [c["name"] for c in rep["checks"] if not c["passed"]]
    criterion(
        "gradient suite",
        rep["passed"] and rep["wall_clock_s"] < 60,
        f"{len(rep['checks'])} checks, worst rel err {worst:.1e} (< 1e-4), failed {failed or 'none'}, "
        f"{rep['wall_clock_s']:.1f}s (< 60s)",
    )


def test_invariant_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    bad = []
    for _ in range(1000):
        c, h, w = (int(v) for v in rng.integers(2, 7, size=3))
        f_q, sups = random_instance(rng, c, h, w, k=int(rng.integers(1, 4)), soft=bool(rng.integers(2)))
        pack = prior_pack(f_q, sups)
        fg, bg, disc = pack.fg.value, pack.bg.value, pack.disc.value
        if not all(0 <= m.min() and m.max() <= 1 for m in (fg, bg, disc)):
            bad.append("prior range")
        if np.any(disc > fg) or np.any(disc[fg <= bg] != 0):
            bad.append("disc suppression")
        dup = prior_pack(f_q, sups * 3).disc.value
        perm = prior_pack(f_q, sups[::-1]).disc.value
        if np.abs(dup - disc).max() > 1e-9 or np.abs(perm - disc).max() > 1e-9:
            bad.append("k-shot invariance")

        f_q, f_s, m = random_case(rng, c, h, w)
        out = ae_core(AEBlock.init(rng, c), tc.chw_to_rows(f_q), tc.chw_to_rows(f_s), m.reshape(-1), float(rng.uniform(0.1, 3)))
        if not 0 <= out.alpha.item() <= 1:
            bad.append("alpha range")
        if abs(out.weights.value.sum() - 1) > 1e-9:
            bad.append("softmax sum")
        logits = rng.normal(scale=10, size=(h, w))
        if np.abs(tc.softmax(logits, axis=1).value.sum(axis=1) - 1).max() > 1e-9:
            bad.append("softmax rows")

        f = rng.normal(size=(c, h, w))
        for empty in (np.zeros((h, w)), np.ones((h, w))):
            try:
                prior_pack(f, [(f, empty)])
                bad.append("empty mask accepted")
            except EmptyMaskError:
                pass
    dt = time.perf_counter() - t0
    criterion(
        "invariant suite",
        not bad and dt < 30,
        f"1000 instances, violations {sorted(set(bad)) or 'none'}, {dt:.1f}s (< 30s)",
    )


def test_memory(criterion):
    c = h = w = 64
    hw = h * w
    rng = np.random.default_rng(0)
    f_q, f_s = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    m = (rng.uniform(size=(h, w)) > 0.5).astype(float)
    with tc.track_allocations() as log:
        prior_pack(f_q, [(f_s, m)])
    total = sum(int(np.prod(s)) for _, s in log)
    largest = max(int(np.prod(s)) for _, s in log)
    criterion(
        "memory",
        total <= 8 * hw * c and largest < hw * hw,
        f"{total} working elements (<= {8 * hw * c}), largest buffer {largest} (no HW x HW = {hw * hw})",
    )


def test_prior_quality(criterion):
    t0 = time.perf_counter()
    cfg = TrainConfig()
    blurred = bench_prior(cfg, 200, sigmas=[2.0])["by_sigma"][0]
    clean = bench_prior(replace(cfg, noise_std=0.0), 200, sigmas=[0.0])["by_sigma"][0]
    dt = time.perf_counter() - t0
    ok = (
        blurred["auc_disc_mean"] > blurred["auc_fg_mean"]
        and blurred["p_disc_gt_fg"] < 0.01
        and min(clean["auc_disc"]) == 1.0
        and dt < 120
    )
    criterion(
        "prior quality",
        ok,
        f"sigma=2 AUC disc {blurred['auc_disc_mean']:.4f} vs fg {blurred['auc_fg_mean']:.4f} "
        f"(paired p {blurred['p_disc_gt_fg']:.2g}, need disc > fg at p < 0.01); "
        f"sigma=0 min AUC disc {min(clean['auc_disc']):.4f} (need 1.0); {dt:.0f}s (< 120s)",
    )


def test_closed_form_losses(criterion):
    rng = np.random.default_rng(3)
    gt = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    pred = rng.uniform(0.05, 0.95, size=(8, 8))
    aux = rng.uniform(size=(8, 8))
    checks = {
        "dice(gt, gt) = 0": dice_loss(gt, gt).item() == 0.0,
        "BCE(0.5) = ln 2": abs(bce_loss(np.full((8, 8), 0.5), gt).item() - math.log(2)) <= 1e-9,
        "lambda 0 = Dice": total_loss(pred, gt, [aux, aux], LossConfig(lam=0.0)).item() == dice_loss(pred, gt).item(),
        "N copies = one BCE": abs(
            total_loss(pred, gt, [aux] * 4).item() - (dice_loss(pred, gt).item() + bce_loss(aux, gt).item())
        ) <= 1e-12,
    }
    failed = [k for k, v in checks.items() if not v]
    criterion("closed-form losses", not failed, f"{len(checks)} identities, failed {failed or 'none'}")


# --- training experiments -----------------------------------------------------------


@pytest.fixture(scope="session")
def arm_runs():
    """seed -> arm -> RunReport at the desk-scale defaults."""
    runs = {}
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed)
        runs[seed] = {name: train(replace(cfg, **ARMS[name])) for name in ARMS}
    return runs


@pytest.mark.slow
def test_plugin_trend(criterion, arm_runs):
    miou = {name: np.array([arm_runs[s][name].novel.miou for s in SEEDS]) for name in ARMS}
    full = miou["aenet"]
    wins = {name: int(np.sum(full >= miou[name])) for name in ("pg", "ae")}
    slowest = max(r.wall_clock for runs in arm_runs.values() for r in runs.values())
    table = ", ".join(f"{name} {v.mean():.3f}" for name, v in miou.items())
    criterion(
        "plug-in trend",
        full.mean() >= miou["baseline"].mean() and min(wins.values()) >= 3 and slowest < 900,
        f"mean novel mIoU {table}; full >= pg on {wins['pg']}/5, >= ae on {wins['ae']}/5 seeds; "
        f"slowest run {slowest:.0f}s (< 900s)",
    )


@pytest.mark.slow
def test_lambda_sweep(criterion, arm_runs):
    # the lambda = 1 runs are the full-model arm at the defaults
    rows = {1.0: [arm_runs[s]["aenet"].novel.miou for s in SEEDS]}
    for lam in (0.0, 0.5, 1.5):
        rows[lam] = [train(TrainConfig(seed=s, lam=lam)).novel.miou for s in SEEDS]
    means = {lam: float(np.mean(v)) for lam, v in sorted(rows.items())}
    criterion(
        "lambda sweep",
        means[1.0] >= means[0.0],
        "mean novel mIoU " + ", ".join(f"lambda={k:g} {v:.3f}" for k, v in means.items()),
    )


@pytest.mark.slow
def test_similarity_boost(criterion, arm_runs):
    cfg = TrainConfig(seed=SEEDS[0])
    rep = bench_similarity(arm_runs[SEEDS[0]]["aenet"].model, cfg, 100)
    criterion(
        "similarity boost",
        rep["mean_after"] > rep["mean_before"],
        f"query-FG to support-prototype cosine before {rep['mean_before']:.4f}, after {rep['mean_after']:.4f} "
        f"({rep['frac_improved']:.0%} of 100 episodes improved)",
    )
