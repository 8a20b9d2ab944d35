"""Acceptance criteria 1-10. Each test records one pass/fail line that is
printed in the terminal summary."""

import time

import numpy as np
import pytest

from conftest import check_grads, record

from attnfix import numkernel as nk
from attnfix.data import corner_trigger, hamming_nearest, mask_to_columns
from attnfix.detector import aggregate_heads, contrastive_term, localize
from attnfix.harness import eval_accuracy, eval_asr
from attnfix.hotpatch import hotfix_predict, patch_attention
from attnfix.inversion import identify_target_class
from attnfix.numkernel import Tensor


def stochastic(rng, shape):
    a = rng.uniform(0, 1, shape) ** 3  # skewed rows
    return a / a.sum(-1, keepdims=True)


# 1 -------------------------------------------------------------------------

def test_c01_gamma_invariants():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {"row": 0.0, "scale": 0.0, "formula": 0.0}
    k_exact = True
    for trial in range(1000):
        A = stochastic(rng, (2, 17, 17))
        Q = stochastic(rng, (17, 17))
        K = sorted(rng.choice(17, size=int(rng.integers(1, 4)), replace=False).tolist())
        out = patch_attention(A, K, Q, eps=1e-8)
        worst["row"] = max(worst["row"], float(np.abs(out.sum(-1) - 1).max()))
        k_exact &= bool(np.all(out[..., K] == Q[:, K]))
        rest = np.setdiff1d(np.arange(17), K)
        ratio = out[..., rest] / A[..., rest]
        worst["scale"] = max(worst["scale"], float(np.abs(ratio - ratio[..., :1]).max()))
        if len(K) == 1:
            k = K[0]
            mask = np.ones(17)
            mask[k] = 0
            scale = (1 - Q[:, k]) / (1 - A[..., k] + 1e-8)
            printed = scale[..., None] * (A * mask) + Q[:, k][:, None] * np.eye(17)[k]
            worst["formula"] = max(worst["formula"], float(np.abs(printed - out).max()))
    elapsed = time.perf_counter() - t0
    ok = (worst["row"] <= 1e-5 and k_exact and worst["scale"] <= 1e-9 and worst["formula"] <= 1e-12
          and elapsed < 5)
    record(1, ok, f"row dev {worst['row']:.1e}, K exact {k_exact}, scale spread {worst['scale']:.1e}, "
                  f"|K|=1 formula diff {worst['formula']:.1e}, {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_c02_bypass_identity(backdoor_run):
    run, _, _ = backdoor_run
    v, det, ref = run.victim, run.detector, run.qref
    t0 = time.perf_counter()
    xs = [x.image for x in run.test]
    quiet = []
    for x in xs:
        _, trace = v.forward(x[None])
        if not localize(trace, det, run.cfg.tau):
            quiet.append(x)
        if len(quiet) == 200:
            break
    identical = 0
    for x in quiet:
        raw = v.forward(x[None])[0].data[0]
        for mode in ("streaming", "two_pass"):
            _, diag = hotfix_predict(x, v, det, ref, run.cfg.tau, mode)
            identical += int(not diag["patched"] and np.array_equal(diag["logits"], raw))
    elapsed = time.perf_counter() - t0
    ok = len(quiet) == 200 and identical == 400 and elapsed < 10
    record(2, ok, f"{identical}/{2 * len(quiet)} bit-identical over {len(quiet)} quiet inputs, {elapsed:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------

def test_c03_gradients():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    errs = {}

    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    errs["matmul"] = check_grads(lambda: nk.sum_(nk.matmul(a, b) * nk.matmul(a, b)), [a, b])

    s = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = rng.normal(size=(3, 5))
    errs["softmax"] = check_grads(lambda: nk.sum_(nk.softmax_rows(s) * w), [s])

    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    wc = rng.normal(size=(2, 3, 5, 5))
    errs["conv2d"] = check_grads(lambda: nk.sum_(nk.conv2d(x, k) * wc), [x, k])

    h = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    g = Tensor(rng.normal(size=6), requires_grad=True)
    be = Tensor(rng.normal(size=6), requires_grad=True)
    wl = rng.normal(size=(3, 6))
    errs["layernorm"] = check_grads(lambda: nk.sum_(nk.layer_norm(h, g, be) * wl), [h, g, be])

    table = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    we = rng.normal(size=(2, 3, 4))
    errs["embedding"] = check_grads(lambda: nk.sum_(nk.embedding(table, ids) * we), [table])

    u = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    y = rng.integers(0, 2, size=(4, 6)).astype(float)
    errs["bce"] = check_grads(lambda: nk.binary_cross_entropy(nk.sigmoid(u), y), [u])

    f = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
    lab = np.array([1, 0, 0, 1, 0, 1, 0, 0], dtype=float)
    pos = np.array([3, 2, 4, 5, 6, 0, 7, 1])
    errs["contrastive"] = check_grads(lambda: contrastive_term(f, lab, pos, 0.1), [f])

    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-4 and elapsed < 30
    record(3, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------

def test_c04_backdoor_end_to_end(backdoor_run):
    _, rep, elapsed = backdoor_run
    drop = rep.acc_before - rep.acc_after
    ok = (rep.acc_before >= 0.85 and rep.asr_before >= 0.90 and rep.asr_after <= 0.10
          and drop <= 0.02 and elapsed <= 600)
    record(4, ok, f"acc {rep.acc_before:.3f} -> {rep.acc_after:.3f}, ASR {rep.asr_before:.3f} -> "
                  f"{rep.asr_after:.3f}, {elapsed:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------

def test_c05_fairness_end_to_end(fairness_run):
    _, rep, elapsed = fairness_run
    drop = rep.acc_before - rep.acc_after
    ok = rep.uf_before >= 0.05 and rep.uf_after <= 0.01 and drop <= 0.02 and elapsed <= 300
    record(5, ok, f"acc {rep.acc_before:.3f} -> {rep.acc_after:.3f}, UF {rep.uf_before:.3f} -> "
                  f"{rep.uf_after:.3f}, {elapsed:.0f}s")
    assert ok


# 6 -------------------------------------------------------------------------

def test_c06_detector_strict(backdoor_run):
    from attnfix.harness import eval_detector_strict

    run, _, _ = backdoor_run
    t0 = time.perf_counter()
    clean, comp, labels = run.detector_eval_maps()
    m = eval_detector_strict(run.detector, clean, comp, labels, run.cfg.tau)
    elapsed = time.perf_counter() - t0
    ok = (len(clean) >= 200 and len(comp) == len(clean) and m["f1"] >= 0.90 and m["fpr"] <= 0.10
          and m["fnr"] <= 0.05 and elapsed < 60)
    record(6, ok, f"F1 {m['f1']:.3f}, FPR {m['fpr']:.3f}, FNR {m['fnr']:.3f} on {len(clean)} maps "
                  f"per class, {elapsed:.1f}s")
    assert ok


# 7 -------------------------------------------------------------------------

def test_c07_ablation_direction(backdoor_run):
    run, _, _ = backdoor_run
    assert len(run.cfg.seeds) == 3
    t0 = time.perf_counter()
    rep = run.ablate()
    elapsed = time.perf_counter() - t0
    asr = {v: np.mean([r["asr"] for r in rep.ablation if r["variant"] == v])
           for v in ("full", "wo_det", "wo_rec")}
    ok = asr["wo_det"] >= 5 * asr["full"] and asr["wo_rec"] >= 3 * asr["full"] and elapsed <= 900
    record(7, ok, f"mean ASR full {asr['full']:.3f}, wo_det {asr['wo_det']:.3f}, "
                  f"wo_rec {asr['wo_rec']:.3f}, {elapsed:.0f}s")
    assert ok


# 8 -------------------------------------------------------------------------

def test_c08_trigger_inversion(backdoor_run):
    run, _, _ = backdoor_run
    cfg = run.cfg
    planted = run.planted_trigger.mask > 0
    pool = np.stack([x.image for x in run.debug_pool[:cfg.inversion_samples]])
    t0 = time.perf_counter()
    hits, ious = 0, []
    for seed in range(5):
        res = identify_target_class(run.victim, pool, cfg.inversion_lambda, cfg.inversion_steps, seed)
        mask = res.per_class[cfg.target_class].mask >= 0.5
        iou = (mask & planted).sum() / (mask | planted).sum()
        ious.append(float(iou))
        hits += int(res.chosen_target == cfg.target_class and iou >= 0.5)
    elapsed = time.perf_counter() - t0
    ok = hits >= 4 and elapsed <= 600
    record(8, ok, f"{hits}/5 seeds correct with IoU >= 0.5 (IoU {', '.join(f'{i:.2f}' for i in ious)}), "
                  f"{elapsed:.0f}s")
    assert ok


# 9 -------------------------------------------------------------------------

def test_c09_zero_column_probe(backdoor_run):
    run, _, _ = backdoor_run
    t0 = time.perf_counter()
    rows = run.probe_zero_column()
    elapsed = time.perf_counter() - t0
    trig = [r["surviving"] for r in rows if r["trigger"]]
    other = [r["surviving"] for r in rows if not r["trigger"]]
    ok = rows[0]["samples"] == 100 and max(trig) <= 0.2 and min(other) >= 0.9 and elapsed < 120
    record(9, ok, f"trigger column keeps {max(trig):.2f}, non-trigger columns keep >= {min(other):.2f}, "
                  f"{elapsed:.1f}s")
    assert ok


# 10 ------------------------------------------------------------------------

def test_c10_oracles():
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(7, 5))
    mm = np.zeros((6, 5))
    for i in range(6):
        for j in range(5):
            for k in range(7):
                mm[i, j] += a[i, k] * b[k, j]
    d_mm = np.abs(nk.matmul(Tensor(a), Tensor(b)).data - mm).max()

    x, w = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    conv = np.zeros((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                for c in range(2):
                    for di in range(3):
                        for dj in range(3):
                            conv[o, i, j] += w[o, c, di, dj] * xp[c, i + di, j + dj]
    d_conv = np.abs(nk.conv2d(Tensor(x), Tensor(w)).data - conv).max()

    A = rng.uniform(size=(4, 9, 9))
    agg = np.zeros((9, 9))
    for h in range(4):
        agg += A[h]
    d_agg = np.abs(aggregate_heads(A) - agg / 4).max()

    ham_ok = True
    for _ in range(200):
        size = int(rng.integers(1, 201))
        pool = rng.integers(0, 4, size=(size, 6))
        q = rng.integers(0, 4, size=6)
        dists = [int((row != q).sum()) for row in pool]
        ham_ok &= hamming_nearest(q, pool) == dists.index(min(dists))
    elapsed = time.perf_counter() - t0
    ok = max(d_mm, d_conv, d_agg) <= 1e-12 and ham_ok and elapsed < 10
    record(10, ok, f"matmul {d_mm:.1e}, conv2d {d_conv:.1e}, heads {d_agg:.1e}, "
                   f"hamming exact {ham_ok}, {elapsed:.1f}s")
    assert ok
