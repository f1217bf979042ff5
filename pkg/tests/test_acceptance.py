"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the summary block at the end
lists every criterion. The pipeline-backed criteria share one run of the
default configuration (about 15 CPU-minutes) plus a second identical run for
the determinism check.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest
import torch

from hvlm.config import ExperimentConfig
from hvlm.evalmetrics import auroc
from hvlm.explain import lime_attribute
from hvlm.fairness import (
    ContingencyTable,
    FairnessTable,
    SubgroupSpec,
    fisher_exact,
    mann_whitney_less,
    odds_ratio,
    tpr_fpr,
)
from hvlm.heads import positive_weights
from hvlm.objectives import clip_loss, combined_loss, patient_discrimination_loss
from hvlm.pipeline import MAIN_PIPELINE, RunDir, convergence_steps, load_dataset, load_text, run_stage
from hvlm.voltok import quantize, quantize_batch

pytestmark = pytest.mark.slow

CPU_BUDGET_S = 30 * 60


def _run_pipeline(root, cfg: ExperimentConfig, stages=MAIN_PIPELINE) -> tuple[RunDir, dict]:
    run = RunDir.open(cfg, run_dir=root)
    out = {}
    for s in stages:
        t0 = time.process_time()
        out[s] = run_stage(run, s)
        out[s]["_cpu"] = time.process_time() - t0
    return run, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("accept") / "run"
    return _run_pipeline(root, ExperimentConfig())


def _close(a, b, tol: float, path: str = "") -> list[str]:
    """Paths where two JSON-like trees differ by more than ``tol``."""
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            return [path + ": keys differ"]
        return [p for k in a for p in _close(a[k], b[k], tol, f"{path}.{k}")]
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return [path + ": lengths differ"]
        return [p for i, (x, y) in enumerate(zip(a, b)) for p in _close(x, y, tol, f"{path}[{i}]")]
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return [] if a is b else [path]
        return [] if abs(a - b) <= tol else [path]
    return [] if a == b else [path]


# ---------------------------------------------------------------- 1 quantization


def test_c01_quantize_oracle(acceptance_log):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    mismatches = 0
    for size in (1, 2, 16, 64, 512):
        entries = rng.normal(size=(size, 8))
        entries[size // 2] = entries[0]          # exact duplicate: ties resolve to the lower index
        z = rng.normal(size=(1000, 8))
        z[:5] = entries[0]
        brute = []
        for v in z:
            best, best_d = 0, math.inf
            for k, e in enumerate(entries):
                d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, e))
                if d < best_d:
                    best, best_d = k, d
            brute.append(best)
        got_batch = quantize_batch(z, entries)
        got_single = [quantize(v, entries)[0] for v in z]
        mismatches += int((got_batch != np.array(brute)).sum()) + sum(a != b for a, b in zip(got_single, brute))
    # the brute-force loop dominates; time only the library calls
    t1 = time.perf_counter()
    for size in (1, 2, 16, 64, 512):
        entries = rng.normal(size=(size, 8))
        z = rng.normal(size=(1000, 8))
        quantize_batch(z, entries)
        for v in z:
            quantize(v, entries)
    runtime = time.perf_counter() - t1
    ok = mismatches == 0 and runtime < 5.0
    acceptance_log(1, ok, f"mismatches={mismatches} runtime={runtime:.2f}s (oracle pass {t1 - t0:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 2 gradient check


def test_c02_gradient_check(acceptance_log):
    dt = torch.float64
    g = torch.Generator().manual_seed(0)
    m, r = torch.randn(2, 8, dtype=dt, generator=g), torch.randn(2, 8, dtype=dt, generator=g)
    u = torch.randn(4, 8, dtype=dt, generator=g)
    idx = torch.tensor([0, 0, 1, 1])
    tau = torch.tensor(math.log(1 / 0.07), dtype=dt)
    tau_p = torch.tensor(0.1, dtype=dt)
    params = [m, r, u, tau, tau_p]

    def f():
        return combined_loss(clip_loss(m, r, tau), patient_discrimination_loss(u, idx, tau_p), 0.03)

    for p in params:
        p.requires_grad_(True)
    analytic = torch.autograd.grad(f(), params)
    worst = 0.0
    h = 1e-6
    with torch.no_grad():
        for p, a in zip(params, analytic):
            num = torch.zeros_like(p)
            flat, nflat = p.view(-1), num.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
                flat[i] = old
                nflat[i] = (up - down) / (2 * h)
            worst = max(worst, float((a - num).norm() / max(a.norm(), num.norm(), 1e-12)))
    ok = worst < 1e-4
    acceptance_log(2, ok, f"max relative error={worst:.2e}")
    assert ok


# ---------------------------------------------------------------- 3 closed forms


def test_c03_closed_forms(acceptance_log):
    worst_clip = 0.0
    for k in (2, 5, 32):
        v = torch.nn.functional.normalize(torch.randn(1, 16, dtype=torch.float64), dim=-1).repeat(k, 1)
        for tau in (0.0, math.log(1 / 0.07)):
            worst_clip = max(worst_clip, abs(float(clip_loss(v, v, tau)) - 2 * math.log(k)))
    u = torch.randn(4, 8, dtype=torch.float64)
    pd = max(abs(float(patient_discrimination_loss(u, torch.zeros(4, dtype=torch.long), 0.1, self_mode=mode)))
             for mode in ("suppress", "include"))
    ok = worst_clip <= 1e-9 and pd <= 1e-12
    acceptance_log(3, ok, f"|clip - 2 ln k|={worst_clip:.1e} single-study patdis={pd:.1e}")
    assert ok


# ---------------------------------------------------------------- 4 toy pretraining


def test_c04_toy_pretraining(pipeline, acceptance_log):
    _, out = pipeline
    hist = out["train-clip"]["history"]
    cpu = out["train-clip"]["cpu_seconds"]
    ret = out["evaluate"]["retrieval"]
    top5_ok = all(h["top5"] >= h["top1"] for h in hist)
    ok = ret["cohort_top1"] >= 0.25 and cpu <= CPU_BUDGET_S and top5_ok
    acceptance_log(4, ok, f"cohort top1={ret['cohort_top1']:.3f} (500 studies, groups of 100) "
                          f"held-out test top1={ret['test_top1']:.3f} top5={ret['test_top5']:.3f} "
                          f"train cpu={cpu:.0f}s top5>=top1 at all {len(hist)} logged steps={top5_ok}")
    assert ok


# ---------------------------------------------------------------- 5 convergence direction


def test_c05_patdis_converges_faster(pipeline, acceptance_log):
    run, _ = pipeline
    cfg = run.config
    ds = load_dataset(run)
    text = load_text(run.require("text"))
    target = cfg.objective.convergence_target
    cap = cfg.objective.convergence_max_steps
    rows = []
    for seed in (0, 1, 2):
        with_pd = convergence_steps(cfg, ds, text, seed, target, cap)
        without = convergence_steps(cfg.replace(ablation={"no_patdis": True}), ds, text, seed, target, cap)
        rows.append((seed, with_pd, without))
    inf = float("inf")
    wins = sum((w if w is not None else inf) < (o if o is not None else inf) for _, w, o in rows)
    ok = wins >= 2
    acceptance_log(5, ok, f"target val top1={target} wins={wins}/3 (seed, with, without)={rows}")
    assert ok


# ---------------------------------------------------------------- 6 probing


def test_c06_probing(pipeline, acceptance_log):
    _, out = pipeline
    cls = "glioma"
    auc = out["probe"]["diagnosis_auc"][cls]
    exact = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, L = int(rng.integers(5, 300)), int(rng.integers(1, 13))
        pos = rng.integers(1, n, size=L)
        y = np.zeros((n, L), int)
        for j, p in enumerate(pos):
            y[rng.choice(n, p, replace=False), j] = 1
        w, _ = positive_weights(y)
        exact &= w.tolist() == [(n - p) / p for p in pos]
    ok = auc >= 0.95 and exact
    acceptance_log(6, ok, f"{cls} frozen-encoder MLP AUROC={auc:.3f} positive weights exact on 10 splits={exact}")
    assert ok


# ---------------------------------------------------------------- 7 LIME


def test_c07_lime(pipeline, acceptance_log):
    _, out = pipeline
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 40))
        coef = rng.normal(size=n)
        a = lime_attribute(lambda msk: msk @ coef + 0.3, n, n_samples=10 * n + 20, seed=seed)
        worst = max(worst, float(np.abs(a.weights - coef).max()))
    rate = out["explain"]["hit_rate"]
    ok = worst < 1e-6 and rate is not None and rate >= 0.90
    acceptance_log(7, ok, f"linear recovery max error={worst:.1e} top-3 hit rate={rate} "
                          f"over {len(out['explain']['studies'])} {out['explain']['class']} test positives")
    assert ok


# ---------------------------------------------------------------- 8 fairness oracles


def _enum_fisher(a, b, c, d):
    from fractions import Fraction
    r1, c1, n = a + b, a + c, a + b + c + d
    prob = lambda x: Fraction(math.comb(r1, x) * math.comb(n - r1, c1 - x), math.comb(n, c1))  # noqa: E731
    obs = prob(a)
    return float(sum(p for p in map(prob, range(max(0, r1 + c1 - n), min(r1, c1) + 1)) if p <= obs))


def _enum_mwu(x, y):
    pooled, n1 = list(x) + list(y), len(x)

    def u_of(chosen):
        s = set(chosen)
        return sum(1.0 if pooled[i] > pooled[j] else 0.5 if pooled[i] == pooled[j] else 0.0
                   for i in s for j in range(len(pooled)) if j not in s)

    u = u_of(range(n1))
    combos = list(itertools.combinations(range(len(pooled)), n1))
    return u, sum(u_of(c) <= u + 1e-9 for c in combos) / len(combos)


def test_c08_fairness_oracles(acceptance_log):
    fisher_worst = 0.0
    for a, b, c, d in itertools.product(range(9), repeat=4):     # every table with cells < 9 (n <= 32)
        fisher_worst = max(fisher_worst, abs(fisher_exact(ContingencyTable(a, b, c, d)) - _enum_fisher(a, b, c, d)))
    rng = np.random.default_rng(0)
    mwu_worst = 0.0
    for _ in range(200):
        x = rng.integers(0, 6, size=int(rng.integers(1, 8)))
        y = rng.integers(0, 6, size=int(rng.integers(1, 8)))
        u, p = _enum_mwu(x, y)
        r = mann_whitney_less(x, y)
        mwu_worst = max(mwu_worst, abs(r.p_value - p), abs(r.u - u))
    yv = rng.integers(0, 2, size=(300, 4))
    yh = rng.integers(0, 2, size=(300, 4))
    t = FairnessTable(yh, yv, [{"g": i % 3} for i in range(300)])
    disp = [tpr_fpr(t, SubgroupSpec.everyone(), c).tpr_disparity for c in range(4)]
    orv = odds_ratio(ContingencyTable(20, 80, 10, 90)).odds_ratio
    ok = fisher_worst <= 1e-12 and mwu_worst <= 1e-12 and all(d == 0.0 for d in disp) and orv == 2.25
    acceptance_log(8, ok, f"fisher max err={fisher_worst:.1e} mwu max err={mwu_worst:.1e} "
                          f"population disparity={disp} OR={orv}")
    assert ok


# ---------------------------------------------------------------- 9 AUROC


def test_c09_auroc_pair_counting(acceptance_log):
    equal = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        pos, neg = s[y == 1], s[y == 0]
        brute = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
        equal += auroc(s, y) == brute
    ok = equal == 100
    acceptance_log(9, ok, f"exact matches={equal}/100")
    assert ok


# ---------------------------------------------------------------- 10 scaling direction


def test_c10_scaling_direction(pipeline, acceptance_log):
    run, _ = pipeline
    rep = run_stage(run, "scale-sweep")
    ok = rep["passes"]
    acceptance_log(10, ok, f"fractions={rep['fractions']} medians={[round(m, 3) for m in rep['medians']]} "
                           f"inversions={rep['inversions']} noise band={rep['noise_band']:.3f}")
    assert ok


# ---------------------------------------------------------------- 11 modality drop


def test_c11_modality_drop(pipeline, acceptance_log):
    _, out = pipeline
    md = out["evaluate"]["modality_drop"]
    t2, t1 = md["t2_visible_delta"], md["t1_visible_delta"]
    ok = t2 is not None and t1 is not None and t2 > t1
    acceptance_log(11, ok, f"mean AUC loss T2-visible={t2} ({', '.join(md['t2_visible'])}) "
                           f"T1-visible={t1} ({', '.join(md['t1_visible'])})")
    assert ok


# ---------------------------------------------------------------- 12 determinism


def test_c12_determinism(pipeline, tmp_path, acceptance_log):
    run, _ = pipeline
    first = {k: v for k, v in run.metrics_bundle().items() if k in {
        "cohort", "tokenizer", "text", "clip", "probe", "evaluate", "explain", "fairness"}}
    again, _ = _run_pipeline(tmp_path / "again", run.config)
    second = {k: v for k, v in again.metrics_bundle().items() if k in first}
    diffs = _close(first, second, 1e-6)
    ok = not diffs and set(first) == set(second)
    acceptance_log(12, ok, f"bundles compared={sorted(first)} differing fields={diffs[:5]}")
    assert ok
