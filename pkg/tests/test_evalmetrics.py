from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hvlm.evalmetrics import (
    PredictionRecord,
    auroc,
    cooccurrence_matrix,
    group_partition,
    grouped_retrieval,
    mauc,
    modality_drop_eval,
    npr,
    npr_value,
    records_to_arrays,
    reliability_diagram,
    scaling_harness,
    sigmoid,
    t2_like,
    topk_retrieval,
)
from hvlm.objectives import SeqView, StudyView


def brute_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    hits = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return hits / (len(pos) * len(neg))


def brute_topk(sim: np.ndarray, k: int) -> float:
    """Average over every column order of a stable argsort: the exact tie expectation."""
    n = len(sim)
    total = 0.0
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        p = np.array(perm)
        for i in range(n):
            order = p[np.argsort(-sim[i, p], kind="stable")]
            total += float(i in order[:k])
    return total / (len(perms) * n)


# ---------------------------------------------------------------- retrieval


def test_identity_topk():
    assert topk_retrieval(np.eye(7), 1) == 1.0


def test_antidiagonal_n3():
    sim = np.fliplr(np.eye(3))
    assert topk_retrieval(sim, 1) == pytest.approx(1 / 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_topk_matches_tie_enumeration(n, k, seed):
    rng = np.random.default_rng(seed)
    sim = rng.integers(0, 3, size=(n, n)).astype(float)  # many ties
    assert topk_retrieval(sim, k) == pytest.approx(brute_topk(sim, k), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_topk_monotone_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    sim = np.round(rng.uniform(-1, 1, size=(n, n)), 1)
    vals = [topk_retrieval(sim, k) for k in (1, 2, 5, n)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1.0)
    p = rng.permutation(n)
    assert topk_retrieval(sim[np.ix_(p, p)], 1) == pytest.approx(vals[0], abs=1e-12)


def test_grouped_partition_deterministic_and_drops_remainder():
    g = group_partition(250, 100, seed=3)
    assert len(g) == 2 and all(len(x) == 100 for x in g)
    assert len(set(np.concatenate(g).tolist())) == 200
    assert all(np.array_equal(a, b) for a, b in zip(g, group_partition(250, 100, seed=3)))
    sim = np.eye(250)
    assert grouped_retrieval(sim, 100, seed=0) == 1.0
    with pytest.raises(ValueError):
        grouped_retrieval(np.eye(50), 100)


# ---------------------------------------------------------------- AUROC


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0, 1, 2, 3], [0, 0, 1, 1]) == 1.0


def test_auroc_random_labels_near_half():
    rng = np.random.default_rng(0)
    assert abs(auroc(rng.normal(size=10_000), rng.integers(0, 2, 10_000)) - 0.5) < 0.02


@pytest.mark.parametrize("seed", range(100))
def test_auroc_equals_pair_counting_exactly(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # coarse rounding forces ties
    assert auroc(scores, y) == brute_auroc(scores, y)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int8, st.integers(2, 60), elements=st.integers(-3, 3)), st.integers(0, 10_000))
def test_auroc_pair_counting_property(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(scores))
    y[0], y[-1] = 0, 1
    assert auroc(scores, y) == brute_auroc(scores.tolist(), y.tolist())


def test_auroc_needs_both_classes():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_mauc_skips_degenerate_columns():
    scores = np.array([[0.1, 0.5], [0.9, 0.2], [0.4, 0.3]])
    labels = np.array([[0, 1], [1, 1], [0, 1]])
    m, per = mauc(scores, labels)
    assert per[0] == 1.0 and np.isnan(per[1]) and m == 1.0


def test_prediction_record_validation():
    with pytest.raises(ValueError):
        PredictionRecord("a", np.array([np.nan]), np.array([1]))
    with pytest.raises(ValueError):
        PredictionRecord("a", np.array([0.0]), np.array([2]))
    recs = [PredictionRecord(str(i), np.array([i, -i], float), np.array([i % 2, 1])) for i in range(3)]
    s, y = records_to_arrays(recs)
    assert s.shape == (3, 2) and y.shape == (3, 2)


# ---------------------------------------------------------------- calibration


def test_reliability_oracle_and_constant():
    y = np.array([0, 1] * 50)
    bins = reliability_diagram(sigmoid(y.astype(float)), y)
    top = [b for b in bins if b["count"]][-1]
    assert top["balanced_accuracy"] == 1.0
    const = reliability_diagram(np.full(40, 0.5), np.arange(40) % 2)
    used = [b for b in const if b["count"]]
    assert len(used) == 1 and used[0]["lo"] == pytest.approx(0.5) and used[0]["confidence"] == 0.5
    assert sum(b["count"] for b in bins) == 100


def test_reliability_overconfident_falls_below_identity():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, 20_000)
    y = (rng.uniform(size=p.size) < p ** 2).astype(int)
    bins = [b for b in reliability_diagram(p, y) if b["count"] > 100]
    below = [b["positive_rate"] < b["confidence"] for b in bins]
    assert all(below)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 80), elements=st.floats(0, 1)))
def test_reliability_bins_partition(p):
    bins = reliability_diagram(p, (p > 0.3).astype(int))
    assert sum(b["count"] for b in bins) == len(p)
    assert bins[0]["lo"] == 0 and bins[-1]["hi"] == pytest.approx(1.0)


# ---------------------------------------------------------------- NPR


def test_npr_reference_value():
    assert npr_value(4.057 / 20, 335 / 221147) == pytest.approx(133.91, abs=0.01)


def test_npr_random_embeddings_near_one():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(2000, 16))
    y = (rng.uniform(size=2000) < 0.2).astype(int)
    all_q, pos_q = npr(emb, y, k=20)[0]
    assert 0.8 <= all_q <= 1.2
    assert 0.7 <= pos_q <= 1.3


def test_npr_all_positive_is_one():
    emb = np.random.default_rng(0).normal(size=(50, 4))
    assert npr(emb, np.ones(50, int), k=5)[0] == (1.0, 1.0)


def test_npr_clustered_embeddings_high():
    rng = np.random.default_rng(1)
    y = (np.arange(300) < 30).astype(int)
    emb = rng.normal(size=(300, 8)) + 5 * y[:, None]
    assert npr(emb, y, k=10)[0][1] > 5


# ---------------------------------------------------------------- co-occurrence


def test_cooccurrence_diagonal_is_per_class_auc():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, size=(200, 4))
    labels[:, 1] = labels[:, 0]
    scores = labels + rng.normal(scale=0.8, size=labels.shape)
    auc, corr, perm = cooccurrence_matrix(scores, labels)
    _, per = mauc(scores, labels)
    assert np.allclose(np.diag(auc), per)
    assert corr[0, 1] == pytest.approx(1.0)
    auc2, corr2, perm2 = cooccurrence_matrix(scores, labels, order=True)
    assert sorted(perm2.tolist()) == [0, 1, 2, 3]
    assert abs(perm2.tolist().index(0) - perm2.tolist().index(1)) == 1  # correlated pair kept adjacent
    assert np.allclose(auc2, auc[np.ix_(perm2, perm2)], equal_nan=True)


# ---------------------------------------------------------------- modality drop


def test_t2_like_predicate():
    assert t2_like("AX_T2_FLAIR") and t2_like("COR_T2") and t2_like("SAG_FLAIR_FS")
    assert not t2_like("AX_T1_POST") and not t2_like("AX_T1")


def test_modality_drop_direction_on_constructed_scores():
    rng = np.random.default_rng(3)
    n = 200
    labels = rng.integers(0, 2, size=(n, 2))
    views = []
    for i in range(n):
        seqs = [SeqView("AX_T2", None, np.array([labels[i, 0]])), SeqView("AX_T1", None, np.array([labels[i, 1]]))]
        views.append(StudyView(str(i), "MRI", seqs, []))

    def score(vs):
        out = rng.normal(scale=0.3, size=(len(vs), 2))
        for r, v in enumerate(vs):
            for s in v.seqs:
                out[r, 0 if s.name == "AX_T2" else 1] += s.select[0]
        return out

    res = modality_drop_eval(score, views, labels, t2_like)
    assert res["n"] == n
    assert res["delta"][0] > res["delta"][1]


# ---------------------------------------------------------------- scaling


def test_scaling_report_passes_and_fails():
    ok = scaling_harness([1.0, 0.25, 0.5], [0, 1, 2], lambda f, s: f + 0.01 * s)
    assert ok.fractions == [0.25, 0.5, 1.0] and ok.passes and not ok.inversions
    one_small = scaling_harness([0.25, 0.5, 1.0], [0, 1, 2],
                                lambda f, s: {0.25: 0.30, 0.5: 0.29, 1.0: 0.4}[f] + 0.05 * s)
    assert len(one_small.inversions) == 1 and one_small.passes
    big = scaling_harness([0.25, 0.5, 1.0], [0, 1, 2],
                          lambda f, s: {0.25: 0.6, 0.5: 0.2, 1.0: 0.1}[f] + 0.001 * s)
    assert not big.passes
