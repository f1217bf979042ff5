"""Retrieval, AUROC, calibration, neighbor and robustness metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass
class PredictionRecord:
    study_id: str
    logits: np.ndarray
    labels: np.ndarray
    attributes: dict = field(default_factory=dict)
    split: str = "test"

    def __post_init__(self):
        if not np.isfinite(self.logits).all():
            raise ValueError(f"{self.study_id}: non-finite logits")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"{self.study_id}: labels must be 0/1")


# ------------------------------------------------------------------ retrieval


def topk_retrieval(sim: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose own column is among the top ``k`` entries.

    Ties are resolved in expectation over a uniformly random tie order, so the
    value does not depend on how pairs are indexed.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or len(sim) == 0:
        raise ValueError("similarity matrix must be square and non-empty")
    diag = np.diag(sim)[:, None]
    greater = (sim > diag).sum(1)
    tied = (sim == diag).sum(1)            # includes the diagonal itself
    slots = k - greater
    credit = np.clip(slots / tied, 0.0, 1.0)
    return float(credit.mean())


def group_partition(n: int, group_size: int = 100, seed: int = 0) -> list[np.ndarray]:
    """Random disjoint groups; a short remainder group is dropped."""
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[i:i + group_size] for i in range(0, n - group_size + 1, group_size)]


def grouped_retrieval(sim: np.ndarray, group_size: int = 100, seed: int = 0, k: int = 1) -> float:
    groups = group_partition(len(sim), group_size, seed)
    if not groups:
        raise ValueError(f"fewer than {group_size} pairs")
    return float(np.mean([topk_retrieval(sim[np.ix_(g, g)], k) for g in groups]))


# ------------------------------------------------------------------ AUROC


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


def mauc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean AUROC over classes with both outcomes present; per-class values (nan if undefined)."""
    per = np.full(labels.shape[1], np.nan)
    for j in range(labels.shape[1]):
        if 0 < labels[:, j].sum() < len(labels):
            per[j] = auroc(scores[:, j], labels[:, j])
    return float(np.nanmean(per)), per


def records_to_arrays(records: Sequence[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([r.logits for r in records]), np.stack([r.labels for r in records])


# ------------------------------------------------------------------ calibration


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def reliability_diagram(probs: Sequence[float], labels: Sequence[int], bin_width: float = 0.1) -> list[dict]:
    """Per-bin mean confidence, positive rate, balanced accuracy and count.

    Bins are ``[lo, lo + w)`` with the last bin closed at 1.  Balanced accuracy
    thresholds at 0.5 and averages recall over the classes present in the bin.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_bins = int(round(1.0 / bin_width))
    which = np.minimum((p / bin_width).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = which == b
        rec = {"lo": b * bin_width, "hi": (b + 1) * bin_width, "count": int(sel.sum()),
               "confidence": np.nan, "positive_rate": np.nan, "balanced_accuracy": np.nan}
        if sel.any():
            pred = p[sel] >= 0.5
            recalls = [np.mean(pred[y[sel] == c] == c) for c in (0, 1) if (y[sel] == c).any()]
            rec.update(confidence=float(p[sel].mean()), positive_rate=float(y[sel].mean()),
                       balanced_accuracy=float(np.mean(recalls)))
        out.append(rec)
    return out


# ------------------------------------------------------------------ NPR


def npr_value(neighbor_positive_rate: float, dataset_positive_rate: float) -> float:
    return neighbor_positive_rate / dataset_positive_rate


def cosine_neighbors(query: np.ndarray, ref: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    q = query / np.linalg.norm(query, axis=1, keepdims=True)
    r = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    sim = q @ r.T
    if exclude_self:
        np.fill_diagonal(sim, -np.inf)
    return np.argsort(-sim, axis=1, kind="stable")[:, :k]


def npr(embeddings: np.ndarray, labels: np.ndarray, k: int = 20,
        query_embeddings: np.ndarray | None = None, query_labels: np.ndarray | None = None) -> dict[int, tuple[float, float]]:
    """Per-class (NPR over all queries, NPR over positive queries).

    With no separate query set, every reference study is a query and is
    excluded from its own neighbor list.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    loo = query_embeddings is None
    qe = embeddings if loo else query_embeddings
    ql = labels if loo else np.asarray(query_labels).reshape(len(qe), -1)
    nn_idx = cosine_neighbors(qe, embeddings, k, exclude_self=loo)
    out = {}
    for j in range(labels.shape[1]):
        rate = labels[:, j].mean()
        if rate == 0:
            out[j] = (np.nan, np.nan)
            continue
        per_query = labels[nn_idx, j].mean(axis=1) / rate
        pos = ql[:, j] == 1
        out[j] = (float(per_query.mean()), float(per_query[pos].mean()) if pos.any() else np.nan)
    return out


# ------------------------------------------------------------------ co-occurrence


def cooccurrence_matrix(scores: np.ndarray, labels: np.ndarray, order: bool = False):
    """AUC of every (logit i, label j) pair plus the label correlation matrix.

    With ``order=True`` rows/columns are reordered by average-linkage
    clustering of the label correlations; the permutation is returned.
    """
    L = labels.shape[1]
    auc = np.full((L, L), np.nan)
    for j in range(L):
        if 0 < labels[:, j].sum() < len(labels):
            for i in range(L):
                auc[i, j] = auroc(scores[:, i], labels[:, j])
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(labels.T.astype(float))
    corr = np.nan_to_num(corr)
    perm = np.arange(L)
    if order and L > 2:
        dist = np.clip(1 - corr, 0, 2)
        np.fill_diagonal(dist, 0)
        perm = leaves_list(linkage(squareform((dist + dist.T) / 2, checks=False), "average"))
        auc, corr = auc[np.ix_(perm, perm)], corr[np.ix_(perm, perm)]
    return auc, corr, perm


# ------------------------------------------------------------------ robustness harnesses


def modality_drop_eval(score_fn: Callable[[list], np.ndarray], views: Sequence, labels: np.ndarray,
                       drop: Callable[[str], bool]) -> dict:
    """AUROC per class with and without the sequences whose name matches ``drop``.

    ``score_fn`` maps study views to an (n, L) score array.  Studies that would
    lose every sequence are excluded from both evaluations.
    """
    from .objectives import StudyView

    kept, dropped_views = [], []
    for i, v in enumerate(views):
        remaining = [s for s in v.seqs if not drop(s.name)]
        if remaining:
            kept.append(i)
            dropped_views.append(StudyView(v.study_id, v.study_name, remaining, v.items))
    base_views = [views[i] for i in kept]
    y = labels[kept]
    full = score_fn(base_views)
    part = score_fn(dropped_views)
    _, auc_full = mauc(full, y)
    _, auc_drop = mauc(part, y)
    return {"auc_full": auc_full, "auc_dropped": auc_drop, "delta": auc_full - auc_drop, "n": len(kept)}


def t2_like(name: str) -> bool:
    up = name.upper()
    return "T2" in up or "FLAIR" in up


@dataclass
class ScalingReport:
    fractions: list[float]
    values: dict[float, list[float]]
    medians: list[float]
    noise_band: float
    inversions: list[tuple[float, float, float]]   # (from, to, drop)

    @property
    def passes(self) -> bool:
        """Non-decreasing medians, allowing one inversion no larger than the noise band."""
        return len(self.inversions) <= 1 and all(d <= self.noise_band for _, _, d in self.inversions)


def scaling_harness(fractions: Sequence[float], seeds: Sequence[int],
                    run: Callable[[float, int], float]) -> ScalingReport:
    """Run ``run(fraction, seed)`` on the grid and summarize the trend.

    The noise band is the mean (over fractions) of the across-seed standard
    deviation.
    """
    fractions = sorted(fractions)
    values = {f: [float(run(f, s)) for s in seeds] for f in fractions}
    med = [float(np.median(values[f])) for f in fractions]
    band = float(np.mean([np.std(values[f], ddof=1) if len(seeds) > 1 else 0.0 for f in fractions]))
    inv = [(a, b, ma - mb) for (a, ma), (b, mb) in zip(zip(fractions, med), zip(fractions[1:], med[1:])) if mb < ma]
    return ScalingReport(list(fractions), values, med, band, inv)
