"""Bias and fairness analysis: odds ratios, TPR/FPR disparities and a bootstrap protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

_REL_TOL = 1 + 1e-7


# ------------------------------------------------------------------ odds ratio


@dataclass(frozen=True)
class ContingencyTable:
    """Exposed: a outcome-positive, b outcome-negative; unexposed: c, d."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def has_zero(self) -> bool:
        return 0 in (self.a, self.b, self.c, self.d)

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass
class OddsRatioResult:
    odds_ratio: float
    p_value: float
    corrected: bool      # Haldane-Anscombe +0.5 applied


def _log_hypergeom(x: int, r1: int, c1: int, n: int) -> float:
    """log P(top-left = x) for fixed margins (row 1 total r1, column 1 total c1)."""
    return (math.lgamma(r1 + 1) - math.lgamma(x + 1) - math.lgamma(r1 - x + 1)
            + math.lgamma(n - r1 + 1) - math.lgamma(c1 - x + 1) - math.lgamma(n - r1 - c1 + x + 1)
            - math.lgamma(n + 1) + math.lgamma(c1 + 1) + math.lgamma(n - c1 + 1))


def fisher_exact(t: ContingencyTable) -> float:
    """Two-sided p: total probability of tables no more likely than the observed one."""
    r1, c1, n = t.a + t.b, t.a + t.c, t.n
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    logp = np.array([_log_hypergeom(x, r1, c1, n) for x in range(lo, hi + 1)])
    obs = logp[t.a - lo]
    p = np.exp(logp)
    # relative tolerance guards tables tied with the observed one against rounding
    tot = p[logp <= obs + math.log(_REL_TOL)].sum()
    return float(min(1.0, tot))


def odds_ratio(t: ContingencyTable) -> OddsRatioResult:
    p = fisher_exact(t)
    if t.has_zero:
        a, b, c, d = (v + 0.5 for v in (t.a, t.b, t.c, t.d))
        return OddsRatioResult((a * d) / (b * c), p, True)
    return OddsRatioResult((t.a * t.d) / (t.b * t.c), p, False)


def bonferroni(p_values: Sequence[float]) -> list[float]:
    m = len(p_values)
    return [min(1.0, p * m) for p in p_values]


# ------------------------------------------------------------------ Mann-Whitney


@dataclass
class MannWhitneyResult:
    u: float
    p_value: float
    method: str


def _exact_u_cdf(pooled_ranks2: tuple[int, ...], n1: int, u2_obs: int) -> float:
    """P(2U <= u2_obs) when n1 of the pooled doubled midranks are drawn uniformly.

    Dynamic program over how many items have been chosen and the running sum
    of their doubled ranks.
    """
    n = len(pooled_ranks2)
    # counts[k] maps rank-sum -> number of subsets of size k
    counts: list[dict[int, int]] = [dict() for _ in range(n1 + 1)]
    counts[0][0] = 1
    for r in pooled_ranks2:
        for k in range(min(n1, n) - 1, -1, -1):
            src = counts[k]
            if not src:
                continue
            dst = counts[k + 1]
            for s, c in src.items():
                dst[s + r] = dst.get(s + r, 0) + c
    offset = n1 * (n1 + 1)            # 2 * n1(n1+1)/2
    total = math.comb(n, n1)
    hit = sum(c for s, c in counts[n1].items() if s - offset <= u2_obs)
    return hit / total


def mann_whitney_less(x: Sequence[float], y: Sequence[float], exact_limit: int = 40) -> MannWhitneyResult:
    """One-sided test that ``x`` tends to be smaller than ``y``.

    ``U = R_x - n1(n1+1)/2`` with midranks; ``p = P(U <= U_obs)`` under random
    assignment of the pooled (tied) ranks.  Exact up to ``exact_limit`` total
    observations, otherwise the tie-corrected normal approximation.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks = rankdata(np.concatenate([x, y]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    n = n1 + n2
    if n <= exact_limit:
        r2 = tuple(int(round(2 * r)) for r in ranks)
        return MannWhitneyResult(u, _exact_u_cdf(r2, n1, int(round(2 * u))), "exact")
    _, counts = np.unique(ranks, return_counts=True)
    var = n1 * n2 / 12 * ((n + 1) - (counts ** 3 - counts).sum() / (n * (n - 1)))
    if var == 0:
        return MannWhitneyResult(u, 1.0, "normal")
    z = (u - n1 * n2 / 2 + 0.5) / math.sqrt(var)   # continuity correction toward the null
    return MannWhitneyResult(u, float(norm.cdf(z)), "normal")


# ------------------------------------------------------------------ disparities


@dataclass(frozen=True)
class SubgroupSpec:
    name: str
    predicate: Callable[[dict], bool]

    def __and__(self, other: "SubgroupSpec") -> "SubgroupSpec":
        return SubgroupSpec(f"{self.name} & {other.name}", lambda a: self.predicate(a) and other.predicate(a))

    @classmethod
    def equals(cls, key: str, value) -> "SubgroupSpec":
        return cls(f"{key}={value}", lambda a: a[key] == value)

    @classmethod
    def everyone(cls) -> "SubgroupSpec":
        return cls("all", lambda a: True)


class InsufficientPositives(ValueError):
    pass


@dataclass
class Rates:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def tpr(self) -> float:
        if self.tp + self.fn == 0:
            raise InsufficientPositives("no positives: TPR undefined")
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self) -> float:
        if self.fp + self.tn == 0:
            raise InsufficientPositives("no negatives: FPR undefined")
        return self.fp / (self.fp + self.tn)

    @classmethod
    def count(cls, y: np.ndarray, yhat: np.ndarray) -> "Rates":
        y, yhat = np.asarray(y).astype(bool), np.asarray(yhat).astype(bool)
        return cls(int((y & yhat).sum()), int((y & ~yhat).sum()), int((~y & yhat).sum()), int((~y & ~yhat).sum()))


@dataclass
class DisparityResult:
    subgroup: str
    class_index: int
    tpr_subgroup: float | None
    tpr_population: float | None
    fpr_subgroup: float | None
    fpr_population: float | None
    status: str = "ok"
    replicates_subgroup: list[float] = field(default_factory=list)
    replicates_population: list[float] = field(default_factory=list)
    p_value: float | None = None

    @property
    def tpr_disparity(self) -> float | None:
        if self.tpr_subgroup is None or self.tpr_population is None:
            return None
        return self.tpr_subgroup - self.tpr_population

    @property
    def fpr_disparity(self) -> float | None:
        if self.fpr_subgroup is None or self.fpr_population is None:
            return None
        return self.fpr_subgroup - self.fpr_population


@dataclass
class FairnessTable:
    """Binary predictions, labels and attributes for one evaluation set."""

    yhat: np.ndarray           # (n, L) 0/1
    y: np.ndarray              # (n, L) 0/1
    attributes: list[dict]

    def members(self, spec: SubgroupSpec) -> np.ndarray:
        return np.array([bool(spec.predicate(a)) for a in self.attributes])


def _safe(fn):
    try:
        return fn()
    except InsufficientPositives:
        return None


def tpr_fpr(table: FairnessTable, spec: SubgroupSpec, class_index: int) -> DisparityResult:
    g = table.members(spec)
    y, yh = table.y[:, class_index], table.yhat[:, class_index]
    sub, pop = Rates.count(y[g], yh[g]), Rates.count(y, yh)
    res = DisparityResult(spec.name, class_index, _safe(lambda: sub.tpr), _safe(lambda: pop.tpr),
                          _safe(lambda: sub.fpr), _safe(lambda: pop.fpr))
    if res.tpr_subgroup is None:
        res.status = "insufficient positives"
    return res


def bootstrap_disparity(table: FairnessTable, spec: SubgroupSpec, class_index: int, n: int = 200,
                        iters: int = 20, seed: int = 0, max_redraws: int = 1000) -> DisparityResult:
    """Replicate TPRs for the subgroup and a diagnosis-matched population sample.

    Each iteration draws ``n`` subgroup members with replacement, then for each
    of them one population member with the same label for the class under test.
    Draws with no positives are redrawn.  The p-value is the one-sided
    Mann-Whitney test that subgroup replicates are lower.
    """
    res = tpr_fpr(table, spec, class_index)
    if res.status != "ok":
        return res
    rng = np.random.default_rng(seed)
    g = np.flatnonzero(table.members(spec))
    y, yh = table.y[:, class_index].astype(bool), table.yhat[:, class_index].astype(bool)
    pool = {True: np.flatnonzero(y), False: np.flatnonzero(~y)}
    for _ in range(iters):
        for _attempt in range(max_redraws):
            sub = g[rng.integers(0, len(g), size=n)]
            if y[sub].any():
                break
        else:
            raise InsufficientPositives("could not draw a subgroup sample with positives")
        pop = np.array([pool[bool(y[i])][rng.integers(len(pool[bool(y[i])]))] for i in sub])
        res.replicates_subgroup.append(Rates.count(y[sub], yh[sub]).tpr)
        res.replicates_population.append(Rates.count(y[pop], yh[pop]).tpr)
    res.p_value = mann_whitney_less(res.replicates_subgroup, res.replicates_population).p_value
    return res


def exposure_table(exposed: np.ndarray, outcome: np.ndarray) -> ContingencyTable:
    e, o = np.asarray(exposed).astype(bool), np.asarray(outcome).astype(bool)
    return ContingencyTable(int((e & o).sum()), int((e & ~o).sum()), int((~e & o).sum()), int((~e & ~o).sum()))


def fairness_report(table: FairnessTable, specs: Sequence[SubgroupSpec], class_names: Sequence[str],
                    threshold: float = 0.1, exposures: dict[str, np.ndarray] | None = None,
                    outcome: np.ndarray | None = None, diagnostic_groups: dict[str, Sequence[int]] | None = None,
                    bootstrap: bool = True, seed: int = 0, n: int = 200, iters: int = 20) -> dict:
    """Per-(class, subgroup) disparities with flags, plus odds ratios for bias exposures.

    Bootstrap p-values are Bonferroni-corrected over the subgroups of each class.
    """
    rows = []
    for c, cname in enumerate(class_names):
        results = [bootstrap_disparity(table, s, c, n, iters, seed) if bootstrap else tpr_fpr(table, s, c)
                   for s in specs]
        ps = [r.p_value for r in results if r.p_value is not None]
        adj = iter(bonferroni(ps))
        for r in results:
            d = r.tpr_disparity
            rows.append({
                "class": cname, "subgroup": r.subgroup, "status": r.status,
                "tpr_subgroup": r.tpr_subgroup, "tpr_population": r.tpr_population, "tpr_disparity": d,
                "fpr_subgroup": r.fpr_subgroup, "fpr_population": r.fpr_population, "fpr_disparity": r.fpr_disparity,
                "p_value": r.p_value, "p_bonferroni": next(adj) if r.p_value is not None else None,
                "flagged": bool(d is not None and abs(d) > threshold),
                "intersectional": "&" in r.subgroup,
            })
    report = {"threshold": threshold, "disparities": rows, "odds_ratios": [], "diagnostic_groups": []}
    if exposures and outcome is not None:
        ors = []
        for name, exp in exposures.items():
            t = exposure_table(exp, outcome)
            r = odds_ratio(t)
            ors.append({"exposure": name, "table": [t.a, t.b, t.c, t.d], "odds_ratio": r.odds_ratio,
                        "p_value": r.p_value, "corrected": r.corrected})
        for o, p in zip(ors, bonferroni([o["p_value"] for o in ors])):
            o["p_bonferroni"] = p
        report["odds_ratios"] = ors
    if diagnostic_groups:
        # subgroup disparities pooled over the classes of each diagnostic category
        for gname, classes in diagnostic_groups.items():
            for s in specs:
                vals = [r["tpr_disparity"] for r in rows
                        if r["subgroup"] == s.name and r["class"] in {class_names[c] for c in classes}
                        and r["tpr_disparity"] is not None]
                report["diagnostic_groups"].append({"group": gname, "subgroup": s.name,
                                                    "mean_tpr_disparity": float(np.mean(vals)) if vals else None})
    return report
