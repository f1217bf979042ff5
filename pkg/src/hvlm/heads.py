"""Transfer heads trained on frozen study embeddings."""

from __future__ import annotations

import copy
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .evalmetrics import mauc

log = logging.getLogger(__name__)

ACUITY_ORDER = ("normal", "medium", "high")


class MLPHead(nn.Module):
    """Three linear layers: in -> 2*in -> in -> out."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, 2 * in_dim), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(2 * in_dim, in_dim), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(in_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


def positive_weights(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``p_i = negatives / positives`` per class, and the mask of usable classes.

    Classes without positives get weight nan and are excluded with a warning.
    """
    y = np.asarray(labels)
    pos = y.sum(0).astype(np.float64)
    neg = len(y) - pos
    ok = pos > 0
    w = np.full(y.shape[1], np.nan)
    w[ok] = neg[ok] / pos[ok]
    if not ok.all():
        warnings.warn(f"classes {np.flatnonzero(~ok).tolist()} have no positives in the training split; excluded")
    return w, ok


def fuse_context(study_emb: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    study_emb, ctx = np.atleast_2d(study_emb), np.atleast_2d(ctx)
    if len(study_emb) != len(ctx):
        raise ValueError("embedding and context counts differ")
    return np.concatenate([study_emb, ctx], axis=1)


@dataclass
class HashContextProvider:
    """Deterministic stand-in for a clinical text embedding service."""

    dim: int = 16
    seed: int = 0

    def embed(self, text: str) -> np.ndarray:
        h = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        v = np.random.default_rng(int.from_bytes(h[:8], "little")).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])

    def embed_findings(self, class_names: Sequence[Sequence[str]]) -> np.ndarray:
        """Context vector as the sum of per-finding hashes (zero for no findings)."""
        return np.stack([sum((self.embed(c) for c in names), np.zeros(self.dim)) for names in class_names])


@dataclass
class HeadHParams:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dropout: float = 0.1
    seed: int = 0


@dataclass
class TrainedHead:
    model: MLPHead
    mean: np.ndarray
    std: np.ndarray
    kind: str
    classes: np.ndarray | None = None        # indices of the classes the head predicts
    best_epoch: int = 0
    best_metric: float = float("nan")
    history: list[dict] = field(default_factory=list)

    @torch.no_grad()
    def logits(self, x: np.ndarray) -> np.ndarray:
        self.model.eval()
        z = torch.from_numpy(((np.asarray(x) - self.mean) / self.std).astype(np.float32))
        return self.model(z).numpy().astype(np.float64)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.logits(x)
        if self.kind == "multilabel":
            return 1.0 / (1.0 + np.exp(-out))
        if self.kind == "multiclass":
            e = np.exp(out - out.max(1, keepdims=True))
            return e / e.sum(1, keepdims=True)
        if self.kind == "ordinal":
            return ordinal_probs(out)
        return out[:, 0] * self.target_scale + self.target_shift

    target_scale: float = 1.0
    target_shift: float = 0.0


def _fit(x, y, xv, yv, out_dim: int, loss_fn, score_fn: Callable[[np.ndarray], float],
         hp: HeadHParams, kind: str, higher_is_better: bool = True) -> TrainedHead:
    torch.manual_seed(hp.seed)
    rng = np.random.default_rng(hp.seed)
    mean, std = x.mean(0), x.std(0) + 1e-6
    head = TrainedHead(MLPHead(x.shape[1], out_dim, hp.dropout), mean, std, kind)
    xt = torch.from_numpy(((x - mean) / std).astype(np.float32))
    yt = torch.from_numpy(np.asarray(y))
    opt = torch.optim.AdamW(head.model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    best_state, best = None, -np.inf
    for epoch in range(1, hp.epochs + 1):
        head.model.train()
        order = rng.permutation(len(x))
        for i in range(0, len(order), hp.batch_size):
            b = torch.from_numpy(order[i:i + hp.batch_size])
            loss = loss_fn(head.model(xt[b]), yt[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        metric = score_fn(head.logits(xv))
        signed = metric if higher_is_better else -metric
        head.history.append({"epoch": epoch, "val": metric})
        if signed > best:
            best, best_state = signed, copy.deepcopy(head.model.state_dict())
            head.best_epoch, head.best_metric = epoch, metric
    head.model.load_state_dict(best_state)
    return head


def train_diagnosis_head(x: np.ndarray, y: np.ndarray, xv: np.ndarray, yv: np.ndarray,
                         hp: HeadHParams | None = None) -> TrainedHead:
    """Positive-weighted BCE head; best epoch chosen by validation mean AUROC."""
    hp = hp or HeadHParams()
    w, ok = positive_weights(y)
    cls = np.flatnonzero(ok)
    pw = torch.tensor(w[cls], dtype=torch.float32)

    def loss(logits, target):
        return F.binary_cross_entropy_with_logits(logits, target.float(), pos_weight=pw)

    def score(logits):
        return mauc(logits, yv[:, cls])[0]

    head = _fit(x, y[:, cls].astype(np.float32), xv, yv, len(cls), loss, score, hp, "multilabel")
    head.classes = cls
    return head


train_referral_head = train_diagnosis_head


def ordinal_probs(cum_logits: np.ndarray) -> np.ndarray:
    """Class probabilities from cumulative logits ``P(y > j)``, j = 0 .. K-2."""
    above = 1.0 / (1.0 + np.exp(-np.asarray(cum_logits, dtype=np.float64)))
    above = np.minimum.accumulate(above, axis=1)    # keep P(y > j) non-increasing in j
    ones = np.ones((len(above), 1))
    zeros = np.zeros((len(above), 1))
    edges = np.concatenate([ones, above, zeros], axis=1)
    return edges[:, :-1] - edges[:, 1:]


def _ordinal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    thresholds = torch.arange(logits.shape[1])
    return F.binary_cross_entropy_with_logits(logits, (target[:, None] > thresholds).float())


def train_acuity_head(x: np.ndarray, acuity: Sequence[int], xv: np.ndarray, acuity_v: Sequence[int],
                      hp: HeadHParams | None = None, loss: str = "ce") -> TrainedHead:
    """Acuity head; best epoch by validation accuracy.

    ``loss="ce"`` is three-way cross-entropy; ``"ordinal"`` fits binary
    cumulative targets ``y > 0`` and ``y > 1`` (ablation).
    """
    hp = hp or HeadHParams()
    a, av = np.asarray(acuity, dtype=np.int64), np.asarray(acuity_v, dtype=np.int64)
    k = len(ACUITY_ORDER)
    if loss == "ce":
        return _fit(x, a, xv, av, k, F.cross_entropy,
                    lambda lg: float((lg.argmax(1) == av).mean()), hp, "multiclass")
    if loss == "ordinal":
        return _fit(x, a, xv, av, k - 1, _ordinal_loss,
                    lambda lg: float((ordinal_probs(lg).argmax(1) == av).mean()), hp, "ordinal")
    raise ValueError(f"unknown acuity loss {loss!r}")


def priority_score(probs: np.ndarray) -> np.ndarray:
    """Expected ordinal acuity, normalized to [0, 1]."""
    levels = np.arange(probs.shape[1])
    return probs @ levels / levels[-1]


def train_age_head(x: np.ndarray, ages: np.ndarray, xv: np.ndarray, ages_v: np.ndarray,
                   hp: HeadHParams | None = None) -> TrainedHead:
    """L2 regression on standardized age; best epoch by validation MAE."""
    hp = hp or HeadHParams()
    shift, scale = float(np.mean(ages)), float(np.std(ages)) or 1.0
    t = ((np.asarray(ages) - shift) / scale).astype(np.float32)[:, None]

    def mae(lg):
        return float(np.abs(lg[:, 0] * scale + shift - ages_v).mean())

    head = _fit(x, t, xv, ages_v, 1, F.mse_loss, mae, hp, "regression", higher_is_better=False)
    head.target_scale, head.target_shift = scale, shift
    return head


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n: int = 3) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def embedding_checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
