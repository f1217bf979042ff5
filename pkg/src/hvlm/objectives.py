"""Contrastive study/report objective, patient discrimination loss, and the CLIP training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .hvit import HierarchicalEncoder, SequenceInput, StudyInput, token_features
from .textenc import UNK_NAME, ReportEncoder, SummarizedReport
from .voltok import TokenGrid

log = logging.getLogger(__name__)

SELF_FILL = -10.0
MAX_LOGIT_SCALE = 100.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: dict | None):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------- losses


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm {what} embedding: cosine similarity undefined")
    return x / norms


def clip_loss(m: torch.Tensor, r: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE on cosine similarities scaled by ``exp(tau)``.

    Returns the sum of the study->report and report->study cross-entropies.
    """
    if len(m) != len(r) or len(m) < 1:
        raise ValueError("need matched, non-empty study/report batches")
    tau = torch.as_tensor(tau, dtype=m.dtype)
    logits = _unit(m, "study") @ _unit(r, "report").T * tau.exp()
    target = torch.arange(len(m))
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def patient_discrimination_loss(u: torch.Tensor, study_index: torch.Tensor, tau_p: torch.Tensor | float,
                                self_mode: str = "suppress") -> torch.Tensor:
    """Sequence-level contrastive loss whose positives are the other sequences of the same study.

    ``self_mode="suppress"`` fills each self-similarity logit with -10 before the
    softmax (the self pair stays in the positive set); ``"include"`` keeps the
    raw self logit.  Per-sequence terms are weighted by 1/n_i and averaged over
    the k studies.
    """
    if self_mode not in ("suppress", "include"):
        raise ValueError(f"unknown self_mode {self_mode!r}")
    study_index = torch.as_tensor(study_index)
    tau_p = torch.as_tensor(tau_p, dtype=u.dtype)
    z = _unit(u, "sequence")
    logits = z @ z.T / tau_p
    if self_mode == "suppress":
        eye = torch.eye(len(u), dtype=torch.bool)
        logits = logits.masked_fill(eye, SELF_FILL)
    same = study_index[:, None] == study_index[None, :]
    log_num = torch.logsumexp(logits.masked_fill(~same, -torch.inf), dim=1)
    log_den = torch.logsumexp(logits, dim=1)
    n_i = same.sum(1).to(u.dtype)
    k = len(torch.unique(study_index))
    return ((log_den - log_num) / n_i).sum() / k


def combined_loss(clip: torch.Tensor, patdis: torch.Tensor, lam: float = 0.03) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return clip if lam == 0 else clip + lam * patdis


# ---------------------------------------------------------------------- batches


@dataclass
class StudyExample:
    """Pre-tokenized study ready for training."""

    study_id: str
    study_name: str
    grids: list[TokenGrid]
    report: SummarizedReport
    labels: np.ndarray
    abnormal: bool


@dataclass
class SeqView:
    name: str
    grid: TokenGrid
    select: np.ndarray


@dataclass
class StudyView:
    study_id: str
    study_name: str
    seqs: list[SeqView]
    items: list[str]

    @classmethod
    def of(cls, ex: StudyExample) -> "StudyView":
        seqs = [SeqView(g.seq_name, g, np.flatnonzero(g.kept)) for g in ex.grids]
        return cls(ex.study_id, ex.study_name, [s for s in seqs if len(s.select)], list(ex.report.items))

    def to_input(self, pos_dim_per_axis: int = 6, pos_base: float = 10000.0) -> StudyInput:
        return StudyInput(self.study_name, [
            SequenceInput(s.name, token_features(s.grid, s.select, pos_dim_per_axis, pos_base)) for s in self.seqs])

    @property
    def report_text(self) -> str:
        return " ; ".join(self.items)


@dataclass
class AugmentationPolicy:
    shuffle_items: float = 0.0
    token_drop: float = 0.0          # per-token drop probability
    name_unk: float = 0.0            # per-sequence probability of "unk" name
    threshold_jitter: float = 0.0    # uniform +- jitter on the filter threshold
    seq_drop: float = 0.0            # per-sequence drop probability

    @classmethod
    def default(cls) -> "AugmentationPolicy":
        return cls(shuffle_items=1.0, token_drop=0.1, name_unk=0.1, threshold_jitter=0.01, seq_drop=0.1)


def apply_augmentations(batch: Sequence[StudyView], policy: AugmentationPolicy,
                        rng: np.random.Generator) -> list[StudyView]:
    """Return augmented copies; inputs are not modified.

    Every sequence keeps at least one token and every study keeps at least one
    sequence.
    """
    out = []
    for st in batch:
        items = list(st.items)
        if policy.shuffle_items and rng.random() < policy.shuffle_items:
            items = [items[i] for i in rng.permutation(len(items))]
        seqs = []
        for s in st.seqs:
            select = s.select
            if policy.threshold_jitter:
                thr = s.grid.threshold + rng.uniform(-policy.threshold_jitter, policy.threshold_jitter)
                moved = np.flatnonzero(s.grid.intensity >= thr)
                select = moved if len(moved) else select
            if policy.token_drop:
                keep = rng.random(len(select)) >= policy.token_drop
                if not keep.any():
                    keep[rng.integers(len(select))] = True
                select = select[keep]
            name = UNK_NAME if policy.name_unk and rng.random() < policy.name_unk else s.name
            seqs.append(SeqView(name, s.grid, select))
        if policy.seq_drop and len(seqs) > 1:
            keep = rng.random(len(seqs)) >= policy.seq_drop
            if not keep.any():
                keep[rng.integers(len(seqs))] = True
            seqs = [s for s, k in zip(seqs, keep) if k]
        out.append(StudyView(st.study_id, st.study_name, seqs, items))
    return out


def sampling_weights(abnormal: Sequence[bool], upsample: float = 4.0) -> np.ndarray:
    w = np.where(np.asarray(abnormal, dtype=bool), float(upsample), 1.0)
    return w / w.sum()


def expected_abnormal_share(base: float, upsample: float = 4.0) -> float:
    return upsample * base / (upsample * base + (1.0 - base))


def build_sampler(abnormal: Sequence[bool], upsample: float = 4.0,
                  rng: np.random.Generator | None = None) -> Iterator[int]:
    """Infinite stream of study indices with abnormal studies weighted ``upsample``:1."""
    rng = rng or np.random.default_rng(0)
    p = sampling_weights(abnormal, upsample)
    while True:
        yield from rng.choice(len(p), size=1024, p=p).tolist()


def draw_batch(sampler: Iterator[int], batch_size: int, n_available: int) -> list[int]:
    """Next ``batch_size`` distinct indices from the stream."""
    want = min(batch_size, n_available)
    seen: dict[int, None] = {}
    while len(seen) < want:
        seen.setdefault(next(sampler))
    return list(seen)


# ---------------------------------------------------------------------- model


class ClipModel(nn.Module):
    def __init__(self, encoder: HierarchicalEncoder, report_encoder: ReportEncoder, proj_dim: int = 128,
                 patdis_dim: int = 64, tau_init: float = 0.07, tau_p_init: float = 0.1):
        super().__init__()
        self.encoder = encoder
        self.report_encoder = report_encoder
        self.proj_m = nn.Linear(encoder.output_dim, proj_dim)                      # P_M
        seq_dim = encoder.seq_cfg.output_dim
        self.proj_patdis = nn.Sequential(nn.Linear(seq_dim, seq_dim), nn.GELU(), nn.Linear(seq_dim, patdis_dim))
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))
        self.log_tau_p = nn.Parameter(torch.tensor(math.log(tau_p_init)))

    @property
    def tau_p(self) -> torch.Tensor:
        return self.log_tau_p.exp()

    def clamp_temperature(self) -> None:
        with torch.no_grad():
            self.tau.clamp_(max=math.log(MAX_LOGIT_SCALE))

    def encode_studies(self, views: Sequence[StudyView]):
        c = self.encoder.seq_cfg
        v, r, owner = self.encoder([s.to_input(c.pos_dim_per_axis, c.pos_base) for s in views])
        return v, r, owner

    def encode_reports(self, texts: Sequence[str]) -> torch.Tensor:
        uniq = sorted(set(texts))
        emb = self.report_encoder(uniq)
        where = {t: i for i, t in enumerate(uniq)}
        return emb[[where[t] for t in texts]]

    def losses(self, views: Sequence[StudyView], lam: float = 0.03, self_mode: str = "suppress") -> dict:
        v, r, owner = self.encode_studies(views)
        m = self.proj_m(v)
        rep = self.encode_reports([s.report_text for s in views])
        lc = clip_loss(m, rep, self.tau)
        out = {"clip": lc}
        if lam > 0 and r is not None:
            lp = patient_discrimination_loss(self.proj_patdis(r), owner, self.tau_p, self_mode)
            out["patdis"] = lp
            out["total"] = combined_loss(lc, lp, lam)
        else:
            out["total"] = lc
        return out

    @torch.no_grad()
    def similarity(self, views: Sequence[StudyView], batch_size: int = 64) -> np.ndarray:
        """Study x report cosine similarity matrix."""
        self.eval()
        ms = []
        for i in range(0, len(views), batch_size):
            v, _, _ = self.encode_studies(views[i:i + batch_size])
            ms.append(F.normalize(self.proj_m(v), dim=-1))
        m = torch.cat(ms)
        rep = F.normalize(self.encode_reports([s.report_text for s in views]), dim=-1)
        return (m @ rep.T).numpy().astype(np.float64)

    @torch.no_grad()
    def study_embeddings(self, views: Sequence[StudyView], batch_size: int = 64) -> np.ndarray:
        self.eval()
        out = [self.encode_studies(views[i:i + batch_size])[0] for i in range(0, len(views), batch_size)]
        return torch.cat(out).numpy().astype(np.float64)


# ---------------------------------------------------------------------- training


@dataclass
class ClipHParams:
    steps: int = 600
    batch_size: int = 32
    lr: float = 3e-4
    temperature_lr: float = 1e-2
    weight_decay: float = 0.01
    warmup: int = 20
    lam: float = 0.03
    self_mode: str = "suppress"
    abnormal_upsample: float = 4.0
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy.default)
    eval_every: int = 50
    target_top1: float | None = None     # stop once validation top-1 reaches this
    seed: int = 0


def _lr_lambda(hp: ClipHParams):
    def f(step: int) -> float:
        if step < hp.warmup:
            return (step + 1) / hp.warmup
        t = (step - hp.warmup) / max(1, hp.steps - hp.warmup)
        return 0.5 * (1 + math.cos(math.pi * min(1.0, t)))
    return f


def train_clip(model: ClipModel, train: Sequence[StudyExample], val: Sequence[StudyExample],
               hp: ClipHParams | None = None, log_fn=None,
               to_view: Callable[[StudyExample], StudyView] = StudyView.of) -> list[dict]:
    """Train with AdamW + cosine decay; returns line-delimitable metric records."""
    from .evalmetrics import topk_retrieval

    hp = hp or ClipHParams()
    torch.manual_seed(hp.seed)
    rng = np.random.default_rng(hp.seed)
    temps = [model.tau, model.log_tau_p]
    others = [p for p in model.parameters() if all(p is not t for t in temps)]
    opt = torch.optim.AdamW([{"params": others, "lr": hp.lr},
                             {"params": temps, "lr": hp.temperature_lr, "weight_decay": 0.0}],
                            weight_decay=hp.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(hp))
    base_views = [to_view(e) for e in train]
    val_views = [to_view(e) for e in val]
    sampler = build_sampler([e.abnormal for e in train], hp.abnormal_upsample, rng)
    history: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())

    def evaluate(step: int, losses: dict | None) -> dict:
        sim = model.similarity(val_views)
        rec = {"step": step,
               "top1": topk_retrieval(sim, 1), "top5": topk_retrieval(sim, 5),
               "tau": float(model.tau.detach()), "tau_p": float(model.tau_p.detach())}
        if losses:
            rec.update({k: float(v.detach()) for k, v in losses.items()})
        history.append(rec)
        if log_fn:
            log_fn(rec)
        return rec

    evaluate(0, None)
    for step in range(1, hp.steps + 1):
        model.train()
        idx = draw_batch(sampler, hp.batch_size, len(base_views))
        views = apply_augmentations([base_views[i] for i in idx], hp.augment, rng)
        losses = model.losses(views, hp.lam, hp.self_mode)
        if not torch.isfinite(losses["total"]):
            model.load_state_dict(last_good)
            raise TrainingDiverged(step, last_good)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        sched.step()
        model.clamp_temperature()
        if step % hp.eval_every == 0 or step == hp.steps:
            last_good = copy.deepcopy(model.state_dict())
            rec = evaluate(step, losses)
            if hp.target_top1 is not None and rec["top1"] >= hp.target_top1:
                break
    return history


def steps_to_target(history: Sequence[dict], key: str, target: float) -> int | None:
    for rec in history:
        if rec[key] >= target:
            return rec["step"]
    return None
