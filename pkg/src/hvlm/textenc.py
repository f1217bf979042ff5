"""Text side: report summarization, keyword+client labeling, report LM, name encoders."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Transformer
from .synthcohort import NORMAL_FINDING, SEVERITIES, ClassSpec, RawReport

log = logging.getLogger(__name__)

UNLABELED = -1
UNK_NAME = "unk"
COMPARISON_TERMS = ("stable", "progression", "previous", "improved", "prior", "unchanged", "interval")

_FINDING_RE = re.compile(
    r"^(?P<severity>" + "|".join(SEVERITIES) + r") (?P<phrase>[a-z][a-z \-]*?) in the "
    r"(?P<side>left|right|midline) (?P<region>[a-z ]+?) region(?P<rest>,[^.]*)?\.?$",
    re.IGNORECASE,
)
_SENTENCE_SPLIT = re.compile(r"(?<=\.)\s+")


# ----------------------------------------------------------------- summarizer


@dataclass
class SummarizedReport:
    items: list[str]
    source_id: str = ""

    @property
    def normal(self) -> bool:
        return self.items == [NORMAL_FINDING]

    def text(self, order: Sequence[int] | None = None) -> str:
        items = self.items if order is None else [self.items[i] for i in order]
        return " ; ".join(items)

    def as_report(self) -> RawReport:
        """Render the items back as prose, for idempotence checks."""
        prose = " ".join(s[0].upper() + s[1:] + "." for s in self.items)
        return RawReport(prose, [])


def _parse_finding(sentence: str) -> str | None:
    m = _FINDING_RE.match(sentence.strip())
    if not m:
        return None
    s = f"{m['severity']} {m['phrase']} in the {m['side']} {m['region']} region".lower()
    # a comparison clause never belongs to the finding itself
    return s if not any(t in s.split() for t in COMPARISON_TERMS) else None


def summarize(report: RawReport, source_id: str = "") -> SummarizedReport:
    """Extract the itemized findings from report prose.

    Boilerplate sentences and comparison clauses are dropped.  When the report
    carries structured findings, only items matching one of them survive and
    the structured order is used.
    """
    parsed = [p for p in (_parse_finding(s) for s in _SENTENCE_SPLIT.split(report.prose)) if p]
    if report.findings:
        want = [f.text.lower() for f in report.findings]
        present = set(parsed)
        items = [w for w in want if w in present]
    else:
        items = list(dict.fromkeys(parsed))
    return SummarizedReport(items or [NORMAL_FINDING], source_id)


# -------------------------------------------------------------------- labeler


@dataclass(frozen=True)
class KeywordRule:
    class_name: str
    patterns: tuple[str, ...]

    def matches(self, text: str) -> bool:
        low = text.lower()
        return all(p.lower() in low for p in self.patterns)


def default_keyword_rules(classes: Sequence[ClassSpec]) -> list[KeywordRule]:
    return [KeywordRule(c.name, tuple(c.keywords)) for c in classes]


class LabelClientError(RuntimeError):
    pass


class LabelClient(Protocol):
    def ask(self, report: RawReport, rule: KeywordRule) -> bool:
        """True for a 'yes' answer; raises ``LabelClientError`` on failure."""


@dataclass
class MockLabelClient:
    """Answers from the structured findings, so it is exact on synthetic data."""

    calls: int = 0

    def ask(self, report: RawReport, rule: KeywordRule) -> bool:
        self.calls += 1
        return any(f.class_name == rule.class_name for f in report.findings)


@dataclass
class HTTPLabelClient:
    """Chat-completion style JSON client; one yes/no question per request."""

    endpoint: str
    model: str = "label-model"
    api_key_env: str = "LABEL_API_KEY"
    max_retries: int = 3
    backoff_s: float = 1.0
    timeout_s: float = 30.0
    transcript_path: str | Path | None = None

    def _prompt(self, report: RawReport, rule: KeywordRule) -> str:
        return (f"Radiology report:\n{report.prose}\n\n"
                f"Keywords: {', '.join(rule.patterns)}\n"
                f"Does this report describe {rule.class_name.replace('_', ' ')}? Answer yes or no.")

    def ask(self, report: RawReport, rule: KeywordRule) -> bool:
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "user", "content": self._prompt(report, rule)}]}).encode()
        headers = {"Content-Type": "application/json"}
        if os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    payload = json.loads(resp.read())
                answer = payload["choices"][0]["message"]["content"].strip().lower()
                self._log(rule, answer)
                if answer.startswith("yes"):
                    return True
                if answer.startswith("no"):
                    return False
                raise LabelClientError(f"unparseable answer {answer!r}")
            except (urllib.error.URLError, TimeoutError, KeyError, ValueError) as exc:
                last = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff_s * 2 ** attempt)
        raise LabelClientError(str(last))

    def _log(self, rule: KeywordRule, answer: str) -> None:
        if self.transcript_path is None:
            return
        with Path(self.transcript_path).open("a") as fh:
            fh.write(json.dumps({"class": rule.class_name, "answer": answer, "t": time.time()}) + "\n")


def label_report(report: RawReport, rules: Sequence[KeywordRule], client: LabelClient) -> np.ndarray:
    """Binary label per rule; keyword misses short-circuit to 0, client failures to ``UNLABELED``."""
    out = np.zeros(len(rules), dtype=np.int8)
    for i, rule in enumerate(rules):
        if not rule.matches(report.prose):
            continue
        try:
            out[i] = int(client.ask(report, rule))
        except LabelClientError as exc:
            log.warning("labeling %s failed: %s", rule.class_name, exc)
            out[i] = UNLABELED
    return out


# ---------------------------------------------------------------- vocabularies

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass
class WordVocab:
    words: list[str]
    PAD, UNK, BOS, EOS = 0, 1, 2, 3

    @classmethod
    def from_corpus(cls, texts: Sequence[str], min_count: int = 1) -> "WordVocab":
        counts = Counter(w for t in texts for w in _WORD_RE.findall(t.lower()))
        kept = sorted(w for w, c in counts.items() if c >= min_count)
        return cls(["<pad>", "<unk>", "<bos>", "<eos>"] + kept)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, max_len: int = 64) -> list[int]:
        ids = [self.index.get(w, self.UNK) for w in _WORD_RE.findall(text.lower())]
        return [self.BOS] + ids[: max_len - 2] + [self.EOS]

    def batch(self, texts: Sequence[str], max_len: int = 64) -> torch.Tensor:
        seqs = [self.encode(t, max_len) for t in texts]
        out = torch.full((len(seqs), max(map(len, seqs))), self.PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.tensor(s)
        return out


CHARSET = "".join(chr(c) for c in range(32, 127))


def encode_chars(names: Sequence[str], max_len: int = 24) -> torch.Tensor:
    """Character ids (0 = pad, 1 = unknown char) for a batch of names."""
    out = torch.zeros(len(names), max_len, dtype=torch.long)
    for i, n in enumerate(names):
        ids = [CHARSET.find(c) + 2 if c in CHARSET else 1 for c in n[:max_len]] or [1]
        out[i, : len(ids)] = torch.tensor(ids)
    return out


# ------------------------------------------------------------------ report LM


@dataclass
class LMConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 64
    proj_dim: int = 128


class ReportEncoder(nn.Module):
    """Causal word-level LM ``G`` with mean-pooled readout and projection ``P_R``."""

    def __init__(self, vocab: WordVocab, cfg: LMConfig = LMConfig()):
        super().__init__()
        self.vocab, self.cfg = vocab, cfg
        self.embed = nn.Embedding(len(vocab), cfg.dim)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.dim) * 0.02)
        self.body = Transformer(cfg.dim, cfg.layers, cfg.heads, cfg.dim // cfg.heads)
        self.lm_head = nn.Linear(cfg.dim, len(vocab))
        self.proj = nn.Linear(cfg.dim, cfg.proj_dim)

    def hidden(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pad = ids == WordVocab.PAD
        h = self.embed(ids) + self.pos[: ids.shape[1]]
        return self.body(h, pad, causal=True), pad

    def logits(self, ids: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden(ids)[0])

    def next_token_probs(self, ids: torch.Tensor) -> torch.Tensor:
        return self.logits(ids).softmax(-1)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids = self.vocab.batch(texts, self.cfg.max_len).to(self.pos.device)
        h, pad = self.hidden(ids)
        keep = (~pad).float()[..., None]
        pooled = (h * keep).sum(1) / keep.sum(1)
        return self.proj(pooled)


def lm_loss(model: ReportEncoder, ids: torch.Tensor) -> torch.Tensor:
    logits = model.logits(ids[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1),
                           ignore_index=WordVocab.PAD)


@dataclass
class LMHParams:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0
    config: LMConfig = field(default_factory=LMConfig)


@torch.no_grad()
def perplexity(model: ReportEncoder, texts: Sequence[str], batch_size: int = 64) -> float:
    model.eval()
    tot, n = 0.0, 0
    for i in range(0, len(texts), batch_size):
        ids = model.vocab.batch(texts[i:i + batch_size], model.cfg.max_len)
        count = int((ids[:, 1:] != WordVocab.PAD).sum())
        tot += float(lm_loss(model, ids)) * count
        n += count
    return math.exp(tot / max(n, 1))


def pretrain_report_lm(reports: Sequence[str], hp: LMHParams | None = None,
                       val_reports: Sequence[str] | None = None,
                       vocab: WordVocab | None = None) -> tuple[ReportEncoder, list[dict]]:
    """Next-word pretraining; returns the encoder and per-epoch validation perplexity."""
    hp = hp or LMHParams()
    rng = np.random.default_rng(hp.seed)
    torch.manual_seed(hp.seed)
    reports = list(reports)
    if val_reports is None:
        perm = rng.permutation(len(reports))
        n_val = max(1, int(hp.val_fraction * len(reports)))
        val_reports = [reports[i] for i in perm[:n_val]]
        reports = [reports[i] for i in perm[n_val:]]
    vocab = vocab or WordVocab.from_corpus(list(reports) + list(val_reports))
    model = ReportEncoder(vocab, hp.config)
    opt = torch.optim.AdamW(model.parameters(), lr=hp.lr)
    history = [{"epoch": 0, "val_ppl": perplexity(model, val_reports)}]
    for epoch in range(1, hp.epochs + 1):
        model.train()
        order = rng.permutation(len(reports))
        for i in range(0, len(order), hp.batch_size):
            ids = vocab.batch([reports[j] for j in order[i:i + hp.batch_size]], hp.config.max_len)
            loss = lm_loss(model, ids)
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append({"epoch": epoch, "val_ppl": perplexity(model, val_reports)})
    return model, history


# ---------------------------------------------------------------- name encoder


class NameEncoder(nn.Module):
    """Character-level transformer over a sequence or study name."""

    def __init__(self, out_dim: int = 32, dim: int = 32, layers: int = 3, heads: int = 2, max_len: int = 24):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(len(CHARSET) + 2, dim, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.body = Transformer(dim, layers, heads, dim // heads)
        self.out = nn.Linear(dim, out_dim)
        self.out_dim = out_dim

    def forward(self, names: Sequence[str]) -> torch.Tensor:
        ids = encode_chars(names, self.max_len).to(self.pos.device)
        pad = ids == 0
        h = self.body(self.embed(ids) + self.pos, pad)
        keep = (~pad).float()[..., None]
        return self.out((h * keep).sum(1) / keep.sum(1))


def grid_summary(grid) -> torch.Tensor:
    """Fixed-size descriptor of a token grid for the name-pretraining encoder."""
    lat = grid.latents[grid.kept] if grid.kept.any() else grid.latents
    extent = grid.coords.max(0).astype(np.float32) + 1
    feats = np.concatenate([lat.mean(0), lat.std(0), extent / extent.sum()])
    return torch.from_numpy(feats.astype(np.float32))


def _clip_ce(a: torch.Tensor, b: torch.Tensor, scale: float) -> torch.Tensor:
    logits = F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T * scale
    t = torch.arange(len(a))
    return F.cross_entropy(logits, t) + F.cross_entropy(logits.T, t)


@dataclass
class NamePretrainHParams:
    steps: int = 300
    batch_size: int = 32
    lr: float = 2e-3
    out_dim: int = 32
    logit_scale: float = 10.0
    seed: int = 0


def pretrain_name_encoder(pairs: Sequence[tuple[str, object]], hp: NamePretrainHParams | None = None
                          ) -> tuple[NameEncoder, nn.Module, list[dict]]:
    """CLIP between name embeddings and a small encoder ``V`` of the token grid."""
    hp = hp or NamePretrainHParams()
    torch.manual_seed(hp.seed)
    rng = np.random.default_rng(hp.seed)
    names = [n for n, _ in pairs]
    feats = torch.stack([grid_summary(g) for _, g in pairs])
    enc = NameEncoder(hp.out_dim)
    V = nn.Sequential(nn.Linear(feats.shape[1], 64), nn.GELU(), nn.Linear(64, hp.out_dim))
    opt = torch.optim.AdamW(list(enc.parameters()) + list(V.parameters()), lr=hp.lr)
    history = []
    for step in range(1, hp.steps + 1):
        idx = rng.choice(len(pairs), size=min(hp.batch_size, len(pairs)), replace=False)
        loss = _clip_ce(enc([names[i] for i in idx]), V(feats[idx]), hp.logit_scale)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == hp.steps:
            history.append({"step": step, "loss": float(loss.detach())})
    return enc, V, history


@torch.no_grad()
def name_retrieval_top1(enc: NameEncoder, V: nn.Module, pairs: Sequence[tuple[str, object]]) -> float:
    """Fraction of grids whose own name scores highest (ties count as hits only if unique-name)."""
    names = [n for n, _ in pairs]
    uniq = sorted(set(names))
    sims = F.normalize(V(torch.stack([grid_summary(g) for _, g in pairs])), dim=-1) @ \
        F.normalize(enc(uniq), dim=-1).T
    pred = sims.argmax(1).tolist()
    return float(np.mean([uniq[p] == n for p, n in zip(pred, names)]))
