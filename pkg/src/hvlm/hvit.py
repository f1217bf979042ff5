"""Hierarchical transformers: a sequence encoder over volume tokens and a study
encoder over the sequence vectors.

Each token is fed as ``latent || sinusoid(coords) || plane one-hot`` and
linearly embedded.  The sequence transformer sees ``[registers ; name ; tokens]``
and returns a linear readout of its concatenated registers; the study
transformer sees ``[registers ; study name ; P(r_1) .. P(r_m)]`` and returns its
concatenated registers unchanged.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .layers import Transformer, block_parameter_count, sinusoid
from .synthcohort import PLANES
from .textenc import UNK_NAME, NameEncoder
from .voltok import TokenGrid

CHECKPOINT_MAGIC = b"HVCK"


class EmptySequenceError(ValueError):
    def __init__(self, name: str = ""):
        super().__init__(f"empty sequence after filtering{': ' + name if name else ''}")


@dataclass
class SequenceEncoderConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    n_registers: int = 4
    output_dim: int = 64
    latent_dim: int = 8
    pos_dim_per_axis: int = 6
    name_dim: int = 32
    pos_base: float = 10000.0
    readout: str = "registers"      # or "tokens" (ablation)

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def input_dim(self) -> int:
        return self.latent_dim + 3 * self.pos_dim_per_axis + len(PLANES)

    @classmethod
    def paper(cls) -> "SequenceEncoderConfig":
        return cls(15, 16, 64, 20, 1024, 256, 10, 32)


@dataclass
class StudyEncoderConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    n_registers: int = 4
    output_dim: int = 128
    name_dim: int = 32
    use_study_name: bool = True

    @property
    def width(self) -> int:
        if self.output_dim % self.n_registers:
            raise ValueError("output_dim must be divisible by n_registers")
        return self.output_dim // self.n_registers

    @classmethod
    def paper(cls) -> "StudyEncoderConfig":
        return cls(4, 8, 64, 10, 10240, 32)


# ------------------------------------------------------------------ inputs


def token_features(grid: TokenGrid, select: np.ndarray | None = None, pos_dim_per_axis: int = 6,
                   pos_base: float = 10000.0) -> np.ndarray:
    """``latent || sinusoid(coords) || plane one-hot`` for the selected tokens.

    Coordinates are patch-grid indices in the sequence's own stored axes.
    """
    idx = np.flatnonzero(grid.kept) if select is None else np.asarray(select)
    coords = torch.from_numpy(grid.coords[idx].astype(np.float32))
    pos = sinusoid(coords, pos_dim_per_axis, pos_base).reshape(len(idx), -1).numpy()
    plane = np.zeros((len(idx), len(PLANES)), dtype=np.float32)
    plane[:, PLANES.index(grid.source_plane)] = 1.0
    return np.concatenate([grid.latents[idx], pos, plane], axis=1).astype(np.float32)


@dataclass
class SequenceInput:
    name: str
    features: np.ndarray   # (n_tokens, input_dim)


@dataclass
class StudyInput:
    study_name: str
    sequences: list[SequenceInput]


@dataclass
class StudyEmbedding:
    vector: torch.Tensor
    per_sequence: dict[str, torch.Tensor] = field(default_factory=dict)


def _pad(features: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(f) for f in features)
    d = features[0].shape[1]
    x = torch.zeros(len(features), n, d)
    pad = torch.ones(len(features), n, dtype=torch.bool)
    for i, f in enumerate(features):
        x[i, : len(f)] = torch.from_numpy(f)
        pad[i, : len(f)] = False
    return x, pad


# ------------------------------------------------------------------ encoders


class SequenceEncoder(nn.Module):
    def __init__(self, cfg: SequenceEncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.token_in = nn.Linear(cfg.input_dim, w)
        self.name_in = nn.Linear(cfg.name_dim, w)
        self.registers = nn.Parameter(torch.randn(cfg.n_registers, w) * 0.02)
        self.body = Transformer(w, cfg.layers, cfg.heads, cfg.head_dim)
        in_read = w * cfg.n_registers if cfg.readout == "registers" else w
        self.readout = nn.Linear(in_read, cfg.output_dim)

    def forward(self, tokens: torch.Tensor, pad: torch.Tensor, names: torch.Tensor) -> torch.Tensor:
        """tokens (S, T, input_dim), pad (S, T), names (S, name_dim) -> (S, output_dim)."""
        S, R = len(tokens), self.cfg.n_registers
        if (~pad).sum(1).min() < 1:
            raise EmptySequenceError()
        x = torch.cat([self.registers.expand(S, -1, -1), self.name_in(names)[:, None], self.token_in(tokens)], 1)
        full_pad = torch.cat([torch.zeros(S, R + 1, dtype=torch.bool), pad], 1)
        h = self.body(x, full_pad)
        if self.cfg.readout == "registers":
            return self.readout(h[:, :R].reshape(S, -1))
        keep = (~pad).float()[..., None]
        return self.readout((h[:, R + 1:] * keep).sum(1) / keep.sum(1))


class StudyEncoder(nn.Module):
    def __init__(self, cfg: StudyEncoderConfig, seq_dim: int):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.seq_in = nn.Linear(seq_dim, w)           # P
        self.name_in = nn.Linear(cfg.name_dim, w)
        self.registers = nn.Parameter(torch.randn(cfg.n_registers, w) * 0.02)
        self.body = Transformer(w, cfg.layers, cfg.heads, cfg.head_dim)

    def forward(self, seqs: torch.Tensor, pad: torch.Tensor, names: torch.Tensor | None) -> torch.Tensor:
        B, R = len(seqs), self.cfg.n_registers
        if (~pad).sum(1).min() < 1:
            raise ValueError("study has no sequences")
        parts = [self.registers.expand(B, -1, -1)]
        n_pre = R
        if self.cfg.use_study_name:
            parts.append(self.name_in(names)[:, None])
            n_pre += 1
        parts.append(self.seq_in(seqs))
        full_pad = torch.cat([torch.zeros(B, n_pre, dtype=torch.bool), pad], 1)
        h = self.body(torch.cat(parts, 1), full_pad)
        return h[:, :R].reshape(B, -1)


class HierarchicalEncoder(nn.Module):
    """Sequence encoder, study encoder and both name encoders, trained together."""

    def __init__(self, seq_cfg: SequenceEncoderConfig, st_cfg: StudyEncoderConfig,
                 name_encoder: NameEncoder | None = None, study_name_encoder: NameEncoder | None = None):
        super().__init__()
        self.seq_cfg, self.st_cfg = seq_cfg, st_cfg
        self.name_encoder = name_encoder or NameEncoder(seq_cfg.name_dim)
        self.study_name_encoder = study_name_encoder or NameEncoder(st_cfg.name_dim)
        self.seq = SequenceEncoder(seq_cfg)
        self.study = StudyEncoder(st_cfg, seq_cfg.output_dim)

    @property
    def output_dim(self) -> int:
        return self.st_cfg.output_dim

    def _names(self, enc: NameEncoder, names: Sequence[str]) -> torch.Tensor:
        uniq = sorted(set(names))
        emb = enc(uniq)
        pos = {n: i for i, n in enumerate(uniq)}
        return emb[[pos[n] for n in names]]

    def encode_sequences(self, seqs: Sequence[SequenceInput]) -> torch.Tensor:
        for s in seqs:
            if len(s.features) == 0:
                raise EmptySequenceError(s.name)
        x, pad = _pad([s.features for s in seqs])
        return self.seq(x, pad, self._names(self.name_encoder, [s.name for s in seqs]))

    def forward(self, studies: Sequence[StudyInput]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (study vectors (B, D), sequence vectors (S, d), study index of each sequence)."""
        flat, owner = [], []
        for i, st in enumerate(studies):
            seqs = [s for s in st.sequences if len(s.features)]
            if not seqs:
                raise ValueError(f"study {i}: all sequences empty")
            flat.extend(seqs)
            owner.extend([i] * len(seqs))
        r = self.encode_sequences(flat)
        owner_t = torch.tensor(owner)
        counts = torch.bincount(owner_t, minlength=len(studies))
        m = int(counts.max())
        grid = torch.zeros(len(studies), m, r.shape[1])
        pad = torch.ones(len(studies), m, dtype=torch.bool)
        slot = torch.cat([torch.arange(c) for c in counts.tolist()])
        grid = grid.index_put((owner_t, slot), r)
        pad[owner_t, slot] = False
        names = self._names(self.study_name_encoder, [s.study_name for s in studies]) \
            if self.st_cfg.use_study_name else None
        return self.study(grid, pad, names), r, owner_t

    def encode_study(self, study: StudyInput) -> StudyEmbedding:
        v, r, _ = self([study])
        kept = [s for s in study.sequences if len(s.features)]
        return StudyEmbedding(v[0], {s.name: r[i] for i, s in enumerate(kept)})


class FlatEncoder(nn.Module):
    """Ablation: a single transformer over the tokens of every sequence in a study."""

    def __init__(self, seq_cfg: SequenceEncoderConfig, st_cfg: StudyEncoderConfig):
        super().__init__()
        self.seq_cfg, self.st_cfg = seq_cfg, st_cfg
        w = st_cfg.width
        self.name_encoder = NameEncoder(seq_cfg.name_dim)
        self.token_in = nn.Linear(seq_cfg.input_dim + seq_cfg.name_dim, w)
        self.registers = nn.Parameter(torch.randn(st_cfg.n_registers, w) * 0.02)
        self.body = Transformer(w, seq_cfg.layers + st_cfg.layers, st_cfg.heads, st_cfg.head_dim)

    @property
    def output_dim(self) -> int:
        return self.st_cfg.output_dim

    def forward(self, studies: Sequence[StudyInput]):
        names = sorted({s.name for st in studies for s in st.sequences})
        emb = self.name_encoder(names)
        pos = {n: i for i, n in enumerate(names)}
        feats = []
        for st in studies:
            rows = [torch.cat([torch.from_numpy(s.features), emb[pos[s.name]].expand(len(s.features), -1)], 1)
                    for s in st.sequences if len(s.features)]
            if not rows:
                raise ValueError("study has no tokens")
            feats.append(torch.cat(rows))
        n = max(len(f) for f in feats)
        B, R = len(studies), self.st_cfg.n_registers
        x = torch.zeros(B, n, feats[0].shape[1])
        pad = torch.ones(B, n, dtype=torch.bool)
        for i, f in enumerate(feats):
            x[i, : len(f)] = f
            pad[i, : len(f)] = False
        h = self.body(torch.cat([self.registers.expand(B, -1, -1), self.token_in(x)], 1),
                      torch.cat([torch.zeros(B, R, dtype=torch.bool), pad], 1))
        return h[:, :R].reshape(B, -1), None, None


# ------------------------------------------------------------------ counting


def count_parameters(seq_cfg: SequenceEncoderConfig, st_cfg: StudyEncoderConfig,
                     include_name_encoders: bool = False) -> int:
    """Trainable parameters of the two transformers (optionally with name encoders)."""
    enc = HierarchicalEncoder(seq_cfg, st_cfg) if include_name_encoders else None
    if enc is not None:
        return sum(p.numel() for p in enc.parameters())
    ws, wt = seq_cfg.width, st_cfg.width
    seq = (seq_cfg.input_dim * ws + ws) + (seq_cfg.name_dim * ws + ws) + seq_cfg.n_registers * ws \
        + seq_cfg.layers * block_parameter_count(ws, seq_cfg.heads, seq_cfg.head_dim) + 2 * ws
    seq += (ws * seq_cfg.n_registers if seq_cfg.readout == "registers" else ws) * seq_cfg.output_dim + seq_cfg.output_dim
    st = (seq_cfg.output_dim * wt + wt) + st_cfg.n_registers * wt \
        + st_cfg.layers * block_parameter_count(wt, st_cfg.heads, st_cfg.head_dim) + 2 * wt
    st += st_cfg.name_dim * wt + wt
    return seq + st


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path: str | Path, module: nn.Module, config: dict) -> str:
    """Write ``magic | header length | JSON header | raw little-endian tensors``.

    The header lists every named tensor with its shape and byte offset, and a
    sha256 over the tensor payload.  Returns the checksum.
    """
    blocks, entries, offset = [], [], 0
    for name, t in module.state_dict().items():
        raw = t.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    digest = hashlib.sha256(payload).hexdigest()
    header = json.dumps({"config": config, "tensors": entries, "sha256": digest}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + payload)
    return digest


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    payload = raw[8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4")
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header["config"], state


def config_dict(seq_cfg: SequenceEncoderConfig, st_cfg: StudyEncoderConfig) -> dict:
    return {"sequence": asdict(seq_cfg), "study": asdict(st_cfg)}
