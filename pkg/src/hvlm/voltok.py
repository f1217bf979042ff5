"""Vector-quantized volume tokenizer.

Sequences are cut into 3D patches, background patches are flagged by a mean
intensity threshold, and each patch is encoded by a small 3D CNN into a latent
vector that is snapped to its nearest codebook entry.

The CNN picks its per-axis strides from the orientation of the input, so the
same weights encode a patch whether it arrives as ``8x8x2``, ``8x2x8`` or
``2x8x8``.  Latents are transposed back to the canonical axis order before
flattening; orientation invariance itself is learned through random axis
permutations during training.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthcohort import PLANE_PERMUTATION, SequenceVolume, VolumetricStudy

log = logging.getLogger(__name__)

CACHE_MAGIC = b"HVTK"
CACHE_VERSION = 1


class TokenizerDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"tokenizer loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class PatchSpec:
    patch_dims: tuple[int, int, int] = (8, 8, 2)
    downsample: tuple[int, int, int] = (4, 4, 2)
    latent_channels: int = 2

    def __post_init__(self):
        if math.prod(self.patch_dims) <= 0:
            raise ValueError("patch dims must be positive")
        for p, d in zip(self.patch_dims, self.downsample):
            if d < 1 or d & (d - 1) or p % d:
                raise ValueError(f"downsample {self.downsample} incompatible with patch {self.patch_dims}")
        for (pa, da), (pb, db) in itertools.combinations(zip(self.patch_dims, self.downsample), 2):
            if pa == pb and da != db:
                raise ValueError("equal patch axes need equal downsample factors")

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        return tuple(p // d for p, d in zip(self.patch_dims, self.downsample))

    @property
    def latent_dim(self) -> int:
        return self.latent_channels * math.prod(self.latent_grid)

    @property
    def compression(self) -> int:
        return math.prod(self.patch_dims) // self.latent_dim

    def oriented(self, orientation: Sequence[int]) -> tuple[int, int, int]:
        return tuple(self.patch_dims[a] for a in orientation)

    @classmethod
    def paper_scale(cls) -> "PatchSpec":
        return cls((32, 32, 4), (4, 4, 2), 2)


@dataclass
class Codebook:
    entries: np.ndarray
    usage_counts: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("codebook needs K >= 2 entries")
        if not np.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class TokenGrid:
    """All patches of one sequence; ``kept`` marks foreground tokens."""

    seq_name: str
    source_plane: str
    source_orientation: tuple[int, int, int]
    coords: np.ndarray      # (n, 3) int, patch-grid index in the sequence's own axes
    latents: np.ndarray     # (n, d) float32, z_e
    codes: np.ndarray       # (n,) int
    intensity: np.ndarray   # (n,) patch mean intensity
    kept: np.ndarray        # (n,) bool
    threshold: float

    def __len__(self) -> int:
        return len(self.codes)

    def refilter(self, threshold: float) -> "TokenGrid":
        return TokenGrid(self.seq_name, self.source_plane, self.source_orientation, self.coords,
                         self.latents, self.codes, self.intensity, self.intensity >= threshold, threshold)


# --------------------------------------------------------------------- patching


def patch_volume(vol: SequenceVolume | np.ndarray, spec: PatchSpec,
                 orientation: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split a volume into non-overlapping patches after zero-padding.

    Returns ``(coords, patches)`` with ``coords[i]`` the patch-grid index of
    ``patches[i]``; iterate ``zip(coords, patches)`` for (coord, subvolume)
    pairs.  For a ``SequenceVolume`` the patch shape follows its orientation.
    """
    if isinstance(vol, SequenceVolume):
        orientation = vol.orientation if orientation is None else orientation
        arr = vol.voxels
    else:
        arr = np.asarray(vol)
    orientation = tuple(orientation) if orientation is not None else (0, 1, 2)
    if arr.ndim != 3 or arr.size == 0:
        raise ValueError("empty or non-3D volume")
    if not np.isfinite(arr).all():
        raise ValueError("volume contains non-finite voxels")
    dims = spec.oriented(orientation)
    n = [math.ceil(s / p) for s, p in zip(arr.shape, dims)]
    padded = np.zeros([a * p for a, p in zip(n, dims)], dtype=np.float32)
    padded[: arr.shape[0], : arr.shape[1], : arr.shape[2]] = arr
    blocks = padded.reshape(n[0], dims[0], n[1], dims[1], n[2], dims[2]).transpose(0, 2, 4, 1, 3, 5)
    patches = blocks.reshape(-1, *dims)
    coords = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), -1).reshape(-1, 3)
    return coords, np.ascontiguousarray(patches)


def background_flags(patches: np.ndarray, threshold: float) -> np.ndarray:
    """True where a patch is kept (mean intensity at or above ``threshold``)."""
    return patches.reshape(len(patches), -1).mean(axis=1) >= threshold


# ----------------------------------------------------------------- quantization


def quantize(z_e: np.ndarray, cb: Codebook | np.ndarray) -> tuple[int, np.ndarray]:
    entries = cb.entries if isinstance(cb, Codebook) else np.asarray(cb)
    z = np.asarray(z_e, dtype=np.float64)
    if z.shape != (entries.shape[1],):
        raise ValueError(f"expected a {entries.shape[1]}-vector, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("non-finite latent")
    d = ((entries.astype(np.float64) - z) ** 2).sum(axis=1)
    k = int(np.argmin(d))  # argmin returns the first minimum: lowest index on ties
    return k, entries[k]


def quantize_batch(z_e: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest-entry indices for a batch of latents (ties to lowest index)."""
    z = np.asarray(z_e, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("non-finite latent")
    # exact differences rather than the expanded |z|^2 - 2ze + |e|^2 form,
    # which can reorder near-ties
    chunk = max(1, 2_000_000 // max(1, e.size))
    out = [np.argmin(((z[i:i + chunk, None, :] - e[None]) ** 2).sum(-1), axis=1)
           for i in range(0, len(z), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ------------------------------------------------------------------ permutation


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(perm))


def permute_patches(patches: np.ndarray | torch.Tensor, perm: Sequence[int]):
    """Permute the three spatial axes of a ``(n, a, b, c)`` batch."""
    axes = (0,) + tuple(p + 1 for p in perm)
    if isinstance(patches, torch.Tensor):
        return patches.permute(*axes)
    return np.transpose(patches, axes)


def random_axis_permutation(batch: Sequence[np.ndarray] | np.ndarray, rng: np.random.Generator):
    """Pick one shape bucket of the minibatch and permute all its patches.

    Returns ``(permuted, perm)``; ``perm`` maps output axis ``i`` to input axis
    ``perm[i]``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    buckets: dict[tuple, list] = {}
    for p in batch:
        buckets.setdefault(tuple(p.shape), []).append(p)
    keys = sorted(buckets)
    chosen = keys[int(rng.integers(len(keys)))]
    perm = tuple(int(i) for i in rng.permutation(3))
    stacked = np.stack(buckets[chosen])
    return np.ascontiguousarray(permute_patches(stacked, perm)), perm


# ------------------------------------------------------------------------ model


def _orientation_for_shape(spec: PatchSpec, shape: Sequence[int]) -> tuple[int, int, int]:
    for perm in itertools.permutations(range(3)):
        if spec.oriented(perm) == tuple(shape):
            return perm
    raise ValueError(f"patch shape {tuple(shape)} is not a permutation of {spec.patch_dims}")


class VQVAE(nn.Module):
    def __init__(self, spec: PatchSpec, codebook_size: int = 64, channels: int = 16):
        super().__init__()
        self.spec = spec
        factors = max(spec.downsample)
        self.n_stages = int(math.log2(factors)) if factors > 1 else 0
        C = channels
        self.enc_in = nn.Conv3d(1, C, 3, padding=1)
        self.enc_down = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(self.n_stages))
        self.enc_mix = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(self.n_stages))
        self.enc_out = nn.Conv3d(C, spec.latent_channels, 1)
        self.dec_in = nn.Conv3d(spec.latent_channels, C, 1)
        self.dec_up = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(self.n_stages))
        self.dec_out = nn.Conv3d(C, 1, 3, padding=1)
        self.codebook = nn.Parameter(torch.randn(codebook_size, spec.latent_dim) * 0.1)

    def _strides(self, orientation):
        factors = [self.spec.downsample[a] for a in orientation]
        return [tuple(2 if f > 2 ** s else 1 for f in factors) for s in range(self.n_stages)]

    def encode(self, x: torch.Tensor, orientation: Sequence[int] | None = None) -> torch.Tensor:
        """``(n, a, b, c)`` patches -> ``(n, d)`` canonical-order latents."""
        if orientation is None:
            orientation = _orientation_for_shape(self.spec, x.shape[1:])
        h = F.gelu(self.enc_in(x.unsqueeze(1)))
        for conv, mix, stride in zip(self.enc_down, self.enc_mix, self._strides(orientation)):
            h = F.gelu(F.conv3d(h, conv.weight, conv.bias, stride=stride, padding=1))
            h = F.gelu(mix(h))
        z = self.enc_out(h)
        inv = inverse_permutation(orientation)
        z = z.permute(0, 1, *(2 + i for i in inv))
        return z.reshape(len(x), -1)

    def decode(self, z: torch.Tensor, orientation: Sequence[int] = (0, 1, 2)) -> torch.Tensor:
        g = self.spec.latent_grid
        h = z.reshape(len(z), self.spec.latent_channels, *g)
        h = h.permute(0, 1, *(2 + a for a in orientation))
        h = F.gelu(self.dec_in(h))
        for conv, stride in zip(self.dec_up, reversed(self._strides(orientation))):
            h = F.interpolate(h, scale_factor=stride, mode="nearest")
            h = F.gelu(conv(h))
        return self.dec_out(h).squeeze(1)

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        d = torch.cdist(z.detach(), self.codebook.detach())
        return d.argmin(dim=1)

    def forward(self, x: torch.Tensor, orientation=None, beta: float = 0.25):
        if orientation is None:
            orientation = _orientation_for_shape(self.spec, x.shape[1:])
        z_e = self.encode(x, orientation)
        idx = self.nearest(z_e)
        e = self.codebook[idx]
        vq_loss = F.mse_loss(e, z_e.detach()) + beta * F.mse_loss(z_e, e.detach())
        z_q = z_e + (e - z_e).detach()
        recon = self.decode(z_q, orientation)
        return recon, vq_loss, idx


@dataclass
class TokenizerHParams:
    steps: int = 400
    batch_size: int = 128
    lr: float = 2e-3
    codebook_size: int = 64
    channels: int = 16
    beta: float = 0.25
    permute: bool = True
    dead_after: int = 50      # steps without use before an entry is re-seeded
    val_fraction: float = 0.1
    eval_every: int = 50
    seed: int = 0


@dataclass
class Tokenizer:
    model: VQVAE
    spec: PatchSpec
    history: list[dict] = field(default_factory=list)

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.model.codebook.detach().numpy().astype(np.float32).copy(),
                        self._usage.copy() if hasattr(self, "_usage") else np.zeros(self.model.codebook.shape[0], np.int64))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.spec), sort_keys=True).encode())
        for k, v in sorted(self.model.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def encode_patches(self, patches: np.ndarray, orientation: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        self.model.eval()
        out, codes = [], []
        for i in range(0, len(patches), 1024):
            x = torch.from_numpy(np.ascontiguousarray(patches[i:i + 1024], dtype=np.float32))
            z = self.model.encode(x, orientation)
            out.append(z.numpy())
        z = np.concatenate(out) if out else np.zeros((0, self.spec.latent_dim), np.float32)
        codes = quantize_batch(z, self.model.codebook.detach().numpy()) if len(z) else np.zeros(0, np.int64)
        return z.astype(np.float32), codes

    @torch.no_grad()
    def reconstruct(self, patches: np.ndarray, orientation=None) -> np.ndarray:
        self.model.eval()
        x = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))
        recon, _, _ = self.model(x, orientation)
        return recon.numpy()

    @torch.no_grad()
    def l1(self, patches: np.ndarray, orientation=None) -> float:
        if len(patches) == 0:
            return float("nan")
        return float(np.abs(self.reconstruct(patches, orientation) - patches).mean())


def collect_patches(studies: Iterable[VolumetricStudy], spec: PatchSpec, threshold: float = 0.02,
                    max_per_sequence: int | None = None, rng: np.random.Generator | None = None
                    ) -> dict[tuple[int, ...], np.ndarray]:
    """Foreground training patches bucketed by their stored shape."""
    buckets: dict[tuple[int, ...], list[np.ndarray]] = {}
    for st in studies:
        for seq in st.sequences:
            _, p = patch_volume(seq, spec)
            p = p[background_flags(p, threshold)]
            if max_per_sequence is not None and len(p) > max_per_sequence:
                sel = (rng or np.random.default_rng(0)).choice(len(p), max_per_sequence, replace=False)
                p = p[np.sort(sel)]
            buckets.setdefault(tuple(p.shape[1:]), []).append(p)
    return {k: np.concatenate(v) for k, v in sorted(buckets.items())}


def train_tokenizer(patches: dict[tuple[int, ...], np.ndarray] | np.ndarray, spec: PatchSpec,
                    hp: TokenizerHParams | None = None) -> Tokenizer:
    """Train the VQ-VAE with an L1 reconstruction loss plus codebook/commitment terms.

    Each minibatch is drawn from one shape bucket (chosen with probability
    proportional to bucket size) and, when ``hp.permute`` is set, all of its
    patches get the same random axis permutation.
    """
    hp = hp or TokenizerHParams()
    if isinstance(patches, np.ndarray):
        patches = {tuple(patches.shape[1:]): patches}
    patches = {k: v for k, v in patches.items() if len(v)}
    if not patches:
        raise ValueError("no patches to train on")
    rng = np.random.default_rng(hp.seed)
    torch.manual_seed(hp.seed)

    train, val = {}, {}
    for k, v in patches.items():
        perm = rng.permutation(len(v))
        n_val = int(round(hp.val_fraction * len(v)))
        val[k], train[k] = v[perm[:n_val]], v[perm[n_val:]]
    keys = [k for k in sorted(train) if len(train[k])]
    sizes = np.array([len(train[k]) for k in keys], dtype=float)

    model = VQVAE(spec, hp.codebook_size, hp.channels)
    tok = Tokenizer(model, spec)
    with torch.no_grad():
        k0 = keys[int(np.argmax(sizes))]
        x0 = torch.from_numpy(train[k0][rng.choice(len(train[k0]), min(1024, len(train[k0])), replace=False)])
        z0 = model.encode(x0)
        pick = torch.from_numpy(rng.choice(len(z0), hp.codebook_size, replace=len(z0) < hp.codebook_size))
        model.codebook.copy_(z0[pick] + 1e-3 * torch.randn_like(z0[pick]))
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    last_used = np.zeros(hp.codebook_size, dtype=np.int64)
    usage = np.zeros(hp.codebook_size, dtype=np.int64)

    def val_l1() -> float:
        tot, n = 0.0, 0
        for k, v in val.items():
            if len(v):
                tot += tok.l1(v) * len(v)
                n += len(v)
        return tot / max(n, 1)

    tok.history.append({"step": 0, "val_l1": val_l1()})
    for step in range(1, hp.steps + 1):
        model.train()
        k = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
        src = train[k]
        x = src[rng.integers(0, len(src), size=hp.batch_size)]
        if hp.permute:
            x, _ = random_axis_permutation(list(x), rng)
        xt = torch.from_numpy(np.ascontiguousarray(x))
        recon, vq_loss, idx = model(xt, beta=hp.beta)
        loss = F.l1_loss(recon, xt) + vq_loss
        if not torch.isfinite(loss):
            raise TokenizerDiverged(step)
        opt.zero_grad()
        loss.backward()
        opt.step()

        used = np.bincount(idx.numpy(), minlength=hp.codebook_size)
        usage += used
        last_used[used > 0] = step
        dead = np.flatnonzero(step - last_used > hp.dead_after)
        if len(dead):
            with torch.no_grad():
                z = model.encode(xt)
                pick = torch.from_numpy(rng.integers(0, len(z), size=len(dead)))
                model.codebook[torch.from_numpy(dead)] = z[pick] + 1e-3 * torch.randn(len(dead), z.shape[1])
            last_used[dead] = step
        if step % hp.eval_every == 0 or step == hp.steps:
            tok.history.append({"step": step, "loss": float(loss.detach()), "val_l1": val_l1()})
    tok._usage = usage
    tok.val_patches = val
    return tok


# ------------------------------------------------------------------ token cache


def tokenize_sequence(seq: SequenceVolume, tok: Tokenizer, threshold: float = 0.02) -> TokenGrid:
    coords, patches = patch_volume(seq, tok.spec)
    intensity = patches.reshape(len(patches), -1).mean(axis=1).astype(np.float32)
    latents, codes = tok.encode_patches(patches, seq.orientation)
    return TokenGrid(seq.seq_name, seq.plane, tuple(seq.orientation), coords.astype(np.int16),
                     latents, codes.astype(np.int32), intensity, intensity >= threshold, threshold)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("coord", "<i2", (3,)), ("code", "<i4"), ("kept", "u1"),
                     ("intensity", "<f4"), ("latent", "<f4", (d,))])


def write_token_grid(path: Path, grid: TokenGrid, spec: PatchSpec, checksum: str) -> None:
    d = grid.latents.shape[1]
    rec = np.zeros(len(grid), dtype=_record_dtype(d))
    rec["coord"], rec["code"], rec["kept"] = grid.coords, grid.codes, grid.kept
    rec["intensity"], rec["latent"] = grid.intensity, grid.latents
    header = json.dumps({
        "spec": asdict(spec), "checksum": checksum, "seq_name": grid.seq_name,
        "plane": grid.source_plane, "orientation": list(grid.source_orientation),
        "threshold": grid.threshold, "n": len(grid), "d": d,
    }, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, len(header)))
        fh.write(header)
        fh.write(rec.tobytes())


def read_token_grid(path: Path) -> tuple[dict, TokenGrid]:
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path} is not a token cache file")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported token cache version {version}")
    header = json.loads(raw[10:10 + hlen])
    rec = np.frombuffer(raw[10 + hlen:], dtype=_record_dtype(header["d"]), count=header["n"])
    grid = TokenGrid(header["seq_name"], header["plane"], tuple(header["orientation"]),
                     rec["coord"].astype(np.int16), rec["latent"].astype(np.float32),
                     rec["code"].astype(np.int32), rec["intensity"].astype(np.float32),
                     rec["kept"].astype(bool), header["threshold"])
    return header, grid


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else f"%{ord(c):02x}" for c in name)


def cache_path(cache_dir: Path, checksum: str, study_id: str, seq_name: str) -> Path:
    return Path(cache_dir) / checksum[:16] / study_id / f"{_safe(seq_name)}.tok"


def tokenize_and_cache(study: VolumetricStudy, tok: Tokenizer, threshold: float = 0.02,
                       cache_dir: str | Path | None = None, checksum: str | None = None
                       ) -> dict[str, TokenGrid]:
    """Tokenize every sequence of ``study``, reusing cached grids when valid.

    Cache entries are keyed by (study_id, seq_name, tokenizer checksum); a file
    written by a different tokenizer is treated as a miss and overwritten.
    """
    checksum = checksum or tok.checksum()
    out = {}
    for seq in study.sequences:
        if cache_dir is not None:
            path = cache_path(Path(cache_dir), checksum, study.study_id, seq.seq_name)
            if path.exists():
                header, grid = read_token_grid(path)
                if header["checksum"] == checksum:
                    out[seq.seq_name] = grid if grid.threshold == threshold else grid.refilter(threshold)
                    continue
                log.info("stale token cache %s, regenerating", path)
        grid = tokenize_sequence(seq, tok, threshold)
        if cache_dir is not None:
            write_token_grid(path, grid, tok.spec, checksum)
        out[seq.seq_name] = grid
    return out


def save_tokenizer(tok: Tokenizer, path: str | Path) -> None:
    buf = io.BytesIO()
    torch.save({"state": tok.model.state_dict(), "spec": asdict(tok.spec),
                "codebook_size": tok.model.codebook.shape[0],
                "channels": tok.model.enc_in.out_channels,
                "usage": getattr(tok, "_usage", None), "history": tok.history}, buf)
    Path(path).write_bytes(buf.getvalue())


def load_tokenizer(path: str | Path) -> Tokenizer:
    blob = torch.load(io.BytesIO(Path(path).read_bytes()), weights_only=False)
    spec = PatchSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob["spec"].items()})
    model = VQVAE(spec, blob["codebook_size"], blob["channels"])
    model.load_state_dict(blob["state"])
    tok = Tokenizer(model, spec, blob["history"])
    if blob["usage"] is not None:
        tok._usage = blob["usage"]
    return tok
