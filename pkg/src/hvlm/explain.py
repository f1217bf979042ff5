"""LIME over volume tokens.

Masks remove tokens from the input (they are not zeroed).  A weighted linear
surrogate is fit from masks to the model logit, with a locality kernel on the
cosine distance between each mask and the all-ones mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .synthcohort import PLANE_PERMUTATION
from .voltok import PatchSpec, TokenGrid


class SingularDesignError(ValueError):
    def __init__(self, n_samples: int, n_tokens: int):
        super().__init__(f"{n_samples} samples cannot identify {n_tokens} token weights plus an intercept; "
                         f"need at least {n_tokens + 1}")
        self.required = n_tokens + 1


@dataclass
class AttributionMap:
    weights: np.ndarray          # one per perturbed token
    token_index: np.ndarray      # positions of those tokens in the grid
    intercept: float
    seq_name: str = ""
    class_index: int = -1

    @property
    def ranking(self) -> np.ndarray:
        """Token positions (into ``weights``) by decreasing weight; ties keep input order."""
        return np.argsort(-self.weights, kind="stable")

    def top(self, k: int) -> np.ndarray:
        return self.token_index[self.ranking[:k]]

    def to_json(self) -> str:
        return json.dumps({"seq_name": self.seq_name, "class_index": self.class_index,
                           "intercept": self.intercept, "token_index": self.token_index.tolist(),
                           "weights": self.weights.tolist()})


def sample_masks(n_tokens: int, n_samples: int, rng: np.random.Generator, keep_prob: float = 0.5) -> np.ndarray:
    """Random keep-masks; row 0 is the unperturbed input and every row keeps a token."""
    m = rng.random((n_samples, n_tokens)) < keep_prob
    m[0] = True
    empty = np.flatnonzero(~m.any(1))
    m[empty, rng.integers(0, n_tokens, size=len(empty))] = True
    return m


def locality_weights(masks: np.ndarray, sigma: float = 0.25) -> np.ndarray:
    # cosine between a 0/1 mask with k ones and the all-ones vector is sqrt(k/n)
    cos = np.sqrt(masks.sum(1) / masks.shape[1])
    return np.exp(-((1.0 - cos) ** 2) / sigma ** 2)


def fit_surrogate(masks: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge: float = 1e-6) -> tuple[np.ndarray, float]:
    """Weighted least squares with an unpenalized intercept."""
    n, p = masks.shape
    if n < p + 1:
        raise SingularDesignError(n, p)
    X = np.concatenate([np.ones((n, 1)), masks.astype(np.float64)], axis=1)
    XtW = X.T * weights
    A = XtW @ X
    A[1:, 1:] += ridge * np.eye(p)
    beta = np.linalg.solve(A, XtW @ np.asarray(y, dtype=np.float64))
    return beta[1:], float(beta[0])


def lime_attribute(score_fn: Callable[[np.ndarray], np.ndarray], n_tokens: int, n_samples: int = 3000,
                   seed: int = 0, sigma: float = 0.25, ridge: float = 1e-6,
                   token_index: np.ndarray | None = None) -> AttributionMap:
    """``score_fn`` maps a (m, n_tokens) boolean keep-mask batch to m logits."""
    if n_tokens < 2:
        raise ValueError("need at least two tokens to attribute")
    if n_samples < n_tokens + 1:
        raise SingularDesignError(n_samples, n_tokens)
    rng = np.random.default_rng(seed)
    masks = sample_masks(n_tokens, n_samples, rng)
    y = np.asarray(score_fn(masks), dtype=np.float64)
    coef, b = fit_surrogate(masks, y, locality_weights(masks, sigma), ridge)
    idx = np.arange(n_tokens) if token_index is None else np.asarray(token_index)
    return AttributionMap(coef, idx, b)


def token_boxes(grid: TokenGrid, spec: PatchSpec, token_index: Sequence[int]) -> list[tuple[slice, slice, slice]]:
    dims = spec.oriented(grid.source_orientation)
    return [tuple(slice(int(c) * d, (int(c) + 1) * d) for c, d in zip(grid.coords[i], dims)) for i in token_index]


def topk_overlap(attr: AttributionMap, grid: TokenGrid, spec: PatchSpec, canonical_mask: np.ndarray, k: int = 3) -> bool:
    """Hit iff any of the top-k tokens' voxel boxes touches the (canonical-grid) mask."""
    stored = np.transpose(canonical_mask, PLANE_PERMUTATION[grid.source_plane])
    return any(stored[box].any() for box in token_boxes(grid, spec, attr.top(k)))


def multilabel_attribution(make_score_fn: Callable[[int], Callable[[np.ndarray], np.ndarray]],
                           n_tokens: int, classes: Sequence[int], **kw) -> dict[int, AttributionMap]:
    out = {}
    for c in classes:
        a = lime_attribute(make_score_fn(c), n_tokens, **kw)
        a.class_index = c
        out[c] = a
    return out


def render_overlay(path: str | Path, volume: np.ndarray, grid: TokenGrid, spec: PatchSpec,
                   attr: AttributionMap, k: int = 3) -> list[Path]:
    """Write one PNG per slice that contains a top-k token, boxes colored by rank."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    boxes = token_boxes(grid, spec, attr.top(k))
    colors = plt.cm.autumn(np.linspace(0, 1, max(k, 2)))
    written = []
    for z in range(volume.shape[2]):
        hits = [(r, b) for r, b in enumerate(boxes) if b[2].start <= z < b[2].stop]
        if not hits:
            continue
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(volume[:, :, z].T, cmap="gray", origin="lower")
        for r, b in hits:
            ax.add_patch(Rectangle((b[0].start - 0.5, b[1].start - 0.5), b[0].stop - b[0].start,
                                   b[1].stop - b[1].start, fill=False, color=colors[r], lw=1.5))
        ax.set_axis_off()
        out = path / f"slice_{z:03d}.png"
        fig.savefig(out, dpi=80, bbox_inches="tight")
        plt.close(fig)
        written.append(out)
    return written
