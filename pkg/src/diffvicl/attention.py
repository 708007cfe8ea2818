"""Self-attention feature updates and their cross-image recomputation.

All operations are pure tensor transforms on arrays shaped
``(heads, tokens, head_dim)`` for Q/K/V and ``(heads, q_tokens, k_tokens)``
for attention maps. Backends call into these at their decoder self-attention
sites, either running the standard in-place update or, on the prediction
path, the recomputation that mixes the query's queries with prompt keys and
prompt-target values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PathId
from .errors import DimensionError, EmptyPromptError

DECODER_BLOCK = "decoder"


@dataclass(frozen=True, order=True)
class AttentionSite:
    """One decoder self-attention layer, ordered by network depth."""

    layer_index: int
    resolution: int
    block_path: str = DECODER_BLOCK

    def __post_init__(self):
        if self.block_path != DECODER_BLOCK:
            raise ValueError("only decoder self-attention layers are eligible")

    @property
    def key(self) -> str:
        return f"{self.block_path}_l{self.layer_index}_r{self.resolution}"


@dataclass(frozen=True, eq=False)
class AttentionTensors:
    """Q, K, V for one site and path at one step, shaped (heads, tokens, d)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    site: AttentionSite | None = None
    path: "PathId | None" = None
    timestep: int | None = None

    def __post_init__(self):
        q, k, v = (np.asarray(t) for t in (self.q, self.k, self.v))
        for name, t in (("q", q), ("k", k), ("v", v)):
            if t.ndim != 3:
                raise DimensionError(f"{name} must be (heads, tokens, d), got shape {t.shape}")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise DimensionError("q, k, v head counts differ")
        if q.shape[2] != k.shape[2]:
            raise DimensionError("q and k feature dims differ")
        if k.shape[1] != v.shape[1]:
            raise DimensionError("k and v token counts differ")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_map(q: np.ndarray, k: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-stochastic map softmax(q k^T / (tau sqrt(d))) per head.

    Entry (i, j) measures how token i of the query tensor correlates with
    token j of the key tensor.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"incompatible q {q.shape} and k {k.shape}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    d = q.shape[2]
    logits = (q @ np.swapaxes(k, 1, 2)) / np.asarray(tau * np.sqrt(d), dtype=q.dtype)
    return softmax(logits, axis=-1)


def standard_update(at: AttentionTensors) -> np.ndarray:
    """The in-place feature update: softmax(Q K^T / sqrt(d)) V per head."""
    alpha = attention_map(at.q, at.k)
    return alpha @ at.v


def contrast(alpha: np.ndarray, beta: float) -> np.ndarray:
    """Scale an attention map's spread around its per-row mean.

    The mean is taken per head, per query row, over the key axis, so each
    row's total attention mass is preserved exactly. ``beta=1`` is the
    identity; entries may leave [0, 1] for beta > 1 and are kept as-is
    (no renormalization, no clipping).
    """
    alpha = np.asarray(alpha)
    if beta == 1.0:
        return alpha
    mean = alpha.mean(axis=-1, keepdims=True, dtype=alpha.dtype)
    return mean + np.asarray(beta, dtype=alpha.dtype) * (alpha - mean)


def vicl_update(
    q_c: np.ndarray,
    k_a_list: Sequence[np.ndarray],
    v_b_list: Sequence[np.ndarray],
    tau: float,
    beta: float,
    return_map: bool = False,
    query_chunk: int = 256,
):
    """Recomputed feature update for the prediction path.

    Keys from all prompt images and values from all prompt targets are
    concatenated along the token axis, so a single temperature-scaled softmax
    spans every prompt's keys; that shared normalization is what weights
    prompts implicitly by their correspondence with each query token. The
    map is contrast-adjusted before being applied to the values.

    Accumulates at double precision in fixed-size query chunks, so the
    prompt-set algebra (duplication, permutation) is stable to within a few
    ulps of the input dtype and peak map memory stays bounded; the result is
    cast back to q's dtype. Returns the update, or (update, map) when
    ``return_map`` is set; the returned map is the post-contrast one
    actually applied.
    """
    if len(k_a_list) == 0 or len(v_b_list) == 0:
        raise EmptyPromptError("vicl_update needs at least one prompt (K, V) pair")
    if len(k_a_list) != len(v_b_list):
        raise DimensionError(f"{len(k_a_list)} key tensors vs {len(v_b_list)} value tensors")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    q_c = np.asarray(q_c)
    if q_c.ndim != 3:
        raise DimensionError(f"q must be (heads, tokens, d), got shape {q_c.shape}")
    for i, (k, v) in enumerate(zip(k_a_list, v_b_list)):
        k = np.asarray(k)
        v = np.asarray(v)
        if k.ndim != 3 or v.ndim != 3:
            raise DimensionError(f"prompt {i + 1}: K/V must be (heads, tokens, d)")
        if k.shape[1] != v.shape[1]:
            raise DimensionError(f"prompt {i + 1}: K has {k.shape[1]} tokens, V has {v.shape[1]}")
        if k.shape[0] != q_c.shape[0] or v.shape[0] != q_c.shape[0]:
            raise DimensionError(f"prompt {i + 1}: head count differs from Q")
        if k.shape[2] != q_c.shape[2]:
            raise DimensionError(f"prompt {i + 1}: K feature dim differs from Q")
    k_all = np.concatenate([np.asarray(k, dtype=np.float64) for k in k_a_list], axis=1)
    v_all = np.concatenate([np.asarray(v, dtype=np.float64) for v in v_b_list], axis=1)
    heads, n_q, _ = q_c.shape
    scale = tau * np.sqrt(q_c.shape[2])
    update = np.empty((heads, n_q, v_all.shape[2]), dtype=np.float64)
    maps = [] if return_map else None
    for start in range(0, n_q, query_chunk):
        stop = min(start + query_chunk, n_q)
        q_blk = np.asarray(q_c[:, start:stop], dtype=np.float64)
        alpha = softmax(q_blk @ np.swapaxes(k_all, 1, 2) / scale, axis=-1)
        alpha = contrast(alpha, beta)
        update[:, start:stop] = alpha @ v_all
        if maps is not None:
            maps.append(alpha)
    update = update.astype(q_c.dtype)
    if maps is not None:
        return update, np.concatenate(maps, axis=1).astype(q_c.dtype)
    return update


def feature_ensemble(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Uniform-weight baseline: element-wise mean of per-prompt updates."""
    if len(updates) == 0:
        raise EmptyPromptError("feature_ensemble needs at least one update")
    first = np.asarray(updates[0])
    for i, u in enumerate(updates[1:], start=2):
        if np.asarray(u).shape != first.shape:
            raise DimensionError(f"update {i} has shape {np.asarray(u).shape}, expected {first.shape}")
    stacked = np.stack([np.asarray(u) for u in updates], axis=0)
    return stacked.mean(axis=0, dtype=first.dtype)


def select_sites(all_sites: Sequence[AttentionSite], resolutions) -> list[AttentionSite]:
    """Decoder self-attention sites at the active resolutions, depth order."""
    wanted = set(int(r) for r in resolutions)
    picked = [s for s in all_sites if s.resolution in wanted]
    return sorted(picked, key=lambda s: s.layer_index)
