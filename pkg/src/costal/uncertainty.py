"""Committee disagreement: pixelwise Jensen-Shannon divergence and its
reduction to patch and stack uncertainty.

Entropies are in bits, so for an N-member committee every JS value lies in
``[0, log2 N]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_data import ConfigError, HeatmapStack, InvariantError

# JS below this is rounding noise; anything more negative is a bug.
NEGATIVE_TOLERANCE = 1e-12

# Reference geometry used to rescale K: 512x512 frames, 64-pixel aggregation
# patches (64 per frame), 32.5 frames per stack on average.
REFERENCE_TOP_K = 200
REFERENCE_PATCHES_PER_STACK = 64 * 32.5


class DomainError(ValueError):
    """Input probability outside [0, 1]."""


@dataclass(frozen=True)
class AggregationConfig:
    """Patch grid and top-K setting for stack uncertainty."""

    top_k: int = 74
    patch_size: int = 8

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")


@dataclass(eq=False)
class UncertaintyMap:
    stack_id: str
    values: np.ndarray  # (F, H, W) JS in bits


@dataclass(frozen=True)
class PatchUncertainty:
    frame: int
    y: int
    x: int
    height: int
    width: int
    value: float


@dataclass(frozen=True)
class StackUncertainty:
    stack_id: str
    value: float


def default_top_k(patches_per_stack: float) -> int:
    """K scaled from the reference setting (K=200) by relative patch count."""
    return max(1, math.ceil(REFERENCE_TOP_K * patches_per_stack / REFERENCE_PATCHES_PER_STACK))


def _xlog2x(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def binary_entropy(p):
    """Entropy in bits of a Bernoulli(p) variable, with 0 log 0 = 0.

    Works elementwise on arrays; returns a float for scalar input.
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        raise DomainError("probabilities must lie in [0, 1]")
    h = -(_xlog2x(arr) + _xlog2x(1.0 - arr))
    return float(h) if h.ndim == 0 else h


def js_divergence(probs, axis: int = 0):
    """Jensen-Shannon divergence of N Bernoulli distributions.

    ``H(mean p) - mean H(p)``, taken along ``axis`` (the committee axis).
    A 1D sequence of N probabilities gives a float.
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[axis] < 2:
        raise ConfigError("JS divergence needs at least 2 committee members")
    raw = binary_entropy(arr.mean(axis=axis)) - np.mean(binary_entropy(arr), axis=axis)
    raw = np.asarray(raw)
    if raw.size and raw.min() < -NEGATIVE_TOLERANCE:
        raise ArithmeticError(f"negative JS divergence {raw.min():.3e}")
    out = np.maximum(raw, 0.0)
    return float(out) if out.ndim == 0 else out


def uncertainty_map(committee_heatmaps: Sequence[HeatmapStack]) -> UncertaintyMap:
    """Per-pixel JS divergence across the members' heatmaps of one stack."""
    if len(committee_heatmaps) < 2:
        raise ConfigError("uncertainty_map needs at least 2 heatmaps")
    first = committee_heatmaps[0]
    for h in committee_heatmaps[1:]:
        if h.stack_id != first.stack_id:
            raise InvariantError(f"heatmaps belong to different stacks: {first.stack_id} vs {h.stack_id}")
        if h.shape != first.shape:
            raise InvariantError(f"{first.stack_id}: heatmap shape mismatch {h.shape} vs {first.shape}")
    stacked = np.stack([h.maps for h in committee_heatmaps])
    return UncertaintyMap(first.stack_id, js_divergence(stacked, axis=0))


def _patch_starts(n: int, size: int) -> np.ndarray:
    return np.arange(0, n, size)


def patch_means(values: np.ndarray, patch_size: int) -> np.ndarray:
    """Mean of each non-overlapping patch, shape (F, ceil(H/p), ceil(W/p)).

    Border patches that run past the frame are averaged over their true pixel
    count.
    """
    f, h, w = values.shape
    ys, xs = _patch_starts(h, patch_size), _patch_starts(w, patch_size)
    sums = np.add.reduceat(np.add.reduceat(values.astype(np.float64), ys, axis=1), xs, axis=2)
    hs = np.diff(np.append(ys, h))
    ws = np.diff(np.append(xs, w))
    return sums / np.outer(hs, ws)[None]


def patch_uncertainties(umap: UncertaintyMap, cfg: AggregationConfig) -> list[PatchUncertainty]:
    """One entry per aggregation patch per frame, in frame-major raster order."""
    f, h, w = umap.values.shape
    p = cfg.patch_size
    means = patch_means(umap.values, p)
    out = []
    for fi in range(f):
        for iy, y in enumerate(range(0, h, p)):
            for ix, x in enumerate(range(0, w, p)):
                out.append(PatchUncertainty(fi, y, x, min(p, h - y), min(p, w - x), float(means[fi, iy, ix])))
    return out


def top_k_mean(values, k: int) -> float:
    """Mean of the ``k`` largest values; mean of all when fewer exist."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot aggregate an empty patch list")
    if k < 1:
        raise ConfigError(f"top_k must be >= 1, got {k}")
    k = min(k, v.size)
    top = v if k == v.size else np.partition(v, v.size - k)[v.size - k:]
    # sorted summation keeps the result independent of input order
    return float(np.sort(top).sum() / k)


def stack_uncertainty(patches, cfg: AggregationConfig, stack_id: str = "") -> StackUncertainty:
    """Stack value V: mean of the top-K patch uncertainties.

    ``patches`` may be :class:`PatchUncertainty` records or raw patch values.
    """
    patches = list(patches) if not isinstance(patches, np.ndarray) else patches
    if len(patches) == 0:
        raise ValueError("cannot aggregate an empty patch list")
    if isinstance(patches, list) and isinstance(patches[0], PatchUncertainty):
        values = np.array([p.value for p in patches])
    else:
        values = np.asarray(patches, dtype=np.float64)
    return StackUncertainty(stack_id, top_k_mean(values, cfg.top_k))


def stack_uncertainty_from_heatmaps(committee_heatmaps: Sequence[HeatmapStack], cfg: AggregationConfig) -> StackUncertainty:
    """Heatmaps to V in one pass (no per-patch records)."""
    umap = uncertainty_map(committee_heatmaps)
    return StackUncertainty(umap.stack_id, top_k_mean(patch_means(umap.values, cfg.patch_size), cfg.top_k))


def single_model_entropy(heatmap: HeatmapStack, cfg: AggregationConfig) -> StackUncertainty:
    """Baseline: top-K mean of pixelwise entropy of one model's heatmap."""
    ent = binary_entropy(np.clip(heatmap.maps.astype(np.float64), 0.0, 1.0))
    return StackUncertainty(heatmap.stack_id, top_k_mean(patch_means(ent, cfg.patch_size), cfg.top_k))
