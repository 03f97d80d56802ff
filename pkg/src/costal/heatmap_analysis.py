"""Mask morphology for the labeling-time features.

Boundary length counts exposed unit edges (4-neighbourhood) and components use
8-connectivity, the usual complementary pair on a square grid. Both are
computed per 2D frame and summed over the stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core_data import ConfigError, HeatmapStack, InvariantError

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThresholdSet:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if not t:
            raise ConfigError("threshold set must be nonempty")
        if any(not 0.0 < x < 1.0 for x in t):
            raise ConfigError(f"thresholds must lie in (0, 1): {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"thresholds must be strictly ascending: {t}")

    def __iter__(self):
        return iter(self.thresholds)

    def __len__(self):
        return len(self.thresholds)


@dataclass
class StackFeatures:
    """Cost-model inputs for one stack.

    ``boundary_length`` (B) and ``component_count`` (M) are means over
    thresholds of the stack-total values; the per-threshold totals are kept
    for diagnostics.
    """

    stack_id: str
    boundary_length: float
    component_count: float
    per_threshold: dict[float, tuple[float, int]] = field(default_factory=dict)


def mean_heatmap(committee_heatmaps: Sequence[HeatmapStack]) -> HeatmapStack:
    if not committee_heatmaps:
        raise ConfigError("mean_heatmap needs at least one heatmap")
    first = committee_heatmaps[0]
    for h in committee_heatmaps[1:]:
        if h.shape != first.shape or h.stack_id != first.stack_id:
            raise InvariantError(f"heatmap mismatch: {h.stack_id}{h.shape} vs {first.stack_id}{first.shape}")
    stacked = np.stack([h.maps.astype(np.float64) for h in committee_heatmaps])
    return HeatmapStack(first.stack_id, stacked.mean(axis=0))


def threshold(prob_map: np.ndarray, tau: float) -> np.ndarray:
    """Binary mask ``prob_map >= tau`` as uint8."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {tau}")
    return (np.asarray(prob_map) >= tau).astype(np.uint8)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling of a 2D mask; labels 1..count in raster-scan order."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvariantError(f"connected_components expects a 2D mask, got ndim={mask.ndim}")
    labels, count = ndimage.label(mask != 0, structure=_EIGHT)
    return labels, int(count)


def boundary_length(mask: np.ndarray) -> float:
    """Number of foreground pixel edges facing background or the frame border."""
    m = np.asarray(mask) != 0
    if m.ndim == 2:
        m = m[None]
    padded = np.pad(m, ((0, 0), (1, 1), (1, 1)))
    fg = padded.astype(np.int8)
    # each foreground/background transition along an axis is one exposed edge
    edges = np.abs(np.diff(fg, axis=1)).sum() + np.abs(np.diff(fg, axis=2)).sum()
    return float(edges)


def component_count(masks: np.ndarray) -> int:
    """Total 2D component count over the frames of a (F, H, W) mask."""
    m = np.asarray(masks) != 0
    if m.ndim == 2:
        m = m[None]
    # frames stacked with a blank separator row never connect to each other
    f, h, w = m.shape
    tall = np.zeros((f * (h + 1), w), dtype=bool)
    for i in range(f):
        tall[i * (h + 1): i * (h + 1) + h] = m[i]
    return int(ndimage.label(tall, structure=_EIGHT)[1])


def mask_features(masks: np.ndarray) -> tuple[float, int]:
    """(boundary length, component count) summed over the frames of a mask stack."""
    return boundary_length(masks), component_count(masks)


def stack_features(mean: HeatmapStack, thresholds: ThresholdSet = ThresholdSet()) -> StackFeatures:
    per = {}
    for tau in thresholds:
        per[tau] = mask_features(threshold(mean.maps, tau))
    b = float(np.mean([v[0] for v in per.values()]))
    m = float(np.mean([v[1] for v in per.values()]))
    return StackFeatures(mean.stack_id, b, m, per)


def gt_features(stack_id: str, masks: np.ndarray) -> StackFeatures:
    """Features of a ground-truth mask stack (threshold-free)."""
    b, m = mask_features(masks)
    return StackFeatures(stack_id, b, float(m), {})
