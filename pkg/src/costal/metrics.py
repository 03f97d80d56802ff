"""Average precision at pixel, region, frame and stack granularity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .committee import frame_and_stack_scores
from .core_data import ConfigError, HeatmapStack, InvariantError

_EIGHT = np.ones((3, 3), dtype=bool)


class UndefinedMetricError(ValueError):
    """AP is undefined without positive instances."""


@dataclass(frozen=True)
class ScoredInstance:
    score: float
    label: int


@dataclass(frozen=True)
class RegionMatchConfig:
    threshold: float = 0.5
    iou_min: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"region threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 < self.iou_min <= 1.0:
            raise ConfigError(f"iou_min must lie in (0, 1], got {self.iou_min}")


def _ap_from_sorted_labels(labels_sorted: np.ndarray, n_pos: int) -> float:
    tp = np.cumsum(labels_sorted)
    ranks = np.arange(1, labels_sorted.size + 1)
    hits = labels_sorted.astype(bool)
    return float((tp[hits] / ranks[hits]).sum() / n_pos)


def average_precision(scores, labels=None) -> float:
    """Mean of precision at the rank of each positive.

    Ranking is by descending score; tied scores keep input order. Accepts
    either ``(scores, labels)`` arrays or a sequence of
    :class:`ScoredInstance`.
    """
    if labels is None:
        inst = list(scores)
        scores = np.array([i.score for i in inst], dtype=np.float64)
        labels = np.array([i.label for i in inst])
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvariantError(f"score/label length mismatch: {scores.size} vs {labels.size}")
    if np.any((labels != 0) & (labels != 1)):
        raise InvariantError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    return _ap_from_sorted_labels(labels[order].astype(np.int64), n_pos)


def _aligned(preds: Sequence[HeatmapStack], gts: Sequence[np.ndarray]) -> None:
    if len(preds) != len(gts):
        raise InvariantError(f"{len(preds)} predictions vs {len(gts)} ground-truth stacks")
    for p, g in zip(preds, gts):
        if p.shape != np.shape(g):
            raise InvariantError(f"{p.stack_id}: prediction {p.shape} vs mask {np.shape(g)}")


def pixel_ap(
    preds: Sequence[HeatmapStack],
    gts: Sequence[np.ndarray],
    negative_ratio: float | None = None,
    seed: int = 0,
) -> float:
    """AP over pixels as instances.

    ``negative_ratio`` in (0, 1] keeps that seeded fraction of background
    pixels (all foreground pixels are kept); ``None`` is exact.
    """
    _aligned(preds, gts)
    scores = np.concatenate([p.maps.ravel() for p in preds])
    labels = np.concatenate([(np.asarray(g) != 0).ravel() for g in gts]).astype(np.int8)
    if negative_ratio is not None:
        if not 0.0 < negative_ratio <= 1.0:
            raise ConfigError(f"negative_ratio must lie in (0, 1], got {negative_ratio}")
        keep = (labels == 1) | (np.random.default_rng(seed).random(labels.size) < negative_ratio)
        scores, labels = scores[keep], labels[keep]
    return average_precision(scores, labels)


def frame_labels(gt: np.ndarray) -> np.ndarray:
    g = np.asarray(gt) != 0
    return g.reshape(g.shape[0], -1).any(axis=1).astype(np.int8)


def frame_ap(preds: Sequence[HeatmapStack], gts: Sequence[np.ndarray], **score_kw) -> float:
    _aligned(preds, gts)
    scores = np.concatenate([frame_and_stack_scores(p, **score_kw)[0] for p in preds])
    labels = np.concatenate([frame_labels(g) for g in gts])
    return average_precision(scores, labels)


def stack_ap(preds: Sequence[HeatmapStack], gts: Sequence[np.ndarray], **score_kw) -> float:
    _aligned(preds, gts)
    scores = np.array([frame_and_stack_scores(p, **score_kw)[1] for p in preds])
    labels = np.array([int(np.any(g)) for g in gts])
    return average_precision(scores, labels)


def _frame_regions(prob: np.ndarray, gt: np.ndarray, cfg: RegionMatchConfig):
    """Predicted regions of one frame as (score, frame-local id) and IoU matrix."""
    pl, npred = ndimage.label(prob >= cfg.threshold, structure=_EIGHT)
    gl, ngt = ndimage.label(gt != 0, structure=_EIGHT)
    if npred == 0:
        return np.zeros(0), np.zeros((0, ngt)), ngt
    scores = np.asarray(ndimage.maximum(prob, pl, index=np.arange(1, npred + 1)), dtype=np.float64)
    if ngt == 0:
        return scores, np.zeros((npred, 0)), 0
    inter = np.bincount(pl.ravel() * (ngt + 1) + gl.ravel(), minlength=(npred + 1) * (ngt + 1))
    inter = inter.reshape(npred + 1, ngt + 1)[1:, 1:].astype(np.float64)
    area_p = np.bincount(pl.ravel(), minlength=npred + 1)[1:].astype(np.float64)
    area_g = np.bincount(gl.ravel(), minlength=ngt + 1)[1:].astype(np.float64)
    iou = inter / (area_p[:, None] + area_g[None, :] - inter)
    return scores, iou, ngt


def region_ap(
    preds: Sequence[HeatmapStack],
    gts: Sequence[np.ndarray],
    cfg: RegionMatchConfig = RegionMatchConfig(),
) -> float:
    """Detection-style AP over 2D connected regions.

    Predicted regions are scored by their max probability and matched
    greedily in descending score order, each to the unmatched ground-truth
    region of the same frame with the highest IoU, if that IoU reaches
    ``cfg.iou_min``. Unmatched ground-truth regions count as missed.
    """
    _aligned(preds, gts)
    records = []  # (score, frame key, local index)
    ious = {}
    n_gt = 0
    for si, (p, g) in enumerate(zip(preds, gts)):
        g = np.asarray(g)
        for fi in range(p.maps.shape[0]):
            scores, iou, ngt = _frame_regions(p.maps[fi], g[fi], cfg)
            n_gt += ngt
            key = (si, fi)
            ious[key] = iou
            records.extend((float(s), key, j) for j, s in enumerate(scores))
    if n_gt == 0:
        raise UndefinedMetricError("region AP needs at least one ground-truth region")
    # stable: equal scores keep raster order of (stack, frame, region)
    records.sort(key=lambda r: -r[0])
    matched = {key: np.zeros(m.shape[1], dtype=bool) for key, m in ious.items()}
    hits = np.zeros(len(records), dtype=np.int64)
    for r, (_, key, j) in enumerate(records):
        row = ious[key][j]
        if row.size == 0:
            continue
        cand = np.where(matched[key], -1.0, row)
        best = int(np.argmax(cand))
        if cand[best] >= cfg.iou_min:
            matched[key][best] = True
            hits[r] = 1
    if len(records) == 0:
        return 0.0
    return _ap_from_sorted_labels(hits, n_gt)


def evaluate(
    preds: Sequence[HeatmapStack],
    gts: Sequence[np.ndarray],
    region_cfg: RegionMatchConfig = RegionMatchConfig(),
    levels: Sequence[str] = ("pixel", "region", "frame", "stack"),
) -> dict:
    """All requested AP levels; undefined levels report NaN."""
    out: dict = {}
    counts = {
        "pixel": (int(sum(int(np.count_nonzero(g)) for g in gts)), int(sum(np.size(g) for g in gts))),
        "frame": (int(sum(frame_labels(g).sum() for g in gts)), int(sum(np.shape(g)[0] for g in gts))),
        "stack": (int(sum(int(np.any(g)) for g in gts)), len(gts)),
    }
    funcs = {
        "pixel": lambda: pixel_ap(preds, gts),
        "region": lambda: region_ap(preds, gts, region_cfg),
        "frame": lambda: frame_ap(preds, gts),
        "stack": lambda: stack_ap(preds, gts),
    }
    for level in levels:
        try:
            out[f"{level}_ap"] = funcs[level]()
        except UndefinedMetricError:
            out[f"{level}_ap"] = math.nan
    out["n_pos"] = {k: v[0] for k, v in counts.items() if k in levels}
    out["n_instances"] = {k: v[1] for k, v in counts.items() if k in levels}
    return out
