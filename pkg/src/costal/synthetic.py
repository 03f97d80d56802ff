"""Seeded synthetic stacks with elliptical lesions, bright non-lesion specks
and labeling times drawn from the log-linear time model.

Every stack is generated from its own child of the master seed sequence, so
a stack's content depends only on (master seed, split, index).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core_data import ConfigError, DatasetManifest, ManifestEntry, Stack
from .heatmap_analysis import mask_features

SPLIT_CODES = {"seed_trainval": 0, "seed_test": 1, "pool": 2, "pool_test": 3}


@dataclass(frozen=True)
class DomainParams:
    """Appearance of one acquisition domain."""

    noise_sigma: float = 1.0
    noise_smoothing: float = 0.0
    contrast_range: tuple[float, float] = (0.7, 2.2)
    radius_range: tuple[float, float] = (1.5, 9.0)
    speck_fraction: float = 0.35
    speck_count: tuple[int, int] = (1, 6)
    speck_amplitude: tuple[float, float] = (2.5, 5.0)

    def validate(self, height: int, width: int) -> None:
        for name in ("contrast_range", "radius_range", "speck_amplitude", "speck_count"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be a nonempty range, got {(lo, hi)}")
        if self.radius_range[0] <= 0:
            raise ConfigError("lesion radii must be positive")
        if 2 * self.radius_range[1] + 2 > min(height, width):
            raise ConfigError(f"lesion radius {self.radius_range[1]} does not fit a {height}x{width} frame")
        if self.noise_sigma <= 0 or not 0 <= self.speck_fraction <= 1:
            raise ConfigError("noise_sigma must be > 0 and speck_fraction in [0, 1]")


@dataclass(frozen=True)
class TimeModel:
    """Generator for ground-truth labeling times (seconds)."""

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    noise_sigma: float = 0.3
    floor_time: float = 60.0


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 64
    width: int = 64
    frames_range: tuple[int, int] = (8, 16)
    n_trainval: int = 256
    n_test: int = 96
    n_pool: int = 256
    n_pool_test: int = 96
    positive_fraction: float = 0.5
    max_lesions: int = 5
    lesion_depth: tuple[int, int] = (1, 4)
    seed_domain: DomainParams = field(default_factory=DomainParams)
    pool_domain: DomainParams = field(default_factory=DomainParams)
    time_model: TimeModel = field(default_factory=TimeModel)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.frames_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"frames_range must be a nonempty positive range, got {self.frames_range}")
        if self.height < 4 or self.width < 4:
            raise ConfigError("frames must be at least 4x4")
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if self.max_lesions < 1 or not 1 <= self.lesion_depth[0] <= self.lesion_depth[1]:
            raise ConfigError("max_lesions and lesion_depth must be >= 1")
        if min(self.n_trainval, self.n_test, self.n_pool, self.n_pool_test) < 0:
            raise ConfigError("split sizes must be >= 0")
        self.seed_domain.validate(self.height, self.width)
        self.pool_domain.validate(self.height, self.width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for key, typ in (("seed_domain", DomainParams), ("pool_domain", DomainParams), ("time_model", TimeModel)):
            if isinstance(d.get(key), dict):
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = typ(**sub)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def shifted_pool_domain(base: DomainParams = DomainParams(), strength: float = 1.0) -> DomainParams:
    """Default distribution shift for the pool domain, scaled by ``strength``.

    Pool scans are noisier (and smoother, when the base domain is smoothed),
    with smaller, fainter lesions and more specks. ``strength=0`` returns ``base`` unchanged.
    """
    s = float(strength)
    return DomainParams(
        noise_sigma=base.noise_sigma * (1.0 + 0.25 * s),
        noise_smoothing=base.noise_smoothing * (1.0 + 0.25 * s),
        contrast_range=(base.contrast_range[0] * (1.0 - 0.1 * s), base.contrast_range[1] * (1.0 - 0.2 * s)),
        radius_range=(base.radius_range[0], base.radius_range[1] * (1.0 - 0.2 * s)),
        speck_fraction=min(1.0, base.speck_fraction * (1.0 + 0.8 * s)),
        speck_count=base.speck_count,
        speck_amplitude=(base.speck_amplitude[0], base.speck_amplitude[1] * (1.0 + 0.2 * s)),
    )


def _noise(rng: np.random.Generator, shape, dom: DomainParams) -> np.ndarray:
    n = rng.standard_normal(shape)
    if dom.noise_smoothing > 0:
        n = ndimage.gaussian_filter(n, sigma=(0, dom.noise_smoothing, dom.noise_smoothing), mode="reflect")
        n /= n.std() + 1e-12
    return n * dom.noise_sigma


def _add_lesion(rng, frames, masks, dom: DomainParams, depth: tuple[int, int]) -> None:
    f, h, w = frames.shape
    lo, hi = dom.radius_range
    r = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    ry, rx = r, r * rng.uniform(0.6, 1.0)
    if rng.random() < 0.5:
        ry, rx = rx, ry
    rz = rng.integers(depth[0], depth[1] + 1)
    cz = rng.integers(0, f)
    cy = rng.uniform(ry + 1, h - ry - 1)
    cx = rng.uniform(rx + 1, w - rx - 1)
    contrast = rng.uniform(*dom.contrast_range)
    yy, xx = np.mgrid[0:h, 0:w]
    for z in range(max(0, cz - rz + 1), min(f, cz + rz)):
        shrink = 1.0 - ((z - cz) / rz) ** 2
        d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        d2 = d2 / max(shrink, 1e-6)
        inside = d2 <= 1.0
        if not inside.any():
            continue
        profile = np.where(inside, 0.55 + 0.45 * (1.0 - d2), 0.0)
        frames[z] += contrast * profile
        masks[z] |= inside


def _add_specks(rng, frames, dom: DomainParams) -> None:
    f, h, w = frames.shape
    for _ in range(rng.integers(dom.speck_count[0], dom.speck_count[1] + 1)):
        z, y, x = rng.integers(0, f), rng.integers(1, h - 1), rng.integers(1, w - 1)
        a = rng.uniform(*dom.speck_amplitude)
        frames[z, y, x] += a
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            frames[z, y + dy, x + dx] += 0.5 * a


def label_time(masks: np.ndarray, tm: TimeModel, rng: np.random.Generator) -> float:
    """Ground-truth time: the log-linear model on mask features, times lognormal noise."""
    noise = math.exp(tm.noise_sigma * rng.standard_normal()) if tm.noise_sigma > 0 else 1.0
    b, m = mask_features(masks)
    if b == 0:
        return tm.floor_time * noise
    return math.exp(tm.alpha * math.log(b) + tm.beta * math.log(m) + tm.gamma) * noise


def generate_stack(cfg: SyntheticConfig, split: str, index: int, positive: bool) -> Stack:
    ss = np.random.SeedSequence([cfg.seed, SPLIT_CODES[split], index])
    rng = np.random.default_rng(ss)
    time_rng = np.random.default_rng(ss.spawn(1)[0])
    dom = cfg.pool_domain if split in ("pool", "pool_test") else cfg.seed_domain
    f = int(rng.integers(cfg.frames_range[0], cfg.frames_range[1] + 1))
    shape = (f, cfg.height, cfg.width)
    frames = _noise(rng, shape, dom)
    masks = np.zeros(shape, dtype=bool)
    if positive:
        # geometric lesion count: many single lesions, a tail of multi-focal stacks
        n = min(cfg.max_lesions, int(rng.geometric(0.55)))
        for _ in range(n):
            _add_lesion(rng, frames, masks, dom, cfg.lesion_depth)
        if not masks.any():
            _add_lesion(rng, frames, masks, dom, (cfg.lesion_depth[1], cfg.lesion_depth[1]))
    if rng.random() < dom.speck_fraction:
        _add_specks(rng, frames, dom)
    masks = masks.astype(np.uint8)
    t = label_time(masks, cfg.time_model, time_rng)
    return Stack(f"{split}_{index:04d}", frames, masks, t, split)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> tuple[list[Stack], DatasetManifest]:
    """All four splits, with ground-truth masks and times, plus a manifest.

    Within each split the first ``round(n * positive_fraction)`` indices are
    positives after a seeded shuffle, so class balance is exact.
    """
    cfg.validate()
    stacks = []
    for split, n in (("seed_trainval", cfg.n_trainval), ("seed_test", cfg.n_test),
                     ("pool", cfg.n_pool), ("pool_test", cfg.n_pool_test)):
        n_pos = int(round(n * cfg.positive_fraction))
        order = np.random.default_rng([cfg.seed, SPLIT_CODES[split], 999_983]).permutation(n)
        positive = np.zeros(n, dtype=bool)
        positive[order[:n_pos]] = True
        stacks.extend(generate_stack(cfg, split, i, bool(positive[i])) for i in range(n))
    manifest = DatasetManifest([ManifestEntry(s.id, f"stacks/{s.id}.alst", s.split, s.gt_label_time) for s in stacks])
    return stacks, manifest
