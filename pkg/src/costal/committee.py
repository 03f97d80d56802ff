"""Committee of patch-level pixel classifiers.

Any object with ``predict_patches(patches) -> probabilities`` (same shape,
values in [0, 1]) can sit in a committee. The bundled
:class:`LinearPatchLearner` is a deliberately weak L2-regularized logistic
classifier, linear in a fixed local-feature basis and trained by minibatch
SGD.

Feature basis ``local-bins-v1``. Six base maps are computed per pixel inside
the patch (reflected borders):

    0  intensity
    1  3x3 mean        2  3x3 standard deviation
    3  7x7 mean        4  7x7 standard deviation
    5  15x15 mean

Each base map is standardized with the training-set mean and deviation,
clipped to [-4, 8] and expanded into 13 unit-spaced hat functions centred on
-4, -3, ..., 8, giving 78 piecewise-linear features. The row and column
coordinates within the patch (scaled to [-1, 1]) enter linearly, for 80
weights plus a bias.

Bins that the training data never reaches keep their random initial
weights, so independently initialised members disagree exactly on inputs
unlike anything they were trained on.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from . import _kernels
from .core_data import ConfigError, HeatmapStack, Stack

log = logging.getLogger(__name__)

BASIS_ID = "local-bins-v1"
N_BASE = 6
N_BINS = 13
BIN_LO = -4.0
N_WEIGHTS = N_BASE * N_BINS + 2
CHECKPOINT_MAGIC = b"ALPR"
CHECKPOINT_VERSION = 1


class DegenerateDataWarning(UserWarning):
    """Training labels contain a single class."""


@runtime_checkable
class PatchPredictor(Protocol):
    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        """Map (P, s, s) intensities to (P, s, s) probabilities."""
        ...


class ConstantPredictor:
    """Predicts one probability everywhere; useful for coverage checks."""

    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"probability must lie in [0, 1], got {value}")
        self.value = float(value)

    def predict_patches(self, patches):
        return np.full(np.shape(patches), self.value)


def base_features(patches: np.ndarray) -> np.ndarray:
    """The six base maps for (P, s, s) patches -> (6, P, s, s) float32."""
    x = np.asarray(patches, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    out = np.empty((N_BASE,) + x.shape, dtype=np.float32)
    out[0] = x
    x2 = x * x
    for col, k in ((1, 3), (3, 7)):
        m = ndimage.uniform_filter(x, size=(1, k, k), mode="reflect")
        out[col] = m
        out[col + 1] = np.sqrt(np.maximum(ndimage.uniform_filter(x2, size=(1, k, k), mode="reflect") - m * m, 0.0))
    out[5] = ndimage.uniform_filter(x, size=(1, 15, 15), mode="reflect")
    return out


def coordinate_axes(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates of an h x w patch, each scaled to [-1, 1]."""
    return np.linspace(-1.0, 1.0, h, dtype=np.float32), np.linspace(-1.0, 1.0, w, dtype=np.float32)


def patch_coordinates(shape) -> np.ndarray:
    """Flat (P * h * w, 2) coordinates for (P, h, w) patches in raster order."""
    p, h, w = shape
    rows, cols = coordinate_axes(h, w)
    grid = np.stack(np.broadcast_arrays(rows[:, None], cols[None, :]), axis=-1)
    return np.broadcast_to(grid, (p, h, w, 2)).reshape(-1, 2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bin_encode(base: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hat-function encoding of (n, 6) base features.

    Returns flat weight indices ``idx`` (n, 6) of the lower hat and the
    interpolation fraction ``frac`` toward the next hat; the upper index is
    ``idx + 1``.
    """
    z = (base - mean.astype(np.float32)) / scale.astype(np.float32)
    u = np.clip(z - np.float32(BIN_LO), 0.0, N_BINS - 1)
    lo = np.minimum(u.astype(np.int32), N_BINS - 2)
    frac = (u - lo).astype(np.float32)
    idx = lo + (np.arange(N_BASE, dtype=np.int32) * N_BINS)[None, :]
    return idx, frac


@dataclass
class LearnerConfig:
    learning_rate: float = 4.0
    epochs: int = 6
    l2: float = 1e-4
    batch_size: int = 2048
    patch_size: int = 32
    crops_per_frame: int = 1
    init_scale: float = 0.05
    pixel_fraction: float = 0.25

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate, epochs and batch_size must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.patch_size < 1 or self.crops_per_frame < 1:
            raise ConfigError("patch_size and crops_per_frame must be >= 1")
        if not 0.0 < self.pixel_fraction <= 1.0:
            raise ConfigError(f"pixel_fraction must lie in (0, 1], got {self.pixel_fraction}")


@dataclass(eq=False)
class LinearPatchLearner:
    """One trained committee member.

    ``weights`` holds 78 hat weights (base-map major) followed by the two
    coordinate weights; ``base_mean`` and ``base_scale`` standardize the
    base maps before binning.
    """

    weights: np.ndarray
    bias: float
    base_mean: np.ndarray
    base_scale: np.ndarray
    config: LearnerConfig = field(default_factory=LearnerConfig)
    init_seed: int = 0
    order_seed: int = 0
    basis: str = BASIS_ID

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.base_mean = np.asarray(self.base_mean, dtype=np.float64)
        self.base_scale = np.asarray(self.base_scale, dtype=np.float64)
        if self.weights.shape != (N_WEIGHTS,):
            raise ConfigError(f"expected {N_WEIGHTS} weights, got {self.weights.shape}")
        if self.base_mean.shape != (N_BASE,) or self.base_scale.shape != (N_BASE,):
            raise ConfigError(f"normalization vectors must have length {N_BASE}")
        if np.any(self.base_scale <= 0):
            raise ConfigError("base_scale entries must be > 0")

    def hat_knots(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Knot positions (raw feature units) and weights of base map ``k``."""
        xp = (BIN_LO + np.arange(N_BINS)) * self.base_scale[k] + self.base_mean[k]
        return xp, self.weights[k * N_BINS: (k + 1) * N_BINS]

    def decision_maps(self, base: np.ndarray) -> np.ndarray:
        """Logits for (6, P, h, w) base maps."""
        return _member_logits([self], base)[0]

    def predict_maps(self, base: np.ndarray) -> np.ndarray:
        """Probabilities for (6, P, h, w) base maps."""
        return _sigmoid(self.decision_maps(base))

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        p3 = patches[None] if patches.ndim == 2 else patches
        return self.predict_maps(base_features(p3)).reshape(patches.shape)

    def __eq__(self, other):
        if not isinstance(other, LinearPatchLearner):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and np.array_equal(self.base_mean, other.base_mean)
            and np.array_equal(self.base_scale, other.base_scale)
            and self.config == other.config
            and (self.init_seed, self.order_seed, self.basis) == (other.init_seed, other.order_seed, other.basis)
        )


# ---------------------------------------------------------------------------
# training


def sample_training_pixels(
    stacks: Sequence[Stack], cfg: LearnerConfig, rng: np.random.Generator, bootstrap: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random square crops from every frame, as flat (base, coords, labels).

    Stacks are visited in id order so the draw depends only on the set of
    stacks and the generator state. With ``bootstrap`` the crops are
    resampled with replacement. A ``pixel_fraction`` below one keeps a
    uniform random subset of the pixels.
    """
    crops, labels = [], []
    for s in sorted(stacks, key=lambda s: s.id):
        f, h, w = s.shape
        ps = min(cfg.patch_size, h, w)
        for _ in range(cfg.crops_per_frame):
            ys = rng.integers(0, h - ps + 1, size=f)
            xs = rng.integers(0, w - ps + 1, size=f)
            for fi in range(f):
                crops.append(s.frames[fi, ys[fi]: ys[fi] + ps, xs[fi]: xs[fi] + ps])
                labels.append(s.gt_masks[fi, ys[fi]: ys[fi] + ps, xs[fi]: xs[fi] + ps])
    if bootstrap:
        idx = rng.integers(0, len(crops), size=len(crops))
        crops = [crops[i] for i in idx]
        labels = [labels[i] for i in idx]
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(crops):
        groups.setdefault(c.shape, []).append(i)
    base, coords, ys_ = [], [], []
    for shape in sorted(groups):
        batch = np.stack([crops[i] for i in groups[shape]])
        base.append(base_features(batch).reshape(N_BASE, -1).T)
        coords.append(patch_coordinates(batch.shape))
        ys_.append(np.stack([labels[i] for i in groups[shape]]).reshape(-1))
    base, coords, y = np.concatenate(base), np.concatenate(coords), np.concatenate(ys_).astype(np.float32)
    if cfg.pixel_fraction < 1.0:
        keep = rng.random(y.size) < cfg.pixel_fraction
        base, coords, y = base[keep], coords[keep], y[keep]
    return base, coords, y


def train_learner(
    stacks: Sequence[Stack],
    cfg: LearnerConfig = LearnerConfig(),
    init_seed: int = 0,
    order_seed: int = 0,
    bootstrap: bool = False,
) -> LinearPatchLearner:
    """Fit one member by minibatch SGD on cross-entropy plus L2.

    ``init_seed`` fixes the initial weights; ``order_seed`` fixes crop
    positions, bootstrap draws and minibatch order.
    """
    stacks = list(stacks)
    if not stacks:
        raise ValueError("cannot train on an empty labeled set")
    if any(s.gt_masks is None for s in stacks):
        raise ValueError("every training stack needs ground-truth masks")
    rng = np.random.default_rng(order_seed)
    base, coords, y = sample_training_pixels(stacks, cfg, rng, bootstrap)
    mean = base.mean(axis=0, dtype=np.float64)
    scale = base.std(axis=0, dtype=np.float64)
    scale[scale < 1e-8] = 1.0
    pos = float(y.mean())
    if pos in (0.0, 1.0):
        warnings.warn(f"training labels are all {int(pos)}; the learner can only predict one class", DegenerateDataWarning)
    idx, frac = bin_encode(base, mean, scale)
    init = np.random.default_rng(init_seed)
    w = init.normal(0.0, cfg.init_scale, size=N_WEIGHTS)
    b = float(init.normal(0.0, cfg.init_scale))
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    y = y.astype(np.float64)
    for _ in range(cfg.epochs):
        perm = rng.permutation(y.size)
        b = _kernels.sgd_epoch(idx, frac, coords, y, perm, w, b, cfg.learning_rate, cfg.l2, cfg.batch_size)
    return LinearPatchLearner(
        weights=w,
        bias=float(b),
        base_mean=mean,
        base_scale=scale,
        config=cfg,
        init_seed=init_seed,
        order_seed=order_seed,
    )


@dataclass
class Committee:
    members: list
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("a committee needs at least one member")

    @property
    def n_members(self) -> int:
        return len(self.members)

    def predict_stack(self, stack: Stack, patch_size: int, stride: int) -> list[HeatmapStack]:
        """Sliding-window heatmaps of every member for one stack."""
        if all(isinstance(m, LinearPatchLearner) and m.basis == BASIS_ID for m in self.members):
            return _linear_committee_predict(self.members, stack, patch_size, stride)
        return [sliding_window_predict(m, stack, patch_size, stride) for m in self.members]


def member_seeds(seed: int, n_members: int) -> list[tuple[int, int]]:
    """Independent (init, order) seed pairs for each member from one seed."""
    children = np.random.SeedSequence(seed).spawn(n_members)
    return [tuple(int(v) for v in c.generate_state(2)) for c in children]


def train_committee(
    labeled: Sequence[Stack],
    n_members: int = 4,
    seeds: Sequence[int] | Sequence[tuple[int, int]] | None = None,
    bootstrap: bool = False,
    cfg: LearnerConfig = LearnerConfig(),
) -> Committee:
    """Train ``n_members`` independently initialised learners on ``labeled``.

    ``seeds`` holds one entry per member: an int (used for both init and
    sample order, offset so the two streams differ) or an (init, order) pair.
    """
    labeled = list(labeled)
    if not labeled:
        raise ValueError("cannot train a committee on an empty labeled set")
    if seeds is None:
        seeds = list(range(n_members))
    if len(seeds) != n_members:
        raise ConfigError(f"need {n_members} seeds, got {len(seeds)}")
    notes = []
    members = []
    for s in seeds:
        init_seed, order_seed = (s, s + 1_000_003) if isinstance(s, (int, np.integer)) else s
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateDataWarning)
            members.append(train_learner(labeled, cfg, int(init_seed), int(order_seed), bootstrap))
        for wmsg in caught:
            if issubclass(wmsg.category, DegenerateDataWarning):
                notes.append(str(wmsg.message))
    if notes:
        warnings.warn(notes[0], DegenerateDataWarning)
        log.warning("degenerate training data: %s", notes[0])
    return Committee(members, sorted(set(notes)))


# ---------------------------------------------------------------------------
# inference


def window_starts(n: int, patch_size: int, stride: int) -> list[int]:
    """Grid of window origins; a final window is snapped to the border if needed."""
    starts = list(range(0, n - patch_size + 1, stride))
    if starts[-1] + patch_size < n:
        starts.append(n - patch_size)
    return starts


def _check_geometry(shape, patch_size: int, stride: int) -> None:
    _, h, w = shape
    if not 1 <= stride <= patch_size:
        raise ConfigError(f"need 1 <= stride <= patch_size, got stride={stride}, patch_size={patch_size}")
    if patch_size > min(h, w):
        raise ConfigError(f"patch_size {patch_size} exceeds frame size {h}x{w}")


def _extract(frames: np.ndarray, patch_size: int, stride: int):
    f, h, w = frames.shape
    ys, xs = window_starts(h, patch_size, stride), window_starts(w, patch_size, stride)
    coords = [(fi, y, x) for fi in range(f) for y in ys for x in xs]
    patches = np.stack([frames[fi, y: y + patch_size, x: x + patch_size] for fi, y, x in coords])
    return patches, coords


def _overlap_average(preds: np.ndarray, coords, shape, patch_size: int) -> np.ndarray:
    acc = np.zeros(shape, dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.float64)
    for p, (fi, y, x) in zip(preds, coords):
        acc[fi, y: y + patch_size, x: x + patch_size] += p
        cnt[fi, y: y + patch_size, x: x + patch_size] += 1.0
    return acc / cnt


def sliding_window_predict(predictor, stack: Stack, patch_size: int = 32, stride: int = 16) -> HeatmapStack:
    """Whole-stack heatmap from overlapping patch predictions (arithmetic mean)."""
    _check_geometry(stack.shape, patch_size, stride)
    patches, coords = _extract(stack.frames, patch_size, stride)
    preds = np.asarray(predictor.predict_patches(patches), dtype=np.float64)
    if preds.shape != patches.shape:
        raise ConfigError(f"predictor returned shape {preds.shape} for input {patches.shape}")
    out = _overlap_average(preds, coords, stack.shape, patch_size)
    return HeatmapStack(stack.id, np.clip(out, 0.0, 1.0))


def _member_logits(members, base: np.ndarray) -> np.ndarray:
    """Logits of every member for (6, P, h, w) base maps -> (M, P, h, w)."""
    _, p, h, w = base.shape
    knot0 = np.array([BIN_LO * m.base_scale + m.base_mean for m in members])
    inv_step = np.array([1.0 / m.base_scale for m in members])
    hats = np.array([m.weights[: N_BASE * N_BINS].reshape(N_BASE, N_BINS) for m in members])
    coord_w = np.array([m.weights[N_BASE * N_BINS:] for m in members])
    bias = np.array([m.bias for m in members], dtype=np.float64)
    flat_coords = patch_coordinates((p, h, w))
    rows = np.ascontiguousarray(flat_coords[:, 0], dtype=np.float64)
    cols = np.ascontiguousarray(flat_coords[:, 1], dtype=np.float64)
    out = np.empty((len(members), p * h * w), dtype=np.float64)
    flat = np.ascontiguousarray(base.reshape(N_BASE, -1))
    _kernels.committee_logits(flat, knot0, inv_step, hats, coord_w, bias, rows, cols, out)
    return out.reshape(len(members), p, h, w)


def _linear_committee_predict(members, stack: Stack, patch_size: int, stride: int) -> list[HeatmapStack]:
    _check_geometry(stack.shape, patch_size, stride)
    patches, coords = _extract(stack.frames, patch_size, stride)
    probs = _sigmoid(_member_logits(members, base_features(patches)))
    return [
        HeatmapStack(stack.id, np.clip(_overlap_average(pr, coords, stack.shape, patch_size), 0.0, 1.0))
        for pr in probs
    ]


def frame_and_stack_scores(heatmap: HeatmapStack, reduction: str = "max", top_k: int = 16):
    """Frame score and stack score from a heatmap.

    ``reduction="max"``: frame score is the max pixel, stack score the max
    frame score. ``"topk_mean"`` uses the mean of the ``top_k`` largest
    pixels per frame instead.
    """
    flat = heatmap.maps.reshape(heatmap.maps.shape[0], -1).astype(np.float64)
    if reduction == "max":
        frames = flat.max(axis=1)
    elif reduction == "topk_mean":
        k = min(top_k, flat.shape[1])
        frames = np.sort(flat, axis=1)[:, -k:].mean(axis=1)
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    return frames, float(frames.max())


# ---------------------------------------------------------------------------
# checkpoints
#
#   magic "ALPR" | version u16 | basis-id length u16 | basis-id utf-8
#   n_base u32 | n_bins u32 | bin_lo f64
#   base_mean f64[n_base] | base_scale f64[n_base]
#   n_weights u32 | weights f64[n_weights] | bias f64
#   learning_rate f64 | l2 f64 | init_scale f64 | pixel_fraction f64
#   epochs u32 | batch_size u32 | patch_size u32 | crops_per_frame u32
#   init_seed u64 | order_seed u64          (all little-endian)

_TAIL = struct.Struct("<ddddIIIIQQ")


def encode_learner(m: LinearPatchLearner) -> bytes:
    basis = m.basis.encode("utf-8")
    c = m.config
    return b"".join([
        struct.pack("<4sHH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(basis)),
        basis,
        struct.pack("<IId", N_BASE, N_BINS, BIN_LO),
        m.base_mean.astype("<f8").tobytes(),
        m.base_scale.astype("<f8").tobytes(),
        struct.pack("<I", m.weights.size),
        m.weights.astype("<f8").tobytes(),
        struct.pack("<d", m.bias),
        _TAIL.pack(c.learning_rate, c.l2, c.init_scale, c.pixel_fraction, c.epochs, c.batch_size,
                   c.patch_size, c.crops_per_frame, m.init_seed, m.order_seed),
    ])


def decode_learner(data: bytes) -> LinearPatchLearner:
    if len(data) < 8:
        raise ValueError("truncated checkpoint")
    magic, version, blen = struct.unpack_from("<4sHH", data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    basis = data[off: off + blen].decode("utf-8")
    off += blen
    if basis != BASIS_ID:
        raise ValueError(f"unknown feature basis {basis!r}")
    n_base, n_bins, bin_lo = struct.unpack_from("<IId", data, off)
    off += 16
    if (n_base, n_bins, bin_lo) != (N_BASE, N_BINS, BIN_LO):
        raise ValueError(f"basis geometry {(n_base, n_bins, bin_lo)} does not match {BASIS_ID}")

    def vec(k):
        nonlocal off
        v = np.frombuffer(data, dtype="<f8", count=k, offset=off).astype(np.float64)
        off += 8 * k
        return v

    mean, scale = vec(n_base), vec(n_base)
    (n_w,) = struct.unpack_from("<I", data, off)
    off += 4
    weights = vec(n_w)
    (bias,) = struct.unpack_from("<d", data, off)
    off += 8
    if off + _TAIL.size != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    lr, l2, init_scale, frac, epochs, batch, patch, crops, init_seed, order_seed = _TAIL.unpack_from(data, off)
    cfg = LearnerConfig(lr, epochs, l2, batch, patch, crops, init_scale, frac)
    return LinearPatchLearner(weights, bias, mean, scale, cfg, init_seed, order_seed, basis)


def save_learner(m: LinearPatchLearner, path) -> None:
    Path(path).write_bytes(encode_learner(m))


def load_learner(path) -> LinearPatchLearner:
    return decode_learner(Path(path).read_bytes())


def save_committee(committee: Committee, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(committee.members):
        p = directory / f"member_{i}.alpr"
        save_learner(m, p)
        paths.append(p)
    return paths


def load_committee(directory) -> Committee:
    paths = sorted(Path(directory).glob("member_*.alpr"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no member_*.alpr checkpoints in {directory}")
    return Committee([load_learner(p) for p in paths])
