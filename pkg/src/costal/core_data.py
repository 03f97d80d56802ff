"""Domain types and on-disk formats shared by every pipeline stage.

A stack is held as a ``(frames, height, width)`` float32 array; frames, masks
and heatmaps are plain 2D numpy slices of it rather than wrapper objects.

Binary stack container (little-endian)::

    magic        4 bytes  b"ALST"
    version      u16      1
    flags        u16      bit 0: masks present, bit 1: payload is probabilities
    height       u32
    width        u32
    frame_count  u32
    pixels       frame_count * height * width  f32
    masks        frame_count * height * width  u8   (only if bit 0 is set)

The container stores pixels only. Stack identity comes from the file stem and
split / labeling time from the dataset manifest, so a stack can change split
without rewriting its pixels.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"ALST"
VERSION = 1
FLAG_MASKS = 0x1
FLAG_PROBABILITIES = 0x2
_HEADER = struct.Struct("<4sHHIII")

SPLITS = ("seed_trainval", "seed_test", "pool", "pool_test")
MANIFEST_FIELDS = ("stack_id", "path", "split", "gt_label_time")


class StackError(ValueError):
    """Base class for stack validation and container errors."""


class InvariantError(StackError):
    """A stack violates its structural invariants."""


class HeaderError(StackError):
    """The container header is malformed (magic, version, flags)."""


class PayloadError(StackError):
    """The payload length disagrees with the dimensions in the header."""


class ProbabilityRangeError(StackError):
    """A probability payload holds values outside [0, 1]."""


class ManifestError(StackError):
    """The dataset manifest is inconsistent."""


class ConfigError(ValueError):
    """A configuration value is outside its accepted range."""


@dataclass(eq=False)
class Stack:
    """One volumetric scan.

    Attributes
    ----------
    id : str
        Unique identifier.
    frames : ndarray, shape (F, H, W)
        Intensities, cast to float32 on construction.
    gt_masks : ndarray of uint8, shape (F, H, W), optional
        Binary ground-truth masks aligned with ``frames``.
    gt_label_time : float, optional
        Observed labeling time in seconds.
    split : str
        One of ``SPLITS``.
    """

    id: str
    frames: np.ndarray
    gt_masks: np.ndarray | None = None
    gt_label_time: float | None = None
    split: str = "pool"

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype="<f4")
        if self.gt_masks is not None:
            self.gt_masks = np.ascontiguousarray(self.gt_masks, dtype=np.uint8)
        if self.gt_label_time is not None:
            self.gt_label_time = float(self.gt_label_time)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape)

    @property
    def has_masks(self) -> bool:
        return self.gt_masks is not None

    def validate(self) -> None:
        """Raise :class:`InvariantError` if any stack invariant fails."""
        if not self.id:
            raise InvariantError("stack id must be nonempty")
        if self.frames.ndim != 3:
            raise InvariantError(f"{self.id}: frames must be 3D (F, H, W), got ndim={self.frames.ndim}")
        f, h, w = self.frames.shape
        if f < 1 or h < 1 or w < 1:
            raise InvariantError(f"{self.id}: empty dimension in frames shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InvariantError(f"{self.id}: non-finite pixel values")
        if self.gt_masks is not None:
            if self.gt_masks.shape != self.frames.shape:
                raise InvariantError(
                    f"{self.id}: mask shape {self.gt_masks.shape} != frame shape {self.frames.shape}"
                )
            if self.gt_masks.size and self.gt_masks.max() > 1:
                raise InvariantError(f"{self.id}: masks must be 0/1")
        if self.gt_label_time is not None and not self.gt_label_time > 0:
            raise InvariantError(f"{self.id}: gt_label_time must be > 0, got {self.gt_label_time}")
        if self.split not in SPLITS:
            raise InvariantError(f"{self.id}: unknown split {self.split!r}")

    def without_labels(self) -> "Stack":
        """Copy with masks and time stripped, as an unlabeled pool item."""
        return Stack(self.id, self.frames, None, None, self.split)

    def __eq__(self, other):
        if not isinstance(other, Stack):
            return NotImplemented
        if (self.id, self.split, self.gt_label_time) != (other.id, other.split, other.gt_label_time):
            return False
        if self.frames.shape != other.frames.shape:
            return False
        if self.frames.tobytes() != other.frames.tobytes():
            return False
        if (self.gt_masks is None) != (other.gt_masks is None):
            return False
        return self.gt_masks is None or np.array_equal(self.gt_masks, other.gt_masks)


@dataclass(eq=False)
class HeatmapStack:
    """Per-pixel probabilities for one stack, shape (F, H, W)."""

    stack_id: str
    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3:
            raise InvariantError(f"{self.stack_id}: heatmap must be 3D, got ndim={self.maps.ndim}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.maps.shape)

    def validate(self) -> None:
        if self.maps.size and (self.maps.min() < 0.0 or self.maps.max() > 1.0):
            raise ProbabilityRangeError(f"{self.stack_id}: heatmap values outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, HeatmapStack):
            return NotImplemented
        return (
            self.stack_id == other.stack_id
            and self.maps.shape == other.maps.shape
            and self.maps.tobytes() == other.maps.tobytes()
        )


@dataclass
class ManifestEntry:
    stack_id: str
    path: str
    split: str
    gt_label_time: float | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.stack_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate stack ids in manifest: {dup[:5]}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{e.stack_id}: unknown split {e.split!r}")

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# container I/O


def encode_stack(stack: Stack, probabilities: bool = False) -> bytes:
    """Serialize ``stack`` to container bytes. Deterministic for equal inputs."""
    stack.validate()
    if probabilities and (stack.frames.min() < 0.0 or stack.frames.max() > 1.0):
        raise ProbabilityRangeError(f"{stack.id}: probability payload outside [0, 1]")
    f, h, w = stack.frames.shape
    flags = (FLAG_MASKS if stack.gt_masks is not None else 0) | (FLAG_PROBABILITIES if probabilities else 0)
    parts = [_HEADER.pack(MAGIC, VERSION, flags, h, w, f), stack.frames.astype("<f4", copy=False).tobytes()]
    if stack.gt_masks is not None:
        parts.append(stack.gt_masks.tobytes())
    return b"".join(parts)


def decode_stack(data: bytes, stack_id: str, split: str = "pool", gt_label_time: float | None = None) -> Stack:
    if len(data) < _HEADER.size:
        raise HeaderError(f"{stack_id}: truncated header ({len(data)} bytes)")
    magic, version, flags, h, w, f = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HeaderError(f"{stack_id}: bad magic {magic!r}")
    if version != VERSION:
        raise HeaderError(f"{stack_id}: unsupported version {version}")
    if flags & ~(FLAG_MASKS | FLAG_PROBABILITIES):
        raise HeaderError(f"{stack_id}: unknown flag bits {flags:#06x}")
    if h == 0 or w == 0 or f == 0:
        raise HeaderError(f"{stack_id}: zero dimension in header ({f}x{h}x{w})")
    n = f * h * w
    expected = _HEADER.size + 4 * n + (n if flags & FLAG_MASKS else 0)
    if len(data) != expected:
        raise PayloadError(f"{stack_id}: header declares {expected} bytes, file has {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size).reshape(f, h, w).copy()
    if flags & FLAG_PROBABILITIES and (frames.min() < 0.0 or frames.max() > 1.0):
        raise ProbabilityRangeError(f"{stack_id}: probability payload outside [0, 1]")
    masks = None
    if flags & FLAG_MASKS:
        masks = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n).reshape(f, h, w).copy()
        if masks.max() > 1:
            raise PayloadError(f"{stack_id}: mask bytes must be 0 or 1")
    stack = Stack(stack_id, frames, masks, gt_label_time, split)
    stack.validate()
    return stack


def save_stack(stack: Stack, path: str | os.PathLike, probabilities: bool = False) -> None:
    """Write ``stack`` to ``path`` in the binary container format."""
    data = encode_stack(stack, probabilities=probabilities)
    Path(path).write_bytes(data)


def load_stack(
    path: str | os.PathLike,
    stack_id: str | None = None,
    split: str = "pool",
    gt_label_time: float | None = None,
) -> Stack:
    """Read a stack container. The id defaults to the file stem."""
    path = Path(path)
    return decode_stack(path.read_bytes(), stack_id or path.stem, split, gt_label_time)


def save_heatmap(heatmap: HeatmapStack, path: str | os.PathLike, probabilities: bool = True) -> None:
    save_stack(Stack(heatmap.stack_id, heatmap.maps), path, probabilities=probabilities)


def load_heatmap(path: str | os.PathLike, stack_id: str | None = None) -> HeatmapStack:
    s = load_stack(path, stack_id)
    return HeatmapStack(s.id, s.frames)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            t = "" if e.gt_label_time is None else repr(float(e.gt_label_time))
            writer.writerow([e.stack_id, e.path, e.split, t])


def read_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest CSV. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        entries = []
        for row in reader:
            t = row["gt_label_time"].strip()
            entries.append(ManifestEntry(row["stack_id"], row["path"], row["split"], float(t) if t else None))
    manifest = DatasetManifest(entries)
    if check_files:
        for e in manifest.entries:
            if not resolve_path(path, e.path).exists():
                raise ManifestError(f"{e.stack_id}: missing file {e.path}")
    return manifest


def resolve_path(manifest_path: str | os.PathLike, entry_path: str) -> Path:
    p = Path(entry_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_dataset(manifest_path: str | os.PathLike, splits: Iterable[str] | None = None) -> list[Stack]:
    """Load every stack referenced by a manifest, attaching split and time."""
    manifest = read_manifest(manifest_path)
    wanted = set(splits) if splits is not None else None
    out = []
    for e in manifest.entries:
        if wanted is not None and e.split not in wanted:
            continue
        out.append(load_stack(resolve_path(manifest_path, e.path), e.stack_id, e.split, e.gt_label_time))
    return out


def save_dataset(stacks: Sequence[Stack], directory: str | os.PathLike, manifest_name: str = "manifest.csv") -> Path:
    """Write each stack as ``<id>.alst`` plus a manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "stacks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in stacks:
        rel = f"stacks/{s.id}.alst"
        save_stack(s, directory / rel)
        entries.append(ManifestEntry(s.id, rel, s.split, s.gt_label_time))
    manifest_path = directory / manifest_name
    write_manifest(DatasetManifest(entries), manifest_path)
    return manifest_path
