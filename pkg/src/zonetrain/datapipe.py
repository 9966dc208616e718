"""Frame splits, patch normalization, augmentation and dataset assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import geometry as geo
from .errors import (DimensionMismatch, EmptyDataset, IndexOutOfRange, InsufficientFrames,
                     InvalidZone)
from .geometry import PatchGridSpec, UltrasoundFrame, ZoneSpec


@dataclass(frozen=True)
class FrameSplit:
    train_ids: dict
    val_ids: dict
    test_ids: dict
    seed: int

    def partitions(self) -> dict:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}

    def all_ids(self, part: str) -> set:
        return {i for ids in self.partitions()[part].values() for i in ids}


def split_frames(frames_per_class: Mapping[int, Union[int, Sequence]], n_per_partition: int,
                 seed: int) -> FrameSplit:
    """Draw disjoint train/val/test frame sets, ``n_per_partition`` frames per class each.

    ``frames_per_class`` maps a class to either a frame count (ids are then
    ``0..count-1``) or an explicit sequence of frame ids.
    """
    if n_per_partition < 1:
        raise InsufficientFrames(f"n_per_partition must be >= 1, got {n_per_partition}")
    rng = np.random.default_rng(seed)
    parts: dict[str, dict] = {"train": {}, "val": {}, "test": {}}
    for cls in sorted(frames_per_class):
        ids = frames_per_class[cls]
        ids = list(range(ids)) if isinstance(ids, (int, np.integer)) else list(ids)
        if 3 * n_per_partition > len(ids):
            raise InsufficientFrames(
                f"class {cls}: need {3 * n_per_partition} frames, have {len(ids)}")
        pick = rng.choice(len(ids), size=3 * n_per_partition, replace=False)
        for k, part in enumerate(("train", "val", "test")):
            sel = pick[k * n_per_partition:(k + 1) * n_per_partition]
            parts[part][cls] = tuple(ids[i] for i in sel)
    return FrameSplit(parts["train"], parts["val"], parts["test"], seed)


@dataclass(frozen=True)
class NormalizationSpec:
    mode: str = "per_patch"
    epsilon: float = 1e-8
    corpus_mean: Optional[float] = None
    corpus_std: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("per_patch", "corpus"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.mode == "corpus":
            if self.corpus_mean is None or self.corpus_std is None:
                raise ValueError("corpus mode needs corpus_mean and corpus_std")
            if not self.corpus_std > 0:
                raise ValueError("corpus_std must be positive")

    @classmethod
    def fit_corpus(cls, patches: np.ndarray, epsilon: float = 1e-8) -> "NormalizationSpec":
        """Corpus statistics; call on training patches only."""
        patches = np.asarray(patches, dtype=np.float64)
        return cls("corpus", epsilon, float(patches.mean()), float(max(patches.std(), epsilon)))


def zscore(patch: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    if spec.mode == "corpus":
        return (x - spec.corpus_mean) / spec.corpus_std
    std = x.std()
    if std < spec.epsilon:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def zscore_stack(patches: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Vectorized :func:`zscore` over the leading axis."""
    x = np.asarray(patches, dtype=np.float64)
    if spec.mode == "corpus":
        return (x - spec.corpus_mean) / spec.corpus_std
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    degenerate = std < spec.epsilon
    out = (x - mean) / np.where(degenerate, 1.0, std)
    return np.where(degenerate, 0.0, out)


def horizontal_flip(patch: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Reverse the lateral (last) axis with probability ``p``."""
    if rng.random() < p:
        return patch[..., ::-1].copy()
    return patch


def depth_channel_value(line_index: int, n_lines: int) -> float:
    if n_lines < 2:
        raise IndexOutOfRange(f"depth encoding needs at least 2 lines, got {n_lines}")
    if not 0 <= line_index < n_lines:
        raise IndexOutOfRange(f"line {line_index} outside 0..{n_lines - 1}")
    return line_index / (n_lines - 1)


def attach_depth_channel(patch: np.ndarray, line_index: int, n_lines: int) -> np.ndarray:
    """Stack ``patch`` with a constant plane holding its relative depth."""
    value = depth_channel_value(line_index, n_lines)
    patch = np.asarray(patch)
    return np.stack([patch, np.full_like(patch, value)])


@dataclass(frozen=True, eq=False)
class LabeledPatchSet:
    """Normalized patch tensors of shape (N, C, axial, lateral) plus per-patch metadata."""

    patches: np.ndarray
    labels: np.ndarray
    depths_norm: np.ndarray
    zone_names: tuple
    frame_ids: tuple
    axial_starts: np.ndarray
    extraction_mode: str

    def __post_init__(self):
        n = len(self.patches)
        if n == 0:
            raise EmptyDataset("patch set is empty")
        if self.patches.ndim != 4:
            raise DimensionMismatch(f"patches must be (N, C, H, W), got {self.patches.shape}")
        for name in ("labels", "depths_norm", "zone_names", "frame_ids", "axial_starts"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"{name} length differs from patch count {n}")
        if np.any(self.labels < 0) or np.any(self.labels > 2):
            raise ValueError("labels must lie in {0, 1, 2}")
        if not np.all(np.isfinite(self.depths_norm)):
            raise ValueError("depths_norm must be finite")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def n_channels(self) -> int:
        return self.patches.shape[1]

    def class_counts(self, n_classes: int = 3) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    def subset(self, select: np.ndarray, extraction_mode: Optional[str] = None) -> "LabeledPatchSet":
        """Rows picked by a boolean mask or by an integer index array."""
        select = np.asarray(select)
        idx = np.flatnonzero(select) if select.dtype == bool else select.astype(np.int64)
        return LabeledPatchSet(
            self.patches[idx], self.labels[idx], self.depths_norm[idx],
            tuple(self.zone_names[i] for i in idx), tuple(self.frame_ids[i] for i in idx),
            self.axial_starts[idx], extraction_mode or self.extraction_mode)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.patches).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.ascontiguousarray(self.axial_starts).tobytes())
        return h.hexdigest()[:16]


def _line_zone_tags(grid: PatchGridSpec, geometry: geo.FrameGeometry,
                    starts: Sequence[int]) -> list[str]:
    """Default zone tag per axial start (``custom`` when off the default lines)."""
    try:
        zones = geo.default_zones(grid, geometry)
    except InvalidZone:
        zones = ()
    owner = {s: z.name for z in zones for s in z.axial_starts}
    return [owner.get(s, "custom") for s in starts]


def build_dataset(frames: Sequence[UltrasoundFrame], grid: PatchGridSpec = PatchGridSpec(),
                  mode: Union[str, ZoneSpec] = "regular",
                  norm: NormalizationSpec = NormalizationSpec(), depth_aware: bool = False,
                  dtype=np.float32) -> LabeledPatchSet:
    """Cut, normalize and label patches from ``frames``.

    ``mode`` is ``"regular"`` for the full grid or a :class:`ZoneSpec`. Zone
    specs on the default lines are tagged ``zone:<name>``, others
    ``custom:<name>``. Order is frame order, then axial line, then lateral line.
    """
    frames = list(frames)
    if not frames:
        raise EmptyDataset("no frames supplied")
    if isinstance(mode, str):
        if mode != "regular":
            raise ValueError(f"unknown extraction mode {mode!r}")
        starts = geo.axial_line_starts(grid, frames[0].geometry)
        tags = _line_zone_tags(grid, frames[0].geometry, starts)
        mode_tag = "regular"
    else:
        zone = mode
        starts = list(zone.axial_starts)
        tags = [zone.name] * len(starts)
        mode_tag = ("zone:" if zone.line_indices is not None else "custom:") + zone.name
    per_frame = len(starts) * grid.n_lateral_lines
    n = len(frames) * per_frame
    channels = 2 if depth_aware else 1
    out = np.empty((n, channels, *grid.patch_shape), dtype=dtype)
    labels = np.empty(n, dtype=np.int64)
    frame_ids = []
    for f, frame in enumerate(frames):
        if frame.label is None:
            raise ValueError(f"frame {frame.frame_id} has no label")
        geo._check_frame(frame, grid)
        geo._check_starts(starts, grid, frame.geometry)
        raw = geo.cut_patches(frame.samples, starts, grid)
        sl = slice(f * per_frame, (f + 1) * per_frame)
        out[sl, 0] = zscore_stack(raw, norm)
        labels[sl] = frame.label
        frame_ids.extend([frame.frame_id] * per_frame)
    line_depths = np.array([geo.normalized_depth(s, grid) for s in starts])
    depths = np.tile(np.repeat(line_depths, grid.n_lateral_lines), len(frames))
    if depth_aware:
        out[:, 1] = depths[:, None, None]
    axial = np.tile(np.repeat(np.asarray(starts, dtype=np.int64), grid.n_lateral_lines), len(frames))
    zone_names = tuple(np.tile(np.repeat(np.array(tags, dtype=object), grid.n_lateral_lines),
                               len(frames)))
    return LabeledPatchSet(out, labels, depths, zone_names, tuple(frame_ids), axial, mode_tag)


def fit_corpus_from_frames(frames: Sequence[UltrasoundFrame], grid: PatchGridSpec,
                           epsilon: float = 1e-8) -> NormalizationSpec:
    """Corpus statistics over the regular-grid patches of ``frames`` (training frames only)."""
    starts = geo.axial_line_starts(grid, frames[0].geometry)
    raw = np.concatenate([geo.cut_patches(f.samples, starts, grid) for f in frames])
    return NormalizationSpec.fit_corpus(raw, epsilon)


def concat(sets: Sequence[LabeledPatchSet], extraction_mode: str) -> LabeledPatchSet:
    return LabeledPatchSet(
        np.concatenate([s.patches for s in sets]), np.concatenate([s.labels for s in sets]),
        np.concatenate([s.depths_norm for s in sets]),
        tuple(z for s in sets for z in s.zone_names), tuple(f for s in sets for f in s.frame_ids),
        np.concatenate([s.axial_starts for s in sets]), extraction_mode)


def frames_for(frames: Sequence[UltrasoundFrame], ids_by_class: Mapping) -> list[UltrasoundFrame]:
    """Pick frames whose ids appear in a split partition, class-major in split order."""
    by_id = {f.frame_id: f for f in frames}
    return [by_id[i] for cls in sorted(ids_by_class) for i in ids_by_class[cls]]
