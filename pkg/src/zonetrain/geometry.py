"""Frame geometry, patch grids and depth zones.

Everything here is a pure function of immutable inputs. Pixel offsets are
axial (rows) first, lateral (columns) second; depths are in centimetres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, GridOverflow, IndexOutOfRange, InvalidZone

DEFAULT_ZONE_NAMES = ("pre_focal", "on_focus", "post_focal")


@dataclass(frozen=True)
class FrameGeometry:
    axial_pixels: int = 2080
    lateral_pixels: int = 256
    depth_cm: float = 4.0
    sampling_rate_hz: float = 40e6
    focus_depth_cm: float = 2.0

    def __post_init__(self):
        if self.axial_pixels < 1 or self.lateral_pixels < 1:
            raise DimensionMismatch("frame must have at least one pixel per axis")
        if not (self.depth_cm > 0 and math.isfinite(self.depth_cm)):
            raise DimensionMismatch(f"depth_cm must be positive, got {self.depth_cm}")

    @property
    def pixels_per_cm(self) -> float:
        return self.axial_pixels / self.depth_cm

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axial_pixels, self.lateral_pixels)


@dataclass(frozen=True)
class PatchGridSpec:
    patch_axial_px: int = 200
    patch_lateral_px: int = 26
    axial_skip_px: int = 540
    axial_stride_px: int = 100
    lateral_stride_px: int = 26
    n_axial_lines: int = 9
    n_lateral_lines: int = 9

    @property
    def patch_shape(self) -> tuple[int, int]:
        return (self.patch_axial_px, self.patch_lateral_px)

    def validate(self, geometry: FrameGeometry) -> None:
        if min(self.patch_axial_px, self.patch_lateral_px, self.axial_stride_px,
               self.lateral_stride_px, self.n_axial_lines, self.n_lateral_lines) < 1:
            raise DimensionMismatch(f"grid sizes must be positive: {self}")
        if self.axial_skip_px < 0:
            raise GridOverflow(f"negative axial skip {self.axial_skip_px}")
        axial_end = (self.axial_skip_px + (self.n_axial_lines - 1) * self.axial_stride_px
                     + self.patch_axial_px)
        if axial_end > geometry.axial_pixels:
            raise GridOverflow(
                f"last axial patch ends at {axial_end} px, frame has {geometry.axial_pixels}")
        lateral_end = (self.n_lateral_lines - 1) * self.lateral_stride_px + self.patch_lateral_px
        if lateral_end > geometry.lateral_pixels:
            raise GridOverflow(
                f"last lateral patch ends at {lateral_end} px, frame has {geometry.lateral_pixels}")


@dataclass(frozen=True, eq=False)
class UltrasoundFrame:
    geometry: FrameGeometry
    samples: np.ndarray
    frame_id: str
    label: Optional[int] = None

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape != self.geometry.shape:
            raise DimensionMismatch(
                f"frame {self.frame_id}: samples {self.samples.shape} != geometry {self.geometry.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DimensionMismatch(f"frame {self.frame_id} contains non-finite samples")


@dataclass(frozen=True)
class ZoneSpec:
    """A contiguous band of axial patch lines.

    ``axial_starts`` is authoritative; ``line_indices`` is set only when the
    band lies on the default grid lines. ``requested_center_cm`` records what
    a sweep asked for, so the snapping error stays visible downstream.
    """

    name: str
    axial_starts: tuple[int, ...]
    center_depth_cm: float
    line_indices: Optional[tuple[int, ...]] = None
    requested_center_cm: Optional[float] = None

    @property
    def n_lines(self) -> int:
        return len(self.axial_starts)

    @property
    def center_error_cm(self) -> float:
        if self.requested_center_cm is None:
            return 0.0
        return self.center_depth_cm - self.requested_center_cm


@dataclass(frozen=True, eq=False)
class Patch:
    values: np.ndarray
    axial_start_px: int
    lateral_start_px: int
    center_depth_cm: float
    source_frame_id: str
    label: Optional[int] = None


def axial_line_starts(grid: PatchGridSpec, geometry: FrameGeometry = FrameGeometry()) -> list[int]:
    grid.validate(geometry)
    return [grid.axial_skip_px + i * grid.axial_stride_px for i in range(grid.n_axial_lines)]


def lateral_line_starts(grid: PatchGridSpec) -> list[int]:
    return [j * grid.lateral_stride_px for j in range(grid.n_lateral_lines)]


def center_depth_cm(axial_start_px: float, grid: PatchGridSpec, geometry: FrameGeometry) -> float:
    return (axial_start_px + grid.patch_axial_px / 2) / geometry.pixels_per_cm


def depth_cm_of_line(grid: PatchGridSpec, geometry: FrameGeometry, line_index: int) -> float:
    if not 0 <= line_index < grid.n_axial_lines:
        raise IndexOutOfRange(f"line {line_index} outside 0..{grid.n_axial_lines - 1}")
    start = grid.axial_skip_px + line_index * grid.axial_stride_px
    return center_depth_cm(start, grid, geometry)


def _middle_center(starts: Sequence[int], grid: PatchGridSpec, geometry: FrameGeometry) -> float:
    # even-width bands take the midpoint of the two middle lines
    mid = (starts[(len(starts) - 1) // 2] + starts[len(starts) // 2]) / 2
    return center_depth_cm(mid, grid, geometry)


def zone_from_lines(name: str, line_indices: Sequence[int], grid: PatchGridSpec,
                    geometry: FrameGeometry = FrameGeometry()) -> ZoneSpec:
    lines = tuple(int(i) for i in line_indices)
    if not lines:
        raise InvalidZone(f"zone {name!r} has no lines")
    if any(i < 0 or i >= grid.n_axial_lines for i in lines):
        raise InvalidZone(f"zone {name!r} lines {lines} outside 0..{grid.n_axial_lines - 1}")
    if any(b - a != 1 for a, b in zip(lines, lines[1:])):
        raise InvalidZone(f"zone {name!r} lines {lines} are not consecutive")
    starts = axial_line_starts(grid, geometry)
    zstarts = tuple(starts[i] for i in lines)
    return ZoneSpec(name, zstarts, _middle_center(zstarts, grid, geometry), line_indices=lines)


def default_zones(grid: PatchGridSpec = PatchGridSpec(),
                  geometry: FrameGeometry = FrameGeometry()) -> tuple[ZoneSpec, ZoneSpec, ZoneSpec]:
    """Pre-focal, on-focus and post-focal thirds of the axial lines."""
    n = grid.n_axial_lines
    if n % 3:
        raise InvalidZone(f"default zones need a multiple of 3 axial lines, got {n}")
    k = n // 3
    return tuple(zone_from_lines(name, range(i * k, (i + 1) * k), grid, geometry)
                 for i, name in enumerate(DEFAULT_ZONE_NAMES))


def zone_for_center(center_cm: float, width_lines: int, grid: PatchGridSpec = PatchGridSpec(),
                    geometry: FrameGeometry = FrameGeometry(), name: str = "custom",
                    snap: str = "pixel") -> ZoneSpec:
    """Build a band of ``width_lines`` lines whose middle line is centred near ``center_cm``.

    ``snap="pixel"`` places the middle line at the nearest whole pixel;
    ``snap="lattice"`` rounds it onto the default stride lattice (extended
    beyond the default lines in both directions). Neighbouring lines always
    sit one axial stride apart.
    """
    if width_lines < 1 or width_lines % 2 == 0:
        raise InvalidZone(f"width_lines must be odd and positive, got {width_lines}")
    mid = center_cm * geometry.pixels_per_cm - grid.patch_axial_px / 2
    if snap == "pixel":
        mid_start = int(round(mid))
    elif snap == "lattice":
        k = round((mid - grid.axial_skip_px) / grid.axial_stride_px)
        mid_start = grid.axial_skip_px + k * grid.axial_stride_px
    else:
        raise ValueError(f"unknown snap mode {snap!r}")
    half = width_lines // 2
    starts = tuple(mid_start + (i - half) * grid.axial_stride_px for i in range(width_lines))
    if starts[0] < 0 or starts[-1] + grid.patch_axial_px > geometry.axial_pixels:
        raise GridOverflow(
            f"zone centred at {center_cm} cm spans pixels {starts[0]}..{starts[-1] + grid.patch_axial_px}"
            f" outside 0..{geometry.axial_pixels}")
    lines = None
    offs = [s - grid.axial_skip_px for s in starts]
    if all(o % grid.axial_stride_px == 0 and 0 <= o // grid.axial_stride_px < grid.n_axial_lines
           for o in offs):
        lines = tuple(o // grid.axial_stride_px for o in offs)
    return ZoneSpec(name, starts, _middle_center(starts, grid, geometry), line_indices=lines,
                    requested_center_cm=float(center_cm))


def _check_frame(frame: UltrasoundFrame, grid: PatchGridSpec) -> None:
    if frame.samples.shape != frame.geometry.shape:
        raise DimensionMismatch(f"frame {frame.frame_id} does not match its geometry")
    grid.validate(frame.geometry)


def _check_starts(starts: Sequence[int], grid: PatchGridSpec, geometry: FrameGeometry) -> None:
    for s in starts:
        if s < 0 or s + grid.patch_axial_px > geometry.axial_pixels:
            raise GridOverflow(f"axial start {s} puts the patch outside the frame")


def cut_patches(samples: np.ndarray, axial_starts: Sequence[int], grid: PatchGridSpec) -> np.ndarray:
    """Stack of patches, axial-major, shape (n_axial*n_lateral, patch_axial, patch_lateral).

    Returns a copy, never a view into ``samples``.
    """
    pa, pl = grid.patch_shape
    out = np.empty((len(axial_starts) * grid.n_lateral_lines, pa, pl), dtype=samples.dtype)
    k = 0
    for a in axial_starts:
        for l in lateral_line_starts(grid):
            out[k] = samples[a:a + pa, l:l + pl]
            k += 1
    return out


def _patches(frame: UltrasoundFrame, starts: Sequence[int], grid: PatchGridSpec) -> list[Patch]:
    values = cut_patches(frame.samples, starts, grid)
    out = []
    k = 0
    for a in starts:
        depth = center_depth_cm(a, grid, frame.geometry)
        for l in lateral_line_starts(grid):
            out.append(Patch(values[k], a, l, depth, frame.frame_id, frame.label))
            k += 1
    return out


def extract_regular_grid(frame: UltrasoundFrame, grid: PatchGridSpec = PatchGridSpec()) -> list[Patch]:
    _check_frame(frame, grid)
    return _patches(frame, axial_line_starts(grid, frame.geometry), grid)


def extract_zone(frame: UltrasoundFrame, grid: PatchGridSpec, zone: ZoneSpec) -> list[Patch]:
    _check_frame(frame, grid)
    if not zone.axial_starts:
        raise InvalidZone(f"zone {zone.name!r} has no lines")
    if zone.line_indices is not None:
        zone_from_lines(zone.name, zone.line_indices, grid, frame.geometry)
    _check_starts(zone.axial_starts, grid, frame.geometry)
    return _patches(frame, zone.axial_starts, grid)


def zone_coverage_cm(zone: ZoneSpec, grid: PatchGridSpec, geometry: FrameGeometry) -> tuple[float, float]:
    """Half-open depth interval owned by a zone: half a stride beyond its outer line centres."""
    half = grid.axial_stride_px / 2
    lo = center_depth_cm(zone.axial_starts[0] - half, grid, geometry)
    hi = center_depth_cm(zone.axial_starts[-1] + half, grid, geometry)
    return lo, hi


def normalized_depth(axial_start_px: float, grid: PatchGridSpec) -> float:
    """Relative depth on the default lines: 0 at the first line, 1 at the last.

    Starts outside the default lines extrapolate linearly (values may leave [0, 1]).
    """
    if grid.n_axial_lines < 2:
        return 0.0
    span = (grid.n_axial_lines - 1) * grid.axial_stride_px
    return (axial_start_px - grid.axial_skip_px) / span
