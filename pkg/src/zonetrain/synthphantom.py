"""Synthetic RF frames with class-dependent texture and depth-dependent diffraction.

This is a statistical texture model, not an acoustic simulation. Each frame is
built as

    sparse scatterer field
    -> axial pulse whose length grows with depth (class sets the pulse length at focus)
    -> lateral Gaussian blur, narrowest at the focus, widening faster pre-focally
    -> depth gain and additive noise

Depth-varying filters are applied by filtering the whole field with a few
fixed kernels and blending rows linearly between them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import convolve1d, gaussian_filter1d

from .geometry import FrameGeometry, PatchGridSpec, UltrasoundFrame
from .seeding import derive_seed


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    scatterer_density: float  # scatterers per cm^2
    amplitude_scale: float
    texture_bandwidth: float  # axial pulse envelope sigma at the focus, pixels

    def __post_init__(self):
        if self.scatterer_density <= 0:
            raise ValueError("scatterer_density must be positive")
        if self.texture_bandwidth < 1:
            raise ValueError("texture_bandwidth must be >= 1 pixel")


@dataclass(frozen=True)
class DiffractionProfile:
    focus_depth_cm: float = 2.0
    lateral_blur_at_focus_px: float = 0.8
    pre_focal_growth: float = 3.0  # lateral blur px per cm shallower than focus
    post_focal_growth: float = 1.5  # lateral blur px per cm deeper than focus
    pulse_stretch_per_cm: float = 0.3  # relative axial pulse lengthening per cm of depth
    carrier_period: float = 2.2  # carrier period in units of envelope sigma
    attenuation_per_cm: float = 0.5  # amplitude decay, nepers per cm
    noise_level: float = 0.02  # additive noise std relative to focal signal std
    lateral_extent_cm: float = 3.8
    n_depth_bins: int = 12

    def __post_init__(self):
        if self.pre_focal_growth < self.post_focal_growth:
            raise ValueError("pre-focal blur growth must not be smaller than post-focal growth")
        if self.lateral_blur_at_focus_px < 0:
            raise ValueError("lateral blur must be non-negative")

    def lateral_blur_px(self, depth_cm):
        d = np.asarray(depth_cm, dtype=float)
        return (self.lateral_blur_at_focus_px
                + self.pre_focal_growth * np.maximum(0.0, self.focus_depth_cm - d)
                + self.post_focal_growth * np.maximum(0.0, d - self.focus_depth_cm))

    def pulse_scale(self, depth_cm):
        d = np.asarray(depth_cm, dtype=float)
        return np.maximum(0.2, 1.0 + self.pulse_stretch_per_cm * (d - self.focus_depth_cm))

    def gain(self, depth_cm):
        return np.exp(-self.attenuation_per_cm * np.asarray(depth_cm, dtype=float))


# Three classes that differ in pulse length (spectrum) and scatterer density.
DEFAULT_PROFILES = (
    ClassProfile(0, scatterer_density=1500.0, amplitude_scale=1.0, texture_bandwidth=2.0),
    ClassProfile(1, scatterer_density=6000.0, amplitude_scale=0.8, texture_bandwidth=2.4),
    ClassProfile(2, scatterer_density=3500.0, amplitude_scale=0.6, texture_bandwidth=2.9),
)


def _pulse(sigma: float, carrier_period: float) -> np.ndarray:
    half = int(np.ceil(4 * sigma))
    t = np.arange(-half, half + 1, dtype=float)
    return np.exp(-0.5 * (t / sigma) ** 2) * np.cos(2 * np.pi * t / (carrier_period * sigma))


def _blend_rows(field_fn, values: np.ndarray, n_bins: int) -> np.ndarray:
    """Apply ``field_fn(v)`` at ``n_bins`` sample values and interpolate per row.

    ``values`` holds the desired parameter for each row.
    """
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return field_fn(lo)
    knots = np.linspace(lo, hi, n_bins)
    pos = np.interp(values, knots, np.arange(n_bins))
    i0 = np.clip(np.floor(pos).astype(int), 0, n_bins - 2)
    frac = (pos - i0)[:, None]
    out = None
    for b in range(n_bins):
        rows = (i0 == b) | (i0 + 1 == b)
        if not rows.any():
            continue
        filt = field_fn(knots[b])
        w = np.where((i0 == b)[:, None], 1.0 - frac, 0.0) + np.where((i0 + 1 == b)[:, None], frac, 0.0)
        out = filt * w if out is None else out + filt * w
    return out


def generate_frame(class_id: int, profiles: Sequence[ClassProfile] = DEFAULT_PROFILES,
                   geometry: FrameGeometry = FrameGeometry(), seed: int = 0,
                   diffraction: DiffractionProfile = DiffractionProfile(),
                   frame_id: str | None = None) -> UltrasoundFrame:
    prof = {p.class_id: p for p in profiles}[class_id]
    rng = np.random.default_rng(seed)
    shape = geometry.shape
    px_area = (1.0 / geometry.pixels_per_cm) * (diffraction.lateral_extent_cm / geometry.lateral_pixels)
    p_occupied = min(1.0, prof.scatterer_density * px_area)
    field = (rng.random(shape) < p_occupied) * rng.standard_normal(shape)
    # faint diffuse background so no patch is ever exactly constant
    field += 0.05 * rng.standard_normal(shape)

    depth = (np.arange(geometry.axial_pixels) + 0.5) / geometry.pixels_per_cm
    sigma_rows = prof.texture_bandwidth * diffraction.pulse_scale(depth)
    rf = _blend_rows(
        lambda s: convolve1d(field, _pulse(s, diffraction.carrier_period), axis=0, mode="constant"),
        sigma_rows, diffraction.n_depth_bins)
    blur_rows = diffraction.lateral_blur_px(depth)
    rf = _blend_rows(
        lambda b: gaussian_filter1d(rf, b, axis=1, mode="reflect") if b > 0 else rf,
        blur_rows, diffraction.n_depth_bins)

    focal = rf[np.abs(depth - diffraction.focus_depth_cm) < 0.25]
    ref = float(focal.std()) if focal.size else float(rf.std())
    rf = rf * (prof.amplitude_scale * diffraction.gain(depth))[:, None]
    rf = rf + diffraction.noise_level * ref * prof.amplitude_scale * rng.standard_normal(shape)
    return UltrasoundFrame(geometry, rf.astype(np.float32),
                           frame_id if frame_id is not None else f"c{class_id}-s{seed}", class_id)


def frame_seed(seed: int, class_id: int, index: int) -> int:
    return derive_seed(seed, "frame", class_id, index)


def generate_dataset(n_frames_per_class: int, profiles: Sequence[ClassProfile] = DEFAULT_PROFILES,
                     geometry: FrameGeometry = FrameGeometry(), seed: int = 0,
                     diffraction: DiffractionProfile = DiffractionProfile()) -> list[UltrasoundFrame]:
    """``3 * n`` labelled frames, class-major; frame ids are ``c<class>-<index>``."""
    if n_frames_per_class < 1:
        raise ValueError("n_frames_per_class must be >= 1")
    frames = []
    for p in sorted(profiles, key=lambda p: p.class_id):
        for i in range(n_frames_per_class):
            frames.append(generate_frame(p.class_id, profiles, geometry, frame_seed(seed, p.class_id, i),
                                         diffraction, frame_id=f"c{p.class_id}-{i:04d}"))
    return frames


def small_geometry() -> tuple[FrameGeometry, PatchGridSpec]:
    """Half-resolution desk geometry: same 4 cm depth, 2 cm focus and 9 axial lines.

    Axial pixel constants are halved (260 px/cm), lateral keeps 26-px patches
    on a 128-column frame, which leaves room for 4 lateral lines.
    """
    geometry = FrameGeometry(axial_pixels=1040, lateral_pixels=128, depth_cm=4.0,
                             sampling_rate_hz=20e6, focus_depth_cm=2.0)
    grid = PatchGridSpec(patch_axial_px=100, patch_lateral_px=26, axial_skip_px=270,
                         axial_stride_px=50, lateral_stride_px=26, n_axial_lines=9, n_lateral_lines=4)
    return geometry, grid
