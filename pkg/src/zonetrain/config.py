"""Run configuration: schema, validation and resolution into concrete objects.

A config is a JSON or YAML mapping. Every key is optional; omitted keys fall
back to the selected ``profile`` (``paper`` or ``desk``)::

    profile: paper                # paper | desk
    strategy: zone                # regular | zone | depth_aware
    n_train_images: 10            # frames per class in each of train/val/test
    seed: 0
    n_repetitions: 10
    normalization: per_patch      # per_patch | corpus
    checkpoint: last              # last | best_val
    validate: false               # track validation accuracy every epoch
    workers: 1
    output_dir: runs/example
    hyperparams: {epochs: 150, learning_rate: 3.0e-4, batch_size: 128}
    network: {width_scale: 0.0625, dropout_p: 0.5, init_scheme: he}   # init_std for alexnet
    geometry: {axial_pixels: 1040, lateral_pixels: 128, depth_cm: 4.0, ...}
    grid: {patch_axial_px: 100, axial_skip_px: 270, ...}
    zones:                        # default: pre_focal / on_focus / post_focal thirds
      - {name: pre_focal, lines: [0, 1, 2]}
      - {name: deep, center_cm: 2.8, width: 3}
    data:
      source: synthetic           # synthetic | container
      frames_per_class: 30        # synthetic only; default 3 * n_train_images
      seed: 0                     # synthetic only
      path: frames.ztrf           # container only
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from . import geometry as geo
from .datapipe import NormalizationSpec
from .desk import DESK, DESK_SCHEDULE
from .geometry import FrameGeometry, PatchGridSpec, ZoneSpec
from .model import NetworkConfig, shape_trace
from .trainer import PAPER_SCHEDULE, STRATEGIES, HyperParams, hyperparams_for


class ConfigError(ValueError):
    pass


TOP_KEYS = {"profile", "strategy", "n_train_images", "seed", "n_repetitions", "normalization",
            "checkpoint", "validate", "workers", "output_dir", "hyperparams", "network", "geometry",
            "grid", "zones", "data"}


@dataclass
class RunConfig:
    profile: str = "paper"
    strategy: str = "zone"
    n_train_images: int = 10
    seed: int = 0
    n_repetitions: int = 10
    normalization: str = "per_patch"
    checkpoint: str = "last"
    validate: bool = False
    workers: int = 1
    output_dir: str = "runs/latest"
    hyperparams: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    zones: list = field(default_factory=list)
    data: dict = field(default_factory=lambda: {"source": "synthetic"})

    # ---------------------------------------------------------------- loading

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate_all()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            raw = yaml.safe_load(text) or {}
        else:
            raw = json.loads(text)
        return cls.from_mapping(raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply CLI flags (``None`` means not given). Dotted keys reach into blocks."""
        d = json.loads(json.dumps(self.to_dict()))
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                block, sub = key.split(".", 1)
                d.setdefault(block, {})[sub] = value
            else:
                d[key] = value
        return RunConfig.from_mapping(d)

    # ---------------------------------------------------------------- validation

    def validate_all(self) -> None:
        """Check every block; raises :class:`ConfigError` before any work starts."""
        if self.profile not in ("paper", "desk"):
            raise ConfigError(f"profile must be paper or desk, got {self.profile!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for key in ("n_train_images", "n_repetitions", "workers"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.normalization not in ("per_patch", "corpus"):
            raise ConfigError(f"normalization must be per_patch or corpus, got {self.normalization!r}")
        if self.checkpoint not in ("last", "best_val"):
            raise ConfigError(f"checkpoint must be last or best_val, got {self.checkpoint!r}")
        for block, allowed in (("hyperparams", {"epochs", "learning_rate", "batch_size"}),
                               ("network", {"width_scale", "dropout_p", "init_scheme", "init_std"}),
                               ("geometry", {f.name for f in fields(FrameGeometry)}),
                               ("grid", {f.name for f in fields(PatchGridSpec)})):
            value = getattr(self, block)
            if not isinstance(value, dict):
                raise ConfigError(f"{block} must be a mapping")
            unknown = set(value) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in {block}: {sorted(unknown)}")
        self._validate_data()
        try:
            geometry, grid = self.frame_geometry(), self.patch_grid()
            grid.validate(geometry)
            self.zone_specs()
            shape_trace(self.network_config())
            self.resolved_hyperparams()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{type(exc).__name__}: {exc}") from exc

    def _validate_data(self) -> None:
        d = self.data
        if not isinstance(d, dict) or d.get("source") not in ("synthetic", "container"):
            raise ConfigError("data.source must be synthetic or container")
        if d["source"] == "container":
            path = d.get("path")
            if not path or not Path(path).exists():
                raise ConfigError(f"data.path {path!r} does not exist")
            unknown = set(d) - {"source", "path"}
        else:
            fpc = d.get("frames_per_class", 3 * self.n_train_images)
            if not isinstance(fpc, int) or fpc < 3 * self.n_train_images:
                raise ConfigError(
                    f"data.frames_per_class {fpc!r} must be an integer >= 3 * n_train_images")
            unknown = set(d) - {"source", "frames_per_class", "seed"}
        if unknown:
            raise ConfigError(f"unknown keys in data: {sorted(unknown)}")

    # ---------------------------------------------------------------- resolution

    def frame_geometry(self) -> FrameGeometry:
        base = DESK.geometry if self.profile == "desk" else FrameGeometry()
        return replace(base, **self.geometry)

    def patch_grid(self) -> PatchGridSpec:
        base = DESK.grid if self.profile == "desk" else PatchGridSpec()
        return replace(base, **self.grid)

    def zone_specs(self) -> tuple[ZoneSpec, ...]:
        geometry, grid = self.frame_geometry(), self.patch_grid()
        if not self.zones:
            return geo.default_zones(grid, geometry)
        out = []
        for z in self.zones:
            if not isinstance(z, dict) or "name" not in z:
                raise ConfigError(f"zone entries need a name: {z!r}")
            if "lines" in z:
                out.append(geo.zone_from_lines(z["name"], z["lines"], grid, geometry))
            elif "center_cm" in z:
                out.append(geo.zone_for_center(z["center_cm"], z.get("width", 3), grid, geometry,
                                               name=z["name"], snap=z.get("snap", "pixel")))
            else:
                raise ConfigError(f"zone {z['name']!r} needs lines or center_cm")
        names = [z.name for z in out]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate zone names {names}")
        return tuple(out)

    def network_config(self, input_channels: Optional[int] = None) -> NetworkConfig:
        if input_channels is None:
            input_channels = 2 if self.strategy == "depth_aware" else 1
        desk = self.profile == "desk"
        scale = self.network.get("width_scale", DESK.width_scale if desk else 1.0)
        scheme = self.network.get("init_scheme", DESK.init_scheme if desk else "alexnet")
        return NetworkConfig(input_channels=input_channels, input_shape=self.patch_grid().patch_shape,
                             dropout_p=self.network.get("dropout_p", 0.5), width_scale=scale,
                             init_scheme=scheme, init_std=self.network.get("init_std"))

    def resolved_hyperparams(self) -> HyperParams:
        hp = self.hyperparams
        schedule = DESK_SCHEDULE if self.profile == "desk" else PAPER_SCHEDULE
        return hyperparams_for(self.n_train_images, hp.get("epochs"), hp.get("learning_rate"),
                               hp.get("batch_size", 128), schedule=schedule)

    def norm_spec(self) -> NormalizationSpec:
        # corpus statistics are fitted on training frames at run time
        return NormalizationSpec()

    def frames_per_class(self) -> int:
        return self.data.get("frames_per_class", 3 * self.n_train_images)
