"""Confusion matrices, repeated seeded experiments and the zone sweeps."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import datapipe as dp
from . import geometry as geo
from .datapipe import LabeledPatchSet, NormalizationSpec
from .errors import ChannelMismatch, GridOverflow, InsufficientFrames, UncoveredDepth
from .geometry import FrameGeometry, PatchGridSpec, UltrasoundFrame, ZoneSpec
from .model import NetworkConfig, ZoneNet
from .seeding import derive_seed
from .trainer import HyperParams, StrategyConfig, TrainedBundle, run_jobs, train

log = logging.getLogger(__name__)

ZONE_ROWS = geo.DEFAULT_ZONE_NAMES
DEFAULT_ROWS = (*ZONE_ROWS, "regular", "depth_aware")
DISPATCH_ROW = "zone_dispatch"
FULL_COLUMN = "full"


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows true class, columns predicted class

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion counts must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        if c.sum() <= 0:
            raise ValueError("confusion matrix is empty")

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int = 3) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(counts)

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.n_samples

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def predict(model: ZoneNet, data: LabeledPatchSet, batch: int = 1024) -> np.ndarray:
    """Eval-mode argmax; ties go to the lowest class index."""
    if data.n_channels != model.config.input_channels:
        raise ChannelMismatch(
            f"model takes {model.config.input_channels} channels, patches have {data.n_channels}")
    model.eval()
    out = np.empty(len(data), dtype=np.int64)
    with torch.no_grad():
        for i in range(0, len(data), batch):
            logits = model(torch.from_numpy(data.patches[i:i + batch])).numpy()
            out[i:i + batch] = np.argmax(logits, axis=1)
    return out


def evaluate(model: ZoneNet, data: LabeledPatchSet) -> ConfusionMatrix:
    return ConfusionMatrix.from_predictions(data.labels, predict(model, data), model.config.n_classes)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (ddof=0)."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


# ------------------------------------------------------------------ dispatch

def zone_dispatch(depth_cm: float, zones: Sequence[ZoneSpec], grid: PatchGridSpec = PatchGridSpec(),
                  geometry: FrameGeometry = FrameGeometry()) -> str:
    """Name of the zone whose half-open depth interval contains ``depth_cm``."""
    for z in zones:
        lo, hi = geo.zone_coverage_cm(z, grid, geometry)
        if lo <= depth_cm < hi:
            return z.name
    raise UncoveredDepth(f"no zone covers {depth_cm:.4f} cm")


def evaluate_dispatched(bundle: TrainedBundle, data: LabeledPatchSet, zones: Sequence[ZoneSpec],
                        grid: PatchGridSpec, geometry: FrameGeometry) -> ConfusionMatrix:
    """Route every patch to the expert owning its depth and pool the predictions."""
    depths = np.array([geo.center_depth_cm(s, grid, geometry) for s in data.axial_starts])
    owner = np.array([zone_dispatch(d, zones, grid, geometry) for d in depths])
    pred = np.empty(len(data), dtype=np.int64)
    for name in np.unique(owner):
        mask = owner == name
        pred[mask] = predict(bundle.models[name], data.subset(mask))
    return ConfusionMatrix.from_predictions(data.labels, pred)


# ------------------------------------------------------------------ experiments

@dataclass(frozen=True)
class CellStat:
    mean: float
    std: float
    accuracies: tuple

    @classmethod
    def of(cls, accuracies: Sequence[float]) -> "CellStat":
        m, s = mean_std(accuracies)
        return cls(m, s, tuple(float(a) for a in accuracies))


@dataclass
class ExperimentResult:
    cells: dict  # (row, column) -> CellStat
    n_repetitions: int
    metadata: dict = field(default_factory=dict)
    confusions: dict = field(default_factory=dict)  # (row, column) -> [ConfusionMatrix per rep]

    @property
    def rows(self) -> list:
        return list(dict.fromkeys(r for r, _ in self.cells))

    @property
    def columns(self) -> list:
        return list(dict.fromkeys(c for _, c in self.cells))

    def check_consistency(self, tol: float = 1e-12) -> float:
        """Largest disagreement between stored stats and a recomputation from raw data."""
        worst = 0.0
        for key, cell in self.cells.items():
            if len(cell.accuracies) != self.n_repetitions:
                raise ValueError(f"cell {key} holds {len(cell.accuracies)} runs, expected {self.n_repetitions}")
            m, s = mean_std(cell.accuracies)
            worst = max(worst, abs(m - cell.mean), abs(s - cell.std))
            for acc, cm in zip(cell.accuracies, self.confusions.get(key, [])):
                worst = max(worst, abs(acc - cm.accuracy))
        if worst > tol:
            raise AssertionError(f"aggregation drift {worst:g} exceeds {tol:g}")
        return worst


@dataclass
class ExperimentPlan:
    """Everything one repetition needs, minus the seed."""

    frames: Sequence[UltrasoundFrame]
    n_train_images: int
    hyperparams: HyperParams
    grid: PatchGridSpec = PatchGridSpec()
    network: NetworkConfig = NetworkConfig()
    norm: Union[NormalizationSpec, str] = NormalizationSpec()  # or "corpus": fit per split
    zones: Optional[Sequence[ZoneSpec]] = None
    rows: Sequence[str] = DEFAULT_ROWS
    test_zones: Optional[Sequence[str]] = None
    full_fov: bool = False
    validate: bool = False
    checkpoint: str = "last"

    def __post_init__(self):
        if self.zones is None:
            self.zones = geo.default_zones(self.grid, self.geometry)
        if self.test_zones is None:
            self.test_zones = tuple(z.name for z in self.zones)
        known = {z.name for z in self.zones} | {"regular", "depth_aware", DISPATCH_ROW}
        unknown = [r for r in self.rows if r not in known]
        if unknown or not self.rows:
            raise ValueError(f"unknown or empty rows {unknown or list(self.rows)}; choose from {sorted(known)}")

    @property
    def geometry(self) -> FrameGeometry:
        return self.frames[0].geometry

    def zone(self, name: str) -> ZoneSpec:
        return next(z for z in self.zones if z.name == name)

    def describe(self) -> dict:
        return {
            "n_train_images": self.n_train_images,
            "hyperparams": {k: (list(v) if isinstance(v, tuple) else v)
                            for k, v in vars(self.hyperparams).items()},
            "grid": vars(self.grid),
            "geometry": vars(self.geometry),
            "network": self.network.to_dict(),
            "norm": self.norm if isinstance(self.norm, str) else vars(self.norm),
            "zones": [{"name": z.name, "axial_starts": list(z.axial_starts)} for z in self.zones],
            "rows": list(self.rows),
            "test_zones": list(self.test_zones),
            "full_fov": self.full_fov,
            "checkpoint": self.checkpoint,
            "n_frames": len(self.frames),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _frames_per_class(frames: Sequence[UltrasoundFrame]) -> dict:
    out: dict = {}
    for f in frames:
        out.setdefault(f.label, []).append(f.frame_id)
    return out


def split_plan(plan: ExperimentPlan, root_seed: int) -> dp.FrameSplit:
    return dp.split_frames(_frames_per_class(plan.frames), plan.n_train_images,
                           derive_seed(root_seed, "split"))


class _Sets:
    """Lazily built, memoized patch sets for one partition."""

    def __init__(self, plan: ExperimentPlan, frames: Sequence[UltrasoundFrame], norm: NormalizationSpec):
        self.plan, self.frames, self.norm, self._cache = plan, frames, norm, {}

    def get(self, mode, depth_aware: bool = False) -> LabeledPatchSet:
        key = (mode if isinstance(mode, str) else (mode.name, mode.axial_starts), depth_aware)
        if key not in self._cache:
            self._cache[key] = dp.build_dataset(self.frames, self.plan.grid, mode, self.norm, depth_aware)
        return self._cache[key]


def resolve_norm(norm, train_frames: Sequence[UltrasoundFrame], grid: PatchGridSpec) -> NormalizationSpec:
    """``"corpus"`` becomes a spec fitted on the training frames' regular-grid patches."""
    if norm == "corpus":
        return dp.fit_corpus_from_frames(train_frames, grid)
    return norm


def _partition_sets(plan: ExperimentPlan, split: dp.FrameSplit) -> tuple[_Sets, Optional[_Sets], _Sets]:
    train_frames = dp.frames_for(plan.frames, split.train_ids)
    test_frames = dp.frames_for(plan.frames, split.test_ids)
    norm = resolve_norm(plan.norm, train_frames, plan.grid)
    val = _Sets(plan, dp.frames_for(plan.frames, split.val_ids), norm) if plan.validate else None
    return _Sets(plan, train_frames, norm), val, _Sets(plan, test_frames, norm)


def train_strategy(plan: ExperimentPlan, strategy: str, train_sets: _Sets, val_sets: Optional[_Sets],
                   root_seed: int) -> TrainedBundle:
    depth_aware = strategy == "depth_aware"
    if strategy == "zone":
        # the dispatch row routes patches to every zone model, so it needs them all
        zones = [z for z in plan.zones if z.name in plan.rows or DISPATCH_ROW in plan.rows]
        cfg = StrategyConfig("zone", {z.name: train_sets.get(z) for z in zones},
                             {z.name: val_sets.get(z) for z in zones} if val_sets else None, zones)
    else:
        cfg = StrategyConfig(strategy, {"all": train_sets.get("regular", depth_aware)},
                             {"all": val_sets.get("regular", depth_aware)} if val_sets else None)
    return train(cfg, plan.hyperparams, root_seed, plan.network, plan.checkpoint)


def run_repetition(plan: ExperimentPlan, root_seed: int) -> dict:
    """One split + train + test pass. Returns ``{(row, column): ConfusionMatrix}``."""
    split = split_plan(plan, root_seed)
    train_sets, val_sets, test_sets = _partition_sets(plan, split)
    columns = list(plan.test_zones) + ([FULL_COLUMN] if plan.full_fov else [])
    out = {}

    def test_set(col, depth_aware):
        mode = "regular" if col == FULL_COLUMN else plan.zone(col)
        return test_sets.get(mode, depth_aware)

    zone_rows = [r for r in plan.rows if r in {z.name for z in plan.zones}]
    if zone_rows or DISPATCH_ROW in plan.rows:
        bundle = train_strategy(plan, "zone", train_sets, val_sets, root_seed)
        for row in zone_rows:
            for col in columns:
                out[(row, col)] = evaluate(bundle.models[row], test_set(col, False))
        if DISPATCH_ROW in plan.rows:
            for col in columns:
                out[(DISPATCH_ROW, col)] = evaluate_dispatched(
                    bundle, test_set(col, False), plan.zones, plan.grid, plan.geometry)
    for strategy in ("regular", "depth_aware"):
        if strategy in plan.rows:
            bundle = train_strategy(plan, strategy, train_sets, val_sets, root_seed)
            for col in columns:
                out[(strategy, col)] = evaluate(bundle.models["all"], test_set(col, strategy == "depth_aware"))
    order = [r for r in plan.rows]
    return {k: out[k] for r in order for k in out if k[0] == r}


def _check_frames(plan: ExperimentPlan) -> None:
    for cls, ids in _frames_per_class(plan.frames).items():
        if len(ids) < 3 * plan.n_train_images:
            raise InsufficientFrames(
                f"class {cls}: {len(ids)} frames cannot hold 3 x {plan.n_train_images} disjoint frames")


def repeat_experiment(plan: ExperimentPlan, n_reps: int = 10, base_seed: int = 0,
                      workers: int = 1) -> ExperimentResult:
    """Repeat :func:`run_repetition` with root seeds ``base_seed + k``."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    _check_frames(plan)
    runs = run_jobs(run_repetition, [(plan, base_seed + k) for k in range(n_reps)], workers)
    keys = list(runs[0])
    confusions = {k: [r[k] for r in runs] for k in keys}
    cells = {k: CellStat.of([cm.accuracy for cm in confusions[k]]) for k in keys}
    meta = {"n_train_images": plan.n_train_images, "seed_base": base_seed,
            "seeds": [base_seed + k for k in range(n_reps)], "config_hash": plan.config_hash(),
            "std": "population (ddof=0)"}
    return ExperimentResult(cells, n_reps, meta, confusions)


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepCurve:
    x: tuple
    y: tuple
    yerr: tuple
    labels: tuple
    name: str = ""
    x_name: str = "x"
    runs: tuple = ()  # per-point tuples of per-repetition accuracies
    n_reps: int = 1
    seed_base: int = 0
    config_hash: str = ""
    omitted: tuple = ()  # x values skipped because the zone left the frame

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.yerr) == len(self.labels)):
            raise ValueError("x, y, yerr and labels must have equal length")
        if any(b <= a for a, b in zip(self.x, self.x[1:])):
            raise ValueError("x must be strictly increasing")

    @classmethod
    def from_runs(cls, x, runs, labels, **kw) -> "SweepCurve":
        stats = [mean_std(r) for r in runs]
        return cls(tuple(float(v) for v in x), tuple(m for m, _ in stats), tuple(s for _, s in stats),
                   tuple(labels), runs=tuple(tuple(float(a) for a in r) for r in runs), **kw)


def default_offsets(step: float = 0.2, reach: float = 0.8) -> tuple:
    n = int(round(reach / step))
    return tuple(round(k * step, 10) for k in range(-n, n + 1))


def sweep_test_zone(model: ZoneNet, train_zone: ZoneSpec, offsets: Sequence[float],
                    frames: Sequence[UltrasoundFrame], grid: PatchGridSpec,
                    norm: NormalizationSpec = NormalizationSpec(), snap: str = "pixel",
                    depth_aware: bool = False) -> SweepCurve:
    """Accuracy of a fixed model on zones shifted by ``offsets`` cm from its training zone.

    Offset 0 reuses the training zone itself. Offsets whose zone would leave
    the frame are listed in ``omitted`` instead of aborting the sweep.
    """
    geometry = frames[0].geometry
    width = train_zone.n_lines
    xs, ys, labels, omitted = [], [], [], []
    for off in sorted(offsets):
        if abs(off) < 1e-12:
            zone = train_zone
        else:
            try:
                zone = geo.zone_for_center(train_zone.center_depth_cm + off, width, grid, geometry,
                                           name=f"{train_zone.name}{off:+.2f}", snap=snap)
            except GridOverflow as exc:
                log.warning("offset %+.2f cm omitted: %s", off, exc)
                omitted.append(float(off))
                continue
        data = dp.build_dataset(frames, grid, zone, norm, depth_aware)
        xs.append(float(off))
        ys.append(evaluate(model, data).accuracy)
        labels.append(f"{zone.center_depth_cm:.4f}cm")
    return SweepCurve(tuple(xs), tuple(ys), (0.0,) * len(xs), tuple(labels), name=train_zone.name,
                      x_name="offset_cm", runs=tuple((y,) for y in ys), omitted=tuple(omitted))


def _train_zone_model(plan: ExperimentPlan, zone: ZoneSpec, train_sets: _Sets, root_seed: int) -> ZoneNet:
    cfg = StrategyConfig("zone", {zone.name: train_sets.get(zone)}, None, [zone])
    return train(cfg, plan.hyperparams, root_seed, plan.network, plan.checkpoint).models[zone.name]


def _offset_rep(plan: ExperimentPlan, zone: ZoneSpec, offsets, root_seed: int, snap: str) -> SweepCurve:
    split = split_plan(plan, root_seed)
    train_sets, _, _ = _partition_sets(plan, split)
    model = _train_zone_model(plan, zone, train_sets, root_seed)
    test_frames = dp.frames_for(plan.frames, split.test_ids)
    return sweep_test_zone(model, zone, offsets, test_frames, plan.grid, train_sets.norm, snap)


def repeat_offset_sweep(plan: ExperimentPlan, zone_name: str = "on_focus",
                        offsets: Sequence[float] = default_offsets(), n_reps: int = 10,
                        base_seed: int = 0, snap: str = "pixel", workers: int = 1) -> SweepCurve:
    """Train on one zone, test on shifted zones; mean/std over repetitions."""
    _check_frames(plan)
    zone = plan.zone(zone_name)
    reps = run_jobs(_offset_rep, [(plan, zone, tuple(offsets), base_seed + k, snap) for k in range(n_reps)],
                    workers)
    first = reps[0]
    runs = [tuple(r.y[i] for r in reps) for i in range(len(first.x))]
    return SweepCurve.from_runs(first.x, runs, first.labels, name=zone_name, x_name="offset_cm",
                                n_reps=n_reps, seed_base=base_seed, config_hash=plan.config_hash(),
                                omitted=first.omitted)


def _same_zone_rep(plan: ExperimentPlan, zones: Sequence[ZoneSpec], root_seed: int) -> list:
    """Train and test on each zone in turn, all from one split."""
    split = split_plan(plan, root_seed)
    train_sets, _, test_sets = _partition_sets(plan, split)
    accs = []
    for zone in zones:
        model = _train_zone_model(plan, zone, train_sets, root_seed)
        accs.append(evaluate(model, test_sets.get(zone)).accuracy)
    return accs


def sweep_zone_center(plan: ExperimentPlan, centers: Sequence[float], width_lines: int = 3,
                      n_reps: int = 10, base_seed: int = 0, snap: str = "pixel",
                      workers: int = 1) -> SweepCurve:
    """Train and test on the same zone while moving its centre."""
    _check_frames(plan)
    zones, xs, omitted = [], [], []
    for c in sorted(centers):
        try:
            zones.append(geo.zone_for_center(c, width_lines, plan.grid, plan.geometry,
                                             name=f"center{c:.2f}", snap=snap))
            xs.append(float(c))
        except GridOverflow as exc:
            log.warning("centre %.2f cm omitted: %s", c, exc)
            omitted.append(float(c))
    reps = run_jobs(_same_zone_rep, [(plan, zones, base_seed + k) for k in range(n_reps)], workers)
    runs = [tuple(r[i] for r in reps) for i in range(len(zones))]
    return SweepCurve.from_runs(xs, runs, [f"{z.center_depth_cm:.4f}cm" for z in zones],
                                name="zone_center", x_name="center_cm", n_reps=n_reps,
                                seed_base=base_seed, config_hash=plan.config_hash(), omitted=tuple(omitted))


def width_zone(width: int, grid: PatchGridSpec, geometry: FrameGeometry) -> ZoneSpec:
    """Zone of ``width`` lines anchored at on-focus: 1/3 on-focus, 2/3 pre+on, 3/3 all lines."""
    n = grid.n_axial_lines
    k = n // 3
    spans = {k: range(k, 2 * k), 2 * k: range(0, 2 * k), n: range(0, n)}
    if n % 3 or width not in spans:
        raise ValueError(f"width must be one of {sorted(spans)} for a {n}-line grid")
    return geo.zone_from_lines(f"width{width}", spans[width], grid, geometry)


def zone_width_experiment(plan: ExperimentPlan, widths: Sequence[int] = (3, 6, 9), n_reps: int = 10,
                          base_seed: int = 0, workers: int = 1) -> SweepCurve:
    """Train and test on on-focus-anchored zones of growing axial width."""
    _check_frames(plan)
    zones = [width_zone(w, plan.grid, plan.geometry) for w in sorted(widths)]
    reps = run_jobs(_same_zone_rep, [(plan, zones, base_seed + k) for k in range(n_reps)], workers)
    runs = [tuple(r[i] for r in reps) for i in range(len(zones))]
    return SweepCurve.from_runs(sorted(widths), runs, [z.name for z in zones], name="zone_width",
                                x_name="width_lines", n_reps=n_reps, seed_base=base_seed,
                                config_hash=plan.config_hash())
