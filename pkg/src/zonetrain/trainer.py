"""Regular, Zone and Depth-Aware training with Adam and cross-entropy."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datapipe import LabeledPatchSet
from .errors import ChannelMismatch, DimensionMismatch, EmptyDataset, UnknownSize, ZonePurityViolation
from .geometry import ZoneSpec
from .model import NetworkConfig, ZoneNet, init_model
from .seeding import derive_seed

log = logging.getLogger(__name__)

STRATEGIES = ("regular", "zone", "depth_aware")

# training-set size (frames per class) -> (epochs, learning rate)
PAPER_SCHEDULE = {
    10: (2500, 5e-6),
    25: (2000, 5e-6),
    50: (2000, 1e-5),
    100: (1500, 1e-5),
    200: (1000, 1e-5),
    500: (400, 1e-5),
}


@dataclass(frozen=True)
class HyperParams:
    epochs: int
    learning_rate: float
    batch_size: int = 128
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    flip_p: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def hyperparams_for(n_train_images: int, epochs: Optional[int] = None,
                    learning_rate: Optional[float] = None, batch_size: int = 128,
                    schedule: Mapping[int, tuple] = PAPER_SCHEDULE) -> HyperParams:
    """Look up the size-dependent schedule; explicit values override table entries."""
    if n_train_images in schedule:
        e, lr = schedule[n_train_images]
        return HyperParams(epochs if epochs is not None else e,
                           learning_rate if learning_rate is not None else lr, batch_size)
    if epochs is None or learning_rate is None:
        raise UnknownSize(
            f"no schedule entry for {n_train_images} images; known sizes {sorted(schedule)}, "
            "pass both epochs and learning_rate to override")
    return HyperParams(epochs, learning_rate, batch_size)


@dataclass
class StrategyConfig:
    """What to train.

    ``train``/``val`` map a model key to its patch set: one entry per zone
    name for the zone strategy, a single ``"all"`` entry otherwise.
    """

    strategy: str
    train: Mapping[str, LabeledPatchSet]
    val: Optional[Mapping[str, LabeledPatchSet]] = None
    zones: Sequence[ZoneSpec] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "zone" and not self.zones:
            raise ValueError("zone strategy needs at least one zone")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {"train_loss": list(self.train_loss), "train_acc": list(self.train_acc),
                "val_acc": list(self.val_acc)}

    @classmethod
    def from_dict(cls, d: dict) -> "History":
        return cls(list(d["train_loss"]), list(d["train_acc"]), list(d["val_acc"]))


@dataclass
class TrainedBundle:
    models: dict  # key -> ZoneNet
    histories: dict  # key -> History
    strategy: str
    hyperparams: HyperParams
    network: NetworkConfig
    seed: int
    dataset_fingerprints: dict = field(default_factory=dict)

    @property
    def history(self) -> History:
        """History of the single model for regular/depth-aware bundles."""
        if len(self.histories) != 1:
            raise ValueError("bundle holds several models; use .histories")
        return next(iter(self.histories.values()))


def loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy with uniform class weights."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.cross_entropy(logits, labels)


def select_checkpoint(history: History, mode: str = "last") -> int:
    if len(history) == 0:
        raise ValueError("empty history")
    if mode == "last":
        return len(history) - 1
    if mode == "best_val":
        vals = np.asarray(history.val_acc, dtype=float)
        if np.all(np.isnan(vals)):
            return len(history) - 1
        return int(np.nanargmax(vals))  # first maximum
    raise ValueError(f"unknown checkpoint mode {mode!r}")


def _accuracy(model: ZoneNet, data: LabeledPatchSet, batch: int = 1024) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(data), batch):
            x = torch.from_numpy(data.patches[i:i + batch])
            pred = model(x).numpy().argmax(1)
            correct += int((pred == data.labels[i:i + batch]).sum())
    return correct / len(data)


def fit_model(train_set: LabeledPatchSet, hp: HyperParams, network: NetworkConfig, seed: int,
              val_set: Optional[LabeledPatchSet] = None, checkpoint: str = "last",
              progress: Optional[str] = None) -> tuple[ZoneNet, History]:
    """Train one network. Randomness comes only from ``seed`` via labelled streams.

    The streams do not depend on which zone is being trained, so two calls with
    identical data and seed give identical parameters regardless of context.
    """
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    if train_set.n_channels != network.input_channels:
        raise ChannelMismatch(
            f"data has {train_set.n_channels} channels, network expects {network.input_channels}")
    if tuple(train_set.patches.shape[2:]) != network.input_shape:
        raise DimensionMismatch(
            f"patch shape {train_set.patches.shape[2:]} != network input {network.input_shape}")
    model = init_model(network, derive_seed(seed, "init"))
    torch.manual_seed(derive_seed(seed, "dropout"))
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    flip_rng = np.random.default_rng(derive_seed(seed, "augment"))
    opt = torch.optim.Adam(model.parameters(), lr=hp.learning_rate, betas=hp.betas, eps=hp.eps)
    x_all = torch.from_numpy(np.ascontiguousarray(train_set.patches))
    y_all = torch.from_numpy(train_set.labels)
    n = len(train_set)
    history = History()
    best_state, best_val = None, -1.0
    for epoch in range(hp.epochs):
        model.train()
        order = torch.from_numpy(shuffle_rng.permutation(n))
        flips = torch.from_numpy(flip_rng.random(n) < hp.flip_p)
        total, correct = 0.0, 0
        for start in range(0, n, hp.batch_size):  # final short batch is kept
            idx = order[start:start + hp.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            fb = flips[idx]
            if fb.any():
                xb = xb.clone()
                xb[fb] = torch.flip(xb[fb], dims=(-1,))
            opt.zero_grad()
            logits = model(xb)
            batch_loss = loss(logits, yb)
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        history.train_loss.append(total / n)
        history.train_acc.append(correct / n)
        va = _accuracy(model, val_set) if val_set is not None else float("nan")
        history.val_acc.append(va)
        if checkpoint == "best_val" and val_set is not None and va > best_val:
            best_val, best_state = va, copy.deepcopy(model.state_dict())
        if progress and (epoch + 1) % max(1, hp.epochs // 10) == 0:
            log.info("%s epoch %d/%d loss %.4f train_acc %.3f val_acc %.3f", progress, epoch + 1,
                     hp.epochs, history.train_loss[-1], history.train_acc[-1], va)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def _check_purity(key: str, data: LabeledPatchSet) -> None:
    bad = [z for z in set(data.zone_names) if z != key]
    if bad:
        raise ZonePurityViolation(f"training set for zone {key!r} contains patches tagged {sorted(bad)}")


def train(strategy: StrategyConfig, hp: HyperParams, seed: int,
          network: NetworkConfig = NetworkConfig(), checkpoint: str = "last",
          workers: int = 1) -> TrainedBundle:
    """Train every model the strategy calls for.

    Zone models are independent jobs; with ``workers > 1`` they run in
    separate processes and produce the same parameters as a sequential run.
    """
    if not strategy.train:
        raise EmptyDataset("no training sets supplied")
    if strategy.strategy == "zone":
        names = [z.name for z in strategy.zones]
        missing = [n for n in names if n not in strategy.train]
        if missing:
            raise EmptyDataset(f"no training set for zones {missing}")
        for name in names:
            _check_purity(name, strategy.train[name])
        keys = names
    else:
        if set(strategy.train) != {"all"}:
            raise ValueError(f"{strategy.strategy} strategy takes a single 'all' training set")
        keys = ["all"]
    channels = 2 if strategy.strategy == "depth_aware" else 1
    network = replace(network, input_channels=channels)
    val = strategy.val or {}
    jobs = [(strategy.train[k], hp, network, seed, val.get(k), checkpoint, f"{strategy.strategy}/{k}")
            for k in keys]
    results = run_jobs(fit_model, jobs, workers)
    return TrainedBundle(
        models={k: m for k, (m, _) in zip(keys, results)},
        histories={k: h for k, (_, h) in zip(keys, results)},
        strategy=strategy.strategy, hyperparams=hp, network=network, seed=seed,
        dataset_fingerprints={k: strategy.train[k].fingerprint() for k in keys})


def _worker_init():
    torch.set_num_threads(1)


def _call(args):
    fn, a = args
    return fn(*a)


def run_jobs(fn, jobs: Sequence[tuple], workers: int = 1) -> list:
    """Run ``fn(*job)`` for each job, in-process or on a process pool, preserving order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
        return list(pool.map(_call, [(fn, job) for job in jobs]))
