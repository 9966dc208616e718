import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zonetrain import datapipe as dp
from zonetrain import geometry as geo
from zonetrain import trainer as tr
from zonetrain.desk import DESK
from zonetrain.errors import ChannelMismatch, EmptyDataset, UnknownSize, ZonePurityViolation
from zonetrain.geometry import FrameGeometry, PatchGridSpec
from zonetrain.model import named_parameters
from zonetrain.synthphantom import generate_dataset

from conftest import noise_frame


@pytest.fixture(scope="module")
def desk_frames():
    return generate_dataset(2, geometry=DESK.geometry, seed=11)


@pytest.fixture(scope="module")
def desk_regular(desk_frames):
    return dp.build_dataset(desk_frames, DESK.grid)


def _fast(epochs=2, lr=3e-4):
    return tr.HyperParams(epochs, lr)


# ---------------------------------------------------------------- schedule

@pytest.mark.parametrize("n,expected", [(10, (2500, 5e-6)), (25, (2000, 5e-6)), (50, (2000, 1e-5)),
                                        (100, (1500, 1e-5)), (200, (1000, 1e-5)), (500, (400, 1e-5))])
def test_schedule(n, expected):
    hp = tr.hyperparams_for(n)
    assert (hp.epochs, hp.learning_rate) == expected
    assert hp.batch_size == 128 and hp.betas == (0.9, 0.999) and hp.eps == 1e-8


def test_schedule_overrides_and_unknown():
    with pytest.raises(UnknownSize):
        tr.hyperparams_for(37)
    hp = tr.hyperparams_for(37, epochs=10, learning_rate=1e-3)
    assert (hp.epochs, hp.learning_rate) == (10, 1e-3)
    assert tr.hyperparams_for(25, epochs=7).learning_rate == 5e-6


# ---------------------------------------------------------------- loss

def test_loss_uniform_logits():
    assert float(tr.loss(torch.zeros(4, 3), [0, 1, 2, 0])) == pytest.approx(math.log(3))


def test_loss_saturates():
    logits = torch.tensor([[30.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(tr.loss(logits, [0])) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.integers(0, 2), st.integers(0, 2))
def test_loss_is_mean_of_per_sample(values, y1, y2):
    logits = torch.tensor(values, dtype=torch.float64).reshape(2, 3)
    per = [-torch.log_softmax(logits[i], 0)[y] for i, y in enumerate((y1, y2))]
    assert float(tr.loss(logits, [y1, y2])) == pytest.approx(float(sum(per) / 2), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------- checkpoint selection

def test_select_checkpoint():
    h = tr.History([1.0] * 5, [0.5] * 5, [float("nan")] * 5)
    assert tr.select_checkpoint(h, "last") == 4
    assert tr.select_checkpoint(tr.History([1] * 3, [0] * 3, [0.5, 0.9, 0.9]), "best_val") == 1
    assert tr.select_checkpoint(tr.History([1] * 3, [0] * 3, [0.7] * 3), "best_val") == 0
    with pytest.raises(ValueError):
        tr.select_checkpoint(tr.History(), "last")


def test_history_roundtrip():
    h = tr.History([1.0, 0.5], [0.3, 0.6], [0.2, 0.4])
    assert tr.History.from_dict(h.to_dict()) == h


# ---------------------------------------------------------------- fitting

def test_fit_is_deterministic(desk_regular):
    net = DESK.network()
    a, ha = tr.fit_model(desk_regular, _fast(), net, seed=3)
    b, hb = tr.fit_model(desk_regular, _fast(), net, seed=3)
    pa, pb = named_parameters(a), named_parameters(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    np.testing.assert_equal(ha.to_dict(), hb.to_dict())
    c, _ = tr.fit_model(desk_regular, _fast(), net, seed=4)
    assert not np.array_equal(pa["conv1.weight"], named_parameters(c)["conv1.weight"])


def test_fit_reduces_loss(desk_regular):
    _, h = tr.fit_model(desk_regular, _fast(epochs=25), DESK.network(), seed=0)
    assert len(h) == 25
    assert np.mean(h.train_loss[-3:]) < h.train_loss[0]


def test_overfit_tiny_set(desk_frames):
    # 10 patches per class from the on-focus zone of one frame per class
    zone = geo.default_zones(DESK.grid, DESK.geometry)[1]
    frames = [f for f in desk_frames if f.frame_id.endswith("0000")]
    ds = dp.build_dataset(frames, DESK.grid, zone)
    ds = ds.subset(np.concatenate([np.flatnonzero(ds.labels == c)[:10] for c in range(3)]))
    assert len(ds) == 30
    model, h = tr.fit_model(ds, tr.HyperParams(500, 1e-4), DESK.network(), seed=0)
    assert tr._accuracy(model, ds) == 1.0


def test_fit_input_checks(desk_regular):
    with pytest.raises(ChannelMismatch):
        tr.fit_model(desk_regular, _fast(), DESK.network(input_channels=2), seed=0)


def test_validation_tracking_and_best_val(desk_frames):
    ds = dp.build_dataset(desk_frames, DESK.grid)
    _, h = tr.fit_model(ds, _fast(epochs=3), DESK.network(), seed=0, val_set=ds, checkpoint="best_val")
    assert len(h.val_acc) == 3 and all(0 <= v <= 1 for v in h.val_acc)


# ---------------------------------------------------------------- strategies

def test_zone_strategy_trains_one_model_per_zone(desk_frames):
    zones = geo.default_zones(DESK.grid, DESK.geometry)
    sets = {z.name: dp.build_dataset(desk_frames, DESK.grid, z) for z in zones}
    bundle = tr.train(tr.StrategyConfig("zone", sets, zones=zones), _fast(1), 0, DESK.network())
    assert sorted(bundle.models) == sorted(z.name for z in zones)
    assert all(len(sets[k]) == 2 * 3 * 12 for k in sets)


def test_zone_purity_enforced(desk_regular):
    zones = geo.default_zones(DESK.grid, DESK.geometry)
    with pytest.raises(ZonePurityViolation):
        tr.train(tr.StrategyConfig("zone", {"pre_focal": desk_regular}, zones=zones[:1]), _fast(1), 0,
                 DESK.network())


def test_depth_aware_forces_two_channels(desk_frames):
    ds = dp.build_dataset(desk_frames, DESK.grid, depth_aware=True)
    bundle = tr.train(tr.StrategyConfig("depth_aware", {"all": ds}), _fast(1), 0, DESK.network())
    assert bundle.network.input_channels == 2
    assert bundle.models["all"].conv1.weight.shape[1] == 2


def test_strategy_config_validation(desk_regular):
    with pytest.raises(ValueError):
        tr.StrategyConfig("bogus", {"all": desk_regular})
    with pytest.raises(ValueError):
        tr.StrategyConfig("zone", {"all": desk_regular})
    with pytest.raises(EmptyDataset):
        tr.train(tr.StrategyConfig("regular", {}), _fast(1), 0)


def test_parallel_matches_sequential(desk_frames):
    zones = geo.default_zones(DESK.grid, DESK.geometry)
    sets = {z.name: dp.build_dataset(desk_frames, DESK.grid, z) for z in zones}
    cfg = tr.StrategyConfig("zone", sets, zones=zones)
    seq = tr.train(cfg, _fast(2), 5, DESK.network(), workers=1)
    par = tr.train(cfg, _fast(2), 5, DESK.network(), workers=2)
    for k in seq.models:
        a, b = named_parameters(seq.models[k]), named_parameters(par.models[k])
        assert all(np.array_equal(a[n], b[n]) for n in a)


def test_regular_patch_count_default_grid():
    frames = [noise_frame(seed=i, label=i % 3, frame_id=str(i)) for i in range(3)]
    ds = dp.build_dataset(frames, PatchGridSpec())
    # 81 per frame; 25 frames per class gives 81 * 75
    assert len(ds) == 3 * 81 and 81 * 75 == 6075
