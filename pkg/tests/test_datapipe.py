import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zonetrain import datapipe as dp
from zonetrain import geometry as geo
from zonetrain.errors import EmptyDataset, IndexOutOfRange, InsufficientFrames
from zonetrain.geometry import FrameGeometry, PatchGridSpec

from conftest import noise_frame

G, GRID = FrameGeometry(), PatchGridSpec()


# ---------------------------------------------------------------- splits

def test_split_sizes_and_disjoint():
    split = dp.split_frames({0: 1007, 1: 1007, 2: 1007}, 25, seed=7)
    for cls in (0, 1, 2):
        parts = [set(p[cls]) for p in split.partitions().values()]
        assert [len(p) for p in parts] == [25, 25, 25]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])


def test_split_rejects_empty_and_short():
    with pytest.raises(InsufficientFrames):
        dp.split_frames({0: 10}, 0, seed=0)
    with pytest.raises(InsufficientFrames):
        dp.split_frames({0: 10}, 4, seed=0)


def test_split_determinism_and_seed_sensitivity():
    a = dp.split_frames({0: 100, 1: 100}, 10, seed=3)
    assert a == dp.split_frames({0: 100, 1: 100}, 10, seed=3)
    same = sum(dp.split_frames({0: 100}, 10, seed=s).partitions() ==
               dp.split_frames({0: 100}, 10, seed=s + 1000).partitions() for s in range(100))
    assert same == 0


def test_split_with_explicit_ids():
    ids = [f"c0-{i}" for i in range(9)]
    split = dp.split_frames({0: ids}, 3, seed=1)
    assert sorted(split.all_ids("train") | split.all_ids("val") | split.all_ids("test")) == sorted(ids)


# ---------------------------------------------------------------- normalization

def test_constant_patch_becomes_zeros():
    np.testing.assert_array_equal(dp.zscore(np.full((200, 26), 5.0)), 0.0)


def test_checkerboard_is_fixed_point():
    p = np.where(np.indices((200, 26)).sum(0) % 2, 1.0, -1.0)
    np.testing.assert_array_equal(dp.zscore(p), p)


def test_random_patch_statistics():
    p = np.random.default_rng(0).normal(3.0, 7.0, (200, 26))
    z = dp.zscore(p)
    # independent oracle: population statistics recomputed by hand
    mean = z.sum() / z.size
    std = np.sqrt(((z - mean) ** 2).sum() / z.size)
    assert abs(mean) < 1e-6 and abs(std - 1) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 20, 6), elements=st.floats(-1e4, 1e4, allow_subnormal=False)))
def test_stack_matches_single_patch_rule(stack):
    out = dp.zscore_stack(stack)
    for k in range(len(stack)):
        np.testing.assert_allclose(out[k], dp.zscore(stack[k]), atol=1e-9)


def test_corpus_mode_uses_fitted_stats():
    x = np.random.default_rng(1).normal(2.0, 4.0, (50, 10, 6))
    spec = dp.NormalizationSpec.fit_corpus(x)
    assert spec.corpus_mean == pytest.approx(x.mean()) and spec.corpus_std == pytest.approx(x.std())
    z = dp.zscore_stack(x, spec)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
    with pytest.raises(ValueError):
        dp.NormalizationSpec("corpus")
    with pytest.raises(ValueError):
        dp.NormalizationSpec(epsilon=0.0)


# ---------------------------------------------------------------- augmentation / depth

def test_flip_involution_and_columns():
    p = np.arange(200 * 26, dtype=float).reshape(200, 26)
    always = np.random.default_rng(0)
    f = dp.horizontal_flip(p, always, p=1.0)
    for j in range(26):
        np.testing.assert_array_equal(f[:, j], p[:, 25 - j])
    np.testing.assert_array_equal(dp.horizontal_flip(f, always, p=1.0), p)
    assert dp.horizontal_flip(p, always, p=0.0) is p


def test_flip_rate_binomial_bound():
    rng = np.random.default_rng(123)
    p = np.arange(4.0).reshape(1, 4)
    flips = sum(dp.horizontal_flip(p, rng)[0, 0] == 3.0 for _ in range(10_000))
    # 0.5 +- 0.02 is about 4 binomial standard deviations
    assert 0.48 <= flips / 10_000 <= 0.52


@pytest.mark.parametrize("line,value", [(0, 0.0), (8, 1.0), (4, 0.5)])
def test_depth_channel(line, value):
    assert dp.depth_channel_value(line, 9) == value
    out = dp.attach_depth_channel(np.zeros((200, 26)), line, 9)
    assert out.shape == (2, 200, 26)
    assert np.all(out[1] == value)


def test_depth_channel_bounds():
    with pytest.raises(IndexOutOfRange):
        dp.depth_channel_value(9, 9)
    with pytest.raises(IndexOutOfRange):
        dp.depth_channel_value(0, 1)


# ---------------------------------------------------------------- dataset assembly

def _frames(n_per_class, geometry=G):
    return [noise_frame(geometry, seed=100 * c + i, label=c, frame_id=f"c{c}-{i}")
            for c in range(3) for i in range(n_per_class)]


def test_zone_dataset_counts_for_25_images():
    zone = geo.default_zones(GRID, G)[1]
    ds = dp.build_dataset(_frames(25), GRID, zone)
    assert len(ds) == 2025
    assert list(ds.class_counts()) == [675, 675, 675]
    assert set(ds.zone_names) == {"on_focus"}
    assert ds.extraction_mode == "zone:on_focus"


def test_zone_dataset_count_scales_to_500_images():
    zone = geo.default_zones(GRID, G)[0]
    per_frame = len(dp.build_dataset([noise_frame(label=0)], GRID, zone))
    assert per_frame * 500 == 13_500
    assert per_frame * 1500 == 40_500


def test_regular_depth_aware_single_frame():
    ds = dp.build_dataset([noise_frame(label=1)], GRID, "regular", depth_aware=True)
    assert ds.patches.shape == (81, 2, 200, 26)
    assert len(np.unique(ds.patches[:, 1])) == 9
    np.testing.assert_allclose(np.unique(ds.depths_norm), np.arange(9) / 8)
    assert ds.zone_names[:27] == ("pre_focal",) * 27
    # channel 0 is per-patch normalized
    np.testing.assert_allclose(ds.patches[:, 0].mean(axis=(1, 2)), 0, atol=1e-5)


def test_dataset_matches_direct_extraction():
    frame = noise_frame(label=2)
    ds = dp.build_dataset([frame], GRID, "regular", dtype=np.float64)
    patches = geo.extract_regular_grid(frame, GRID)
    for k in (0, 40, 80):
        np.testing.assert_allclose(ds.patches[k, 0], dp.zscore(patches[k].values), atol=1e-12)
        assert ds.axial_starts[k] == patches[k].axial_start_px


def test_custom_zone_tag_and_extrapolated_depth():
    zone = geo.zone_for_center(0.6, 3, GRID, G, name="shallow")
    ds = dp.build_dataset([noise_frame(label=0)], GRID, zone, depth_aware=True)
    assert ds.extraction_mode == "custom:shallow"
    assert ds.depths_norm.min() < 0


def test_empty_inputs_rejected():
    with pytest.raises(EmptyDataset):
        dp.build_dataset([], GRID)
    frame = noise_frame()
    unlabeled = geo.UltrasoundFrame(frame.geometry, frame.samples, "u")
    with pytest.raises(ValueError):
        dp.build_dataset([unlabeled], GRID)


def test_subset_and_fingerprint():
    ds = dp.build_dataset(_frames(1), GRID)
    sub = ds.subset(ds.labels == 1)
    assert len(sub) == 81 and set(sub.labels) == {1}
    picked = ds.subset(np.array([0, 5, 100]))
    assert len(picked) == 3 and picked.frame_ids[0] == ds.frame_ids[0]
    assert ds.fingerprint() == dp.build_dataset(_frames(1), GRID).fingerprint()
    assert sub.fingerprint() != ds.fingerprint()


def test_frames_for_follows_split():
    frames = _frames(3)
    split = dp.split_frames({c: [f.frame_id for f in frames if f.label == c] for c in range(3)}, 1, 0)
    picked = dp.frames_for(frames, split.train_ids)
    assert [f.label for f in picked] == [0, 1, 2]
    assert {f.frame_id for f in picked} == split.all_ids("train")
