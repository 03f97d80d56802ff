import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from costal.core_data import ConfigError, HeatmapStack, InvariantError
from costal.heatmap_analysis import (
    ThresholdSet,
    boundary_length,
    component_count,
    connected_components,
    gt_features,
    mean_heatmap,
    stack_features,
    threshold,
)
from oracles import edge_count, flood_fill_count

masks16 = hnp.arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


def test_mean_heatmap_cases(rng):
    a = HeatmapStack("s", rng.random((2, 4, 4)))
    assert np.allclose(mean_heatmap([a, a, a]).maps, a.maps)
    zero, one = HeatmapStack("s", np.zeros((1, 3, 3))), HeatmapStack("s", np.ones((1, 3, 3)))
    assert np.all(mean_heatmap([zero, one]).maps == 0.5)
    ms = [HeatmapStack("s", rng.random((2, 4, 4))) for _ in range(3)]
    expect = (ms[0].maps.astype(np.float64) + ms[1].maps + ms[2].maps) / 3
    assert np.allclose(mean_heatmap(ms).maps, expect, atol=1e-7)
    with pytest.raises(InvariantError):
        mean_heatmap([zero, HeatmapStack("s", np.zeros((1, 3, 4)))])


def test_threshold_convention(rng):
    half = np.full((4, 4), 0.5)
    assert threshold(half, 0.5).all()
    assert not threshold(half, 0.500001).any()
    m = rng.random((5, 5))
    assert np.array_equal(threshold(m, 0.3), (m >= 0.3).astype(np.uint8))
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            threshold(half, bad)


def test_components_small_cases():
    assert connected_components(np.zeros((4, 4)))[1] == 0
    diag = np.array([[1, 0], [0, 1]])
    assert connected_components(diag)[1] == 1
    labels, n = connected_components(np.array([[1, 0, 1], [0, 0, 0], [1, 0, 0]]))
    assert n == 3 and labels[0, 0] == 1 and labels[0, 2] == 2 and labels[2, 0] == 3


def test_boundary_small_cases():
    single = np.zeros((5, 5), np.uint8)
    single[2, 2] = 1
    assert boundary_length(single) == 4
    rect = np.zeros((6, 6), np.uint8)
    rect[1:3, 1:4] = 1
    assert boundary_length(rect) == 10
    assert boundary_length(np.ones((3, 3))) == 12  # border edges count too


@settings(max_examples=200, deadline=None)
@given(masks16)
def test_morphology_matches_oracles(mask):
    rows = mask.tolist()
    assert connected_components(mask)[1] == flood_fill_count(rows)
    assert boundary_length(mask) == edge_count(rows)
    assert (boundary_length(mask) == 0) == (connected_components(mask)[1] == 0)


@settings(max_examples=50, deadline=None)
@given(masks16, st.integers(0, 5), st.integers(0, 5))
def test_translation_invariance(mask, dy, dx):
    big = np.zeros((24, 24), np.uint8)
    big[dy:dy + 16, dx:dx + 16] = mask
    assert boundary_length(big) == boundary_length(mask)
    assert connected_components(big)[1] == connected_components(mask)[1]


def test_component_count_does_not_join_frames():
    m = np.zeros((3, 4, 4), np.uint8)
    m[:, 3, :] = 1  # last row of frame i sits next to first row of frame i+1
    m[1:, 0, :] = 1
    assert component_count(m) == 5
    assert component_count(m[::-1]) == 5


def test_stack_features_cases():
    zero = HeatmapStack("z", np.zeros((3, 8, 8)))
    f = stack_features(zero)
    assert (f.boundary_length, f.component_count) == (0.0, 0.0)
    maps = np.zeros((3, 8, 8))
    maps[1, 2:4, 3:6] = 1.0
    f = stack_features(HeatmapStack("b", maps))
    assert (f.boundary_length, f.component_count) == (10.0, 1.0)
    assert f.per_threshold == {0.3: (10.0, 1), 0.5: (10.0, 1), 0.7: (10.0, 1)}


def test_graded_blob_per_threshold():
    yy, xx = np.mgrid[0:16, 0:16]
    blob = np.exp(-((yy - 8) ** 2 + (xx - 7) ** 2) / 10.0)
    f = stack_features(HeatmapStack("g", blob[None]))
    expected = {}
    for tau in (0.3, 0.5, 0.7):
        m = (blob >= tau).tolist()
        expected[tau] = (edge_count(m), flood_fill_count(m))
    assert f.per_threshold == expected
    assert f.boundary_length == pytest.approx(np.mean([v[0] for v in expected.values()]))
    # a higher threshold never grows the mask
    sizes = [int((blob >= t).sum()) for t in (0.3, 0.5, 0.7)]
    assert sizes == sorted(sizes, reverse=True)


def test_threshold_set_validation():
    for bad in ((), (0.5, 0.3), (0.0, 0.5), (0.5, 0.5)):
        with pytest.raises(ConfigError):
            ThresholdSet(bad)


def test_gt_features():
    m = np.zeros((2, 6, 6), np.uint8)
    m[0, 1, 1] = 1
    m[1, 2:4, 2:4] = 1
    f = gt_features("x", m)
    assert (f.boundary_length, f.component_count) == (12.0, 2.0)
