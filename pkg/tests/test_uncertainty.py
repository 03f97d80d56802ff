import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costal.core_data import ConfigError, HeatmapStack, InvariantError
from costal.uncertainty import (
    AggregationConfig,
    DomainError,
    binary_entropy,
    default_top_k,
    js_divergence,
    patch_uncertainties,
    single_model_entropy,
    stack_uncertainty,
    stack_uncertainty_from_heatmaps,
    uncertainty_map,
)


def h_ref(p):
    # scalar closed form, math module only
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def js_ref(ps):
    return h_ref(math.fsum(ps) / len(ps)) - math.fsum(h_ref(p) for p in ps) / len(ps)


def test_binary_entropy_points():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
    assert binary_entropy(0.25) == pytest.approx(0.8112781244591328, abs=1e-12)
    assert binary_entropy(0.25) == pytest.approx(h_ref(0.25), abs=1e-15)


@pytest.mark.parametrize("p", [-0.01, 1.01, float("nan")])
def test_binary_entropy_domain(p):
    with pytest.raises(DomainError):
        binary_entropy(p)


def test_js_examples():
    assert js_divergence([0.3] * 4) == 0.0
    assert js_divergence([1.0, 0.0]) == 1.0
    assert js_divergence([0.2, 0.8, 0.5, 0.5]) == pytest.approx(js_ref([0.2, 0.8, 0.5, 0.5]), abs=1e-12)
    with pytest.raises(ConfigError):
        js_divergence([0.4])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_js_bounds_and_permutation(ps):
    v = js_divergence(ps)
    assert 0.0 <= v <= math.log2(len(ps)) + 1e-12
    assert v == pytest.approx(js_divergence(ps[::-1]), abs=1e-12)
    assert v == pytest.approx(js_ref(ps), abs=1e-9)


def test_uncertainty_map_cases(rng):
    zeros = HeatmapStack("s", np.zeros((2, 4, 4)))
    ones = HeatmapStack("s", np.ones((2, 4, 4)))
    assert np.all(uncertainty_map([zeros, zeros, zeros]).values == 0)
    assert np.all(uncertainty_map([zeros, ones]).values == 1.0)
    members = [HeatmapStack("s", rng.random((2, 3, 5))) for _ in range(4)]
    umap = uncertainty_map(members)
    for idx in np.ndindex(2, 3, 5):
        assert umap.values[idx] == pytest.approx(js_ref([float(m.maps[idx]) for m in members]), abs=1e-9)


def test_uncertainty_map_rejects_mismatch():
    with pytest.raises(InvariantError):
        uncertainty_map([HeatmapStack("a", np.zeros((1, 4, 4))), HeatmapStack("a", np.zeros((1, 4, 5)))])
    with pytest.raises(InvariantError):
        uncertainty_map([HeatmapStack("a", np.zeros((1, 4, 4))), HeatmapStack("b", np.zeros((1, 4, 4)))])


def _umap(values):
    from costal.uncertainty import UncertaintyMap

    return UncertaintyMap("s", np.asarray(values, dtype=np.float64))


def test_patch_means_uniform_and_dilution():
    cfg = AggregationConfig(top_k=1, patch_size=4)
    assert [p.value for p in patch_uncertainties(_umap(np.full((2, 8, 8), 0.3)), cfg)] == pytest.approx([0.3] * 8)
    v = np.zeros((1, 8, 8))
    v[0, 5, 6] = 0.8
    patches = patch_uncertainties(_umap(v), cfg)
    assert len(patches) == 4
    hot = [p for p in patches if p.value > 0]
    assert len(hot) == 1 and (hot[0].y, hot[0].x) == (4, 4)
    assert hot[0].value == pytest.approx(0.8 / 16)


def test_patch_means_match_double_loop(rng):
    v = rng.random((3, 13, 10))
    p = 4
    patches = patch_uncertainties(_umap(v), AggregationConfig(top_k=1, patch_size=p))
    expected = []
    for f in range(3):
        for y in range(0, 13, p):
            for x in range(0, 10, p):
                cells = [v[f, yy, xx] for yy in range(y, min(y + p, 13)) for xx in range(x, min(x + p, 10))]
                expected.append(sum(cells) / len(cells))
    assert [q.value for q in patches] == pytest.approx(expected, abs=1e-12)


def test_stack_uncertainty_limits():
    vals = [0.9, 0.5, 0.4, 0.1]
    assert stack_uncertainty(vals, AggregationConfig(top_k=1)).value == 0.9
    assert stack_uncertainty(vals, AggregationConfig(top_k=4)).value == pytest.approx(0.475)
    assert stack_uncertainty(vals, AggregationConfig(top_k=100)).value == pytest.approx(0.475)
    assert stack_uncertainty(vals, AggregationConfig(top_k=3)).value == pytest.approx(0.6)
    with pytest.raises(ValueError):
        stack_uncertainty([], AggregationConfig())
    with pytest.raises(ConfigError):
        AggregationConfig(top_k=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_stack_uncertainty_properties(vals, r):
    shuffled = list(vals)
    r.shuffle(shuffled)
    prev = math.inf
    for k in range(1, len(vals) + 2):
        cfg = AggregationConfig(top_k=k)
        v = stack_uncertainty(vals, cfg).value
        assert v == stack_uncertainty(shuffled, cfg).value
        assert v <= prev + 1e-12
        prev = v


def test_from_heatmaps_agrees_with_patch_path(rng):
    members = [HeatmapStack("s", rng.random((2, 16, 16))) for _ in range(4)]
    cfg = AggregationConfig(top_k=5, patch_size=8)
    direct = stack_uncertainty_from_heatmaps(members, cfg).value
    staged = stack_uncertainty(patch_uncertainties(uncertainty_map(members), cfg), cfg).value
    assert direct == pytest.approx(staged, abs=1e-12)
    assert single_model_entropy(HeatmapStack("s", np.full((1, 8, 8), 0.5)), cfg).value == 1.0


def test_default_top_k_scaling():
    assert default_top_k(1) == 1
    assert default_top_k(10 ** 9) > 200
