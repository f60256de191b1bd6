import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from errors import InvalidArgumentError, UnobservedObjectError
from processors.describe import (ANY, DescribeConfig, SceneDescriber, ScenePrompt, allocate_budget, bin_centers,
                                 _tag_tokens, canonical_direction, radar_order)
from processors.scenegen import CameraPose


def _describer(**overrides) -> SceneDescriber:
    values = dict(budget=40, ray_cap_factor=500, rays_per_round=2048, workers=2)
    values.update(overrides)
    return SceneDescriber(DescribeConfig(**values))


@pytest.fixture
def described(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    return _describer().describe(fields, segments, graph, poses, 'Which object is the box?')


def test_budget_splits_evenly_down_the_hierarchy(oracle_stack):
    _, _, graph = oracle_stack
    quotas = allocate_budget(40, graph)
    assert sorted(quotas) == [0, 1]
    for quota in quotas.values():
        assert quota.quota == 20
        assert [p.quota for p in quota.parts.values()] == [10, 10]
        assert all(sorted(p.subparts.values()) == [5, 5] for p in quota.parts.values())
    assert sorted(quotas[0].parts) == graph.children('large', 0)


def test_budget_remainders_go_to_lowest_ids(oracle_stack):
    _, _, graph = oracle_stack
    quota = allocate_budget(15, graph)[1]
    assert quota.quota == 7
    parts = sorted(quota.parts)
    assert [quota.parts[p].quota for p in parts] == [4, 3]
    first, second = (quota.parts[p].subparts for p in parts)
    assert [first[s] for s in sorted(first)] == [2, 2]
    assert [second[s] for s in sorted(second)] == [2, 1]


def test_single_scale_budget_uses_catch_all_slot(oracle_stack):
    _, _, graph = oracle_stack
    quota = allocate_budget(40, graph, multi_scale=False)[0]
    assert quota.slots() == {(ANY, ANY): 20}


def test_budget_must_cover_every_object(oracle_stack):
    _, _, graph = oracle_stack
    with pytest.raises(InvalidArgumentError):
        allocate_budget(1, graph)


@pytest.mark.parametrize('bins', [20, 80])
def test_bin_centers_are_unit_vectors(bins):
    centers = bin_centers(bins)
    assert centers.shape == (bins, 3)
    np.testing.assert_allclose(np.linalg.norm(centers, axis=-1), 1.0)


def test_bins_must_subdivide_an_icosahedron():
    with pytest.raises(ValidationError):
        DescribeConfig(bins=30)


def test_canonical_direction_of_a_single_view():
    direction = canonical_direction(np.tile([0.0, 0.0, 2.0], (5, 1)))
    np.testing.assert_allclose(direction, [0.0, 0.0, 1.0])


def test_canonical_direction_follows_the_fullest_bin():
    directions = np.array([[1.0, 0.0, 0.0]] * 3 + [[0.0, 1.0, 0.0]] * 2)
    np.testing.assert_allclose(canonical_direction(directions), [1.0, 0.0, 0.0])


def test_canonical_direction_needs_rays():
    with pytest.raises(UnobservedObjectError):
        canonical_direction(np.zeros((0, 3)))


def test_radar_order_sweeps_counter_clockwise():
    order = radar_order(np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]), center=np.zeros(3))
    assert order.order == [2, 1, 0]
    np.testing.assert_allclose(order.keys[[2, 1, 0]], [0.0157, math.pi / 2 + 0.0157, math.pi + 0.0157])


def test_radar_order_breaks_angle_ties_by_radius():
    order = radar_order(np.array([[2.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), center=np.zeros(3))
    assert order.order == [1, 0]


def test_radar_order_flags_objects_on_the_axis():
    order = radar_order(np.array([[0.0, 0.0, 3.0], [1.0, 1.0, 0.0]]), center=np.zeros(3))
    assert order.flags == [0]
    assert order.keys[0] == 0.0


def test_radar_order_needs_objects():
    with pytest.raises(InvalidArgumentError):
        radar_order(np.zeros((0, 3)))


def test_describe_fills_every_slot(described, two_objects):
    _, oracle = two_objects
    for description in described.descriptions:
        assert len(description.tokens) == 20
        assert description.fill_ratio == 1.0
        tags = [t.tag for t in description.tokens]
        assert tags.count('VI') == 12
        assert tags.count('VD') == 8
        base = oracle.base_token(description.object_id).astype(np.float32)
        for token in description.tokens:
            if token.tag == 'VI':
                np.testing.assert_allclose(token.vector, base, rtol=1e-5, atol=1e-6)
            assert oracle.object_at(token.point[None])[0] == description.object_id


def test_describe_orders_objects_by_sweep(described):
    prompt = described.prompt
    assert prompt.virtual_to_object() == {1: 1, 2: 0}
    assert prompt.question == 'Which object is the box?'
    assert prompt.preamble
    text = prompt.render_text()
    assert '<image id=1>' in text and '<image id=2>' in text
    assert text.endswith('Question: Which object is the box?')


def test_describe_records_canonical_directions(described, oracle_stack):
    _, _, graph = oracle_stack
    for object_id in (0, 1):
        entry = graph.metadata['objects'][str(object_id)]
        assert np.linalg.norm(entry['canonical_direction']) == pytest.approx(1.0)
        assert entry['fill_ratio'] == 1.0


def test_describe_without_sweep_keeps_object_order(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    result = _describer(radar_sweep=False).describe(fields, segments, graph, poses)
    assert result.prompt.virtual_to_object() == {1: 0, 2: 1}


def test_describe_is_deterministic(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    first = _describer().describe(fields, segments, graph, poses, 'q').prompt.to_json_bytes()
    second = _describer().describe(fields, segments, graph, poses, 'q').prompt.to_json_bytes()
    assert first == second


def test_adaptive_tags_follow_the_canonical_direction(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    result = _describer(vi_vd_mode='adaptive').describe(fields, segments, graph, poses)
    threshold = math.cos(math.radians(45.0))
    for description in result.descriptions:
        for token in description.tokens:
            aligned = float(np.dot(token.direction, description.canonical_direction)) >= threshold
            assert token.tag == ('VD' if aligned else 'VI')


def test_all_vi_mode(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    result = _describer(vi_vd_mode='all_vi').describe(fields, segments, graph, poses)
    assert all(t.tag == 'VI' for d in result.descriptions for t in d.tokens)


def test_short_ray_cap_flags_partial_descriptions(oracle_stack, poses):
    fields, segments, graph = oracle_stack
    result = _describer(budget=4000, ray_cap_factor=1).describe(fields, segments, graph, poses)
    for description in result.descriptions:
        assert 'partial' in description.flags
        assert 0 < description.fill_ratio < 1
        assert description.rays_cast == 2000


def test_unobserved_object_raises(oracle_stack):
    fields, segments, graph = oracle_stack
    skyward = [CameraPose.look_at((0.0, 0.0, 3.4), (0.0, 0.0, 10.0), 0.8, (24, 24))]
    with pytest.raises(UnobservedObjectError):
        _describer(ray_cap_factor=5).describe(fields, segments, graph, skyward)


def test_prompt_wire_format(described):
    wire = described.prompt.to_wire()
    assert wire['v'] == 1
    assert [o['virtual_id'] for o in wire['objects']] == [1, 2]
    assert len(wire['objects'][0]['tokens']) == 20
    assert set(wire['objects'][0]['tokens'][0]) == {'v', 'tag'}
    restored = ScenePrompt.from_json(described.prompt.to_json_bytes())
    assert restored.virtual_to_object() == described.prompt.virtual_to_object()


def test_prompt_rejects_bad_payloads():
    with pytest.raises(InvalidArgumentError):
        ScenePrompt.from_json('{not json')
    with pytest.raises(InvalidArgumentError):
        ScenePrompt.from_wire({'objects': []})
    with pytest.raises(InvalidArgumentError):
        ScenePrompt.from_wire({'v': 2, 'question': 'q', 'objects': []})


def test_unknown_virtual_id_raises(described):
    with pytest.raises(InvalidArgumentError):
        described.prompt.object_for(3)


def test_half_turn_threshold_tags_antiparallel_rays_view_dependent():
    cfg = DescribeConfig(vi_vd_mode='adaptive', angular_threshold_deg=180.0)
    records = {(0, 0): [{'direction': np.array([-1.0000000000000002, 0.0, 0.0])},
                        {'direction': np.array([1.0, 0.0, 0.0])}]}
    _tag_tokens(records, np.array([1.0, 0.0, 0.0]), cfg)
    assert [r['tag'] for r in records[(0, 0)]] == ['VD', 'VD']


@settings(max_examples=1000)
@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-2, 2)), min_size=1, max_size=12),
       st.floats(0.001, 0.999))
def test_radar_order_matches_brute_force_sort(points, sweep_lambda):
    centroids = np.array(points, dtype=np.float64)
    result = radar_order(centroids, center=np.zeros(3), sweep_lambda=sweep_lambda)

    radii = [np.hypot(x, y) for x, y, _ in centroids]
    max_radius = max(radii)

    def key(i):
        x, y, _ = centroids[i]
        theta = 0.0 if radii[i] == 0 else np.mod(np.arctan2(y, x), 2.0 * math.pi)
        sweep = sweep_lambda * radii[i] / max_radius if max_radius > 0 else 0.0
        return (theta + sweep, radii[i], i)

    assert result.order == sorted(range(len(centroids)), key=key)
