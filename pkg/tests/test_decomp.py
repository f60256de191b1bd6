import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import InvalidArgumentError
from processors.decomp import (NOISE, UNASSIGNED, DecompConfig, RayObservations, RefineParams, ScaleClusterParams,
                               Segment, SegmentGraph, SceneDecomposer, assign_point, assign_points, build_hierarchy,
                               cluster_scale, compute_centroids, nearest_segment, observe_rays, refine_segments,
                               sample_view_rays)
from processors.oracle import OracleSegmentModel
from processors.scenegen import SCALES

PARAMS = ScaleClusterParams(min_cluster_size=10, min_samples=3, cluster_selection_epsilon=0.01)


def _observations(labels, embeddings, label_vectors):
    n = len(labels['small'])
    return RayObservations(
        embeddings={s: np.asarray(embeddings[s], dtype=np.float64) for s in SCALES},
        label_vectors={s: np.asarray(label_vectors[s], dtype=np.float64) for s in SCALES},
        points=np.zeros((n, 3)),
        directions=np.tile([1.0, 0.0, 0.0], (n, 1)),
        labels={s: np.asarray(labels[s], dtype=np.int64) for s in SCALES},
    )


def _graph(centroids):
    return SegmentGraph({
        'small': {},
        'medium': {},
        'large': {i: Segment(i, 'large', 1, np.asarray(c, dtype=np.float64), np.zeros(2)) for i, c in centroids.items()},
    })


def test_two_blobs_give_two_clusters():
    rng = np.random.default_rng(0)
    embeddings = np.concatenate([rng.normal(0.0, 0.05, (60, 2)), rng.normal(10.0, 0.05, (60, 2))])
    result = cluster_scale(embeddings, PARAMS)
    first = set(result.labels[:60].tolist()) - {NOISE}
    second = set(result.labels[60:].tolist()) - {NOISE}
    assert len(first) == len(second) == 1
    assert first != second
    assert np.all((result.confidences >= 0) & (result.confidences <= 1))


def test_too_few_points_are_noise():
    result = cluster_scale(np.random.default_rng(1).normal(size=(5, 3)), PARAMS)
    assert np.all(result.labels == NOISE)
    assert np.all(result.confidences == 0)


def test_identical_points_form_one_cluster():
    result = cluster_scale(np.ones((20, 4)), PARAMS)
    assert np.all(result.labels == 0)
    assert np.all(result.confidences == 1)


def test_centroids_are_confidence_weighted():
    result = compute_centroids(np.array([[0.0], [2.0], [10.0]]), np.array([0, 0, 1]), np.array([1.0, 3.0, 0.0]))
    np.testing.assert_allclose(result.centroids[0], [1.5])
    np.testing.assert_allclose(result.centroids[1], [10.0])
    assert result.fallback == [1]


def test_centroids_need_a_cluster():
    with pytest.raises(InvalidArgumentError):
        compute_centroids(np.zeros((2, 2)), np.array([NOISE, NOISE]), np.ones(2))


def test_hierarchy_links_by_co_occurrence():
    graph = build_hierarchy({
        'small': np.array([0, 0, 1, 1, 2, NOISE]),
        'medium': np.array([0, 0, 0, 1, 1, 1]),
        'large': np.zeros(6, dtype=np.int64),
    })
    assert graph.children('medium', 0) == [0, 1]
    assert graph.children('medium', 1) == [2]
    assert graph.children('large', 0) == [0, 1]
    assert graph.objects() == [0]
    assert graph.segment('small', 1).parent == 0
    assert graph.children('small', 0) == []


def test_orphan_segment_hangs_under_unassigned_root():
    graph = build_hierarchy({
        'small': np.array([0, 0, 1]),
        'medium': np.array([NOISE, NOISE, 4]),
        'large': np.array([NOISE, NOISE, 7]),
    })
    orphan = graph.segment('small', 0)
    assert orphan.parent == UNASSIGNED
    assert 'unassigned_parent' in orphan.flags
    assert graph.segment('small', 1).parent == 4


def test_hierarchy_with_observations_fills_centroids():
    labels = {'small': [0, 0, 1], 'medium': [0, 0, 0], 'large': [0, 0, 0]}
    embeddings = {s: [[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]] for s in SCALES}
    label_vectors = {s: [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]] for s in SCALES}
    observations = _observations(labels, embeddings, label_vectors)
    observations.points = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 4.0]])
    graph = build_hierarchy(observations.labels, observations)
    small = graph.segment('small', 0)
    np.testing.assert_allclose(small.centroid, [1.0, 0.0])
    np.testing.assert_allclose(small.spatial_centroid, [1.0, 0.0, 0.0])
    assert small.members == 2
    assert graph.segment('large', 0).confidence_mean == 1.0


def test_missing_segment_raises():
    with pytest.raises(InvalidArgumentError):
        _graph({0: [0.0]}).segment('large', 3)


def test_graph_survives_json(tmp_path):
    graph = _graph({0: [0.0, 1.0], 2: [3.0, 4.0]})
    graph.metadata['objects'] = {'2': {'canonical_direction': [0.0, 0.0, 1.0]}}
    loaded = SegmentGraph.load(graph.save(tmp_path / 'graph.json'))
    assert loaded.objects() == [0, 2]
    np.testing.assert_allclose(loaded.segment('large', 2).centroid, [3.0, 4.0])
    assert loaded.metadata == graph.metadata


def test_refine_merges_segments_with_matching_labels():
    n = 24
    labels = {'small': np.repeat([0, 1], 12), 'medium': np.full(n, NOISE), 'large': np.full(n, NOISE)}
    embeddings = {s: np.repeat([[0.0, 0.0], [3.0, 1.0]], 12, axis=0) for s in SCALES}
    label_vectors = {s: np.tile([1.0, 0.0], (n, 1)) for s in SCALES}
    report = refine_segments(_observations(labels, embeddings, label_vectors), RefineParams())
    assert report.merged['small'] == [(0, [1])]
    assert np.all(report.labels['small'] == 0)


def test_refine_drops_small_segments():
    counts = [12, 3]
    n = sum(counts)
    labels = {'small': np.repeat([0, 1], counts), 'medium': np.full(n, NOISE), 'large': np.full(n, NOISE)}
    embeddings = {s: np.repeat([[0.0, 0.0], [5.0, 5.0]], counts, axis=0) for s in SCALES}
    label_vectors = {s: np.repeat([[1.0, 0.0], [0.0, 1.0]], counts, axis=0) for s in SCALES}
    report = refine_segments(_observations(labels, embeddings, label_vectors), RefineParams())
    assert report.dropped['small'] == [1]
    assert np.all(report.labels['small'][12:] == NOISE)


def test_refine_splits_coarse_segment_with_unrelated_children():
    n = 20
    labels = {'small': np.repeat([0, 1], 10), 'medium': np.zeros(n, dtype=np.int64), 'large': np.full(n, NOISE)}
    halves = np.repeat([[0.0, 0.0], [1.0, 1.0]], 10, axis=0)
    orthogonal = np.repeat([[1.0, 0.0], [0.0, 1.0]], 10, axis=0)
    report = refine_segments(_observations(labels, {s: halves for s in SCALES}, {s: orthogonal for s in SCALES}),
                             RefineParams())
    assert report.split['medium'] == [(0, [0, 1])]
    np.testing.assert_array_equal(report.labels['medium'], np.repeat([0, 1], 10))
    assert report.merged['medium'] == []


def test_refine_keeps_input_when_everything_would_go():
    n = 4
    labels = {'small': np.zeros(n, dtype=np.int64), 'medium': np.full(n, NOISE), 'large': np.full(n, NOISE)}
    observations = _observations(labels, {s: np.zeros((n, 2)) for s in SCALES},
                                 {s: np.ones((n, 2)) for s in SCALES})
    report = refine_segments(observations, RefineParams())
    assert report.reverted
    np.testing.assert_array_equal(report.labels['small'], labels['small'])


def test_refine_disabled_is_identity():
    labels = {'small': np.array([0, 1]), 'medium': np.array([0, 0]), 'large': np.array([0, 0])}
    observations = _observations(labels, {s: np.eye(2) for s in SCALES}, {s: np.eye(2) for s in SCALES})
    report = refine_segments(observations, RefineParams(enabled=False))
    assert not report.changed
    np.testing.assert_array_equal(report.labels['small'], [0, 1])

def test_refine_merges_segments_with_matching_embeddings():
    n = 24
    labels = {'small': np.repeat([0, 1], 12), 'medium': np.full(n, NOISE), 'large': np.full(n, NOISE)}
    embeddings = {s: np.repeat([[1.0, 0.0], [1.0, 0.02]], 12, axis=0) for s in SCALES}
    label_vectors = {s: np.repeat([[1.0, 0.0], [0.0, 1.0]], 12, axis=0) for s in SCALES}
    report = refine_segments(_observations(labels, embeddings, label_vectors), RefineParams())
    assert report.merged['small'] == [(0, [1])]
    assert np.all(report.labels['small'] == 0)


def _spread_segments(spreads):
    """12 rays per segment: label vector e_i pushed +/- spread along the last axis, so variance is spread**2."""
    n_segments = len(spreads)
    dim = n_segments + 1
    rows = []
    for i, spread in enumerate(spreads):
        for sign in (1.0, -1.0) * 6:
            row = np.zeros(dim)
            row[i] = 1.0
            row[-1] = sign * spread
            rows.append(row)
    vectors = np.array(rows)
    n = len(vectors)
    labels = {'small': np.repeat(np.arange(n_segments), 12), 'medium': np.full(n, NOISE), 'large': np.full(n, NOISE)}
    return _observations(labels, {s: vectors for s in SCALES}, {s: vectors for s in SCALES})


def test_refine_drops_segment_above_variance_percentile():
    observations = _spread_segments([0.1 * (i + 1) for i in range(7)])
    report = refine_segments(observations, RefineParams())
    # 85th percentile of 0.01..0.49 lies between 0.36 and 0.49, above the 0.12 floor
    assert report.variance_cutoffs['small'] == pytest.approx(0.373)
    assert report.dropped['small'] == [6]
    assert np.all(report.labels['small'][72:] == NOISE)
    assert report.merged['small'] == []
    assert report.passes == 2


def test_refine_keeps_segments_below_variance_floor():
    observations = _spread_segments([0.01 * (i + 1) for i in range(7)])
    report = refine_segments(observations, RefineParams())
    assert report.variance_cutoffs['small'] == pytest.approx(0.1 * (1.0 + np.mean([(0.01 * (i + 1)) ** 2
                                                                                  for i in range(7)])))
    assert not report.changed


def test_second_refinement_reuses_recorded_cutoffs():
    observations = _spread_segments([0.1 * (i + 1) for i in range(7)])
    first = refine_segments(observations, RefineParams())
    assert observations.variance_cutoffs == first.variance_cutoffs
    observations.labels = first.labels
    second = refine_segments(observations, RefineParams())
    assert not second.changed
    np.testing.assert_array_equal(second.labels['small'], first.labels['small'])


def test_refine_does_not_merge_what_it_would_split_again():
    n = 40
    small = np.repeat([0, 1, 2, 3], 10)
    labels = {'small': small, 'medium': np.repeat([0, 1], 20), 'large': np.full(n, NOISE)}
    # medium 0 holds children 0 and 1 (same label), medium 1 holds 2 and 3 (same label);
    # medium label centroids match, but the union's children are unrelated
    small_vectors = np.repeat([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], 10, axis=0)
    medium_vectors = np.tile([1.0, 1.0], (n, 1))
    embeddings = {s: np.repeat(np.eye(4), 10, axis=0) for s in SCALES}
    label_vectors = {'small': small_vectors, 'medium': medium_vectors, 'large': medium_vectors}
    report = refine_segments(_observations(labels, embeddings, label_vectors), RefineParams())
    assert report.merged['medium'] == []
    np.testing.assert_array_equal(report.labels['medium'], labels['medium'])


@settings(max_examples=40)
@given(st.integers(0, 2 ** 16), st.integers(30, 90))
def test_refinement_is_a_fixed_point(seed, n):
    rng = np.random.default_rng(seed)
    counts = {'small': 6, 'medium': 3, 'large': 2}
    labels = {s: rng.integers(-1, counts[s], n) for s in SCALES}
    label_vectors = {}
    for s in SCALES:
        prototypes = rng.normal(size=(counts[s], 4))
        label_vectors[s] = prototypes[np.maximum(labels[s], 0)] + rng.uniform(0.0, 0.8) * rng.normal(size=(n, 4))
    embeddings = {s: rng.normal(size=(n, 3)) for s in SCALES}

    first = refine_segments(_observations(labels, embeddings, label_vectors), RefineParams())
    second = refine_segments(_observations(first.labels, embeddings, label_vectors), RefineParams(),
                             cutoffs=first.variance_cutoffs)
    assert not second.changed
    for scale in SCALES:
        np.testing.assert_array_equal(second.labels[scale], first.labels[scale])


def test_nearest_segment_breaks_ties_to_lowest_id():
    graph = _graph({3: [0.0], 1: [2.0]})
    assert nearest_segment(graph, np.array([[1.0]]), 'large').tolist() == [1]
    assert nearest_segment(graph, np.array([[-1.0], [5.0]]), 'large').tolist() == [3, 1]


def test_nearest_segment_needs_segments():
    with pytest.raises(InvalidArgumentError):
        nearest_segment(_graph({}), np.zeros((1, 1)), 'large')


def test_points_are_assigned_to_their_primitives(two_objects, oracle_stack):
    _, oracle = two_objects
    _, segments, graph = oracle_stack
    points = np.array([[-0.5, 0.1, 0.1], [0.6, 0.0, -0.2], [0.45, -0.1, 0.2]])
    for scale in SCALES:
        expected = oracle.instance_ids(points)[:, SCALES.index(scale)]
        np.testing.assert_array_equal(assign_points(graph, segments, points, scale), expected)
    far_away = assign_point(graph, segments, [0.0, 0.0, 5.0], 'large')
    assert far_away.clamped
    assert far_away.segment_id in graph.objects()


def test_view_rays_are_clipped_and_seeded(two_objects, poses):
    _, oracle = two_objects
    a = sample_view_rays(poses, oracle.bounds, 200, seed=4)
    b = sample_view_rays(poses, oracle.bounds, 200, seed=4)
    np.testing.assert_array_equal(a['origins'], b['origins'])
    assert len(a['views']) == len(a['index'])
    assert np.all(a['far'] > a['near'])


def test_observed_rays_land_on_surfaces(two_objects, poses):
    _, oracle = two_objects
    rays = sample_view_rays(poses, oracle.bounds, 300, seed=0)
    observations = observe_rays(OracleSegmentModel(oracle), rays, 0.5)
    assert 0 < len(observations) <= 300
    assert np.all(oracle.object_at(observations.points) >= 0)


def test_decomposition_recovers_the_objects(two_objects, poses):
    _, oracle = two_objects
    decomposer = SceneDecomposer(DecompConfig(n_rays=4000))
    result = decomposer.decompose(OracleSegmentModel(oracle), poses)
    graph = result.graph
    assert len(graph.objects()) == 2
    xs = sorted(float(graph.segment('large', i).spatial_centroid[0]) for i in graph.objects())
    assert xs[0] < 0 < xs[1]
    for part in graph.ids('medium'):
        assert graph.segment('medium', part).parent in graph.objects()
    assert graph.metadata['rays'] == len(result.observations)
