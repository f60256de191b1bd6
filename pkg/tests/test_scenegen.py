import math

import numpy as np
import pytest

from errors import InvalidArgumentError, SceneValidationError
from processors.scenegen import (SCALE_INDEX, CameraPose, Primitive, SceneSpec, TeacherOutputs, build_scene,
                                 make_trajectory, preset_scene, render_teacher_views)


def _shift_object(data: dict, index: int, dx: float):
    def moved(primitive):
        center = list(primitive['center'])
        center[0] += dx
        primitive['center'] = center

    obj = data['objects'][index]
    moved(obj['primitive'])
    for part in obj['parts']:
        moved(part['primitive'])
        for sub in part['subparts']:
            moved(sub['primitive'])


def test_presets_have_three_level_hierarchies(config):
    for name, n_objects in (('one-sphere', 1), ('two-objects', 2), ('five-objects', 5)):
        spec = preset_scene(name, config=config)
        oracle = build_scene(spec, config)
        assert len(spec.objects) == n_objects
        assert len(oracle.part_ids) == 2 * n_objects
        assert len(oracle.subpart_ids) == 4 * n_objects


def test_unknown_preset_is_rejected(config):
    with pytest.raises(InvalidArgumentError):
        preset_scene('three-teapots', config=config)


def test_overlapping_objects_are_rejected(two_objects, config):
    spec, _ = two_objects
    data = spec.model_dump()
    _shift_object(data, 1, -0.4)
    with pytest.raises(SceneValidationError, match='overlap'):
        build_scene(SceneSpec.model_validate(data), config)


def test_nearby_objects_are_accepted(two_objects, config):
    spec, _ = two_objects
    data = spec.model_dump()
    _shift_object(data, 1, -0.3)
    build_scene(SceneSpec.model_validate(data), config)


def test_duplicate_object_ids_are_rejected(two_objects, config):
    spec, _ = two_objects
    data = spec.model_dump()
    data['objects'][1]['id'] = 0
    with pytest.raises(SceneValidationError, match='Duplicate object'):
        build_scene(SceneSpec.model_validate(data), config)


def test_part_outside_its_object_is_rejected(two_objects, config):
    spec, _ = two_objects
    data = spec.model_dump()
    data['objects'][0]['parts'][0]['primitive']['center'] = [0.5, 0.0, 0.0]
    with pytest.raises(SceneValidationError, match='not nested'):
        build_scene(SceneSpec.model_validate(data), config)


def test_sphere_extent_must_be_isotropic():
    with pytest.raises(ValueError):
        Primitive(kind='sphere', center=(0, 0, 0), extent=(0.1, 0.2, 0.1))


def test_density_is_piecewise_constant(two_objects):
    _, oracle = two_objects
    density = oracle.density(np.array([[-0.5, 0.0, 0.0], [0.5, 0.1, 0.1], [0.0, 0.9, 0.9]]))
    np.testing.assert_allclose(density, [oracle.density_inside, oracle.density_inside, 0.0])


def test_token_splits_into_base_and_directional_part(two_objects):
    spec, oracle = two_objects
    point = np.array([[-0.5, 0.0, 0.0]])
    d = np.array([spec.objects[0].vd_axis])
    forward = oracle.token(point, d)[0]
    backward = oracle.token(point, -d)[0]
    np.testing.assert_allclose(0.5 * (forward + backward), oracle.base_token(0))
    assert not np.allclose(forward, backward)


def test_static_scene_tokens_ignore_direction(config):
    spec = preset_scene('two-objects', view_dependent=False, config=config)
    oracle = build_scene(spec, config)
    point = np.array([[0.5, 0.0, 0.0]])
    np.testing.assert_allclose(oracle.token(point, np.array([[1.0, 0.0, 0.0]])),
                               oracle.token(point, np.array([[0.0, 0.0, -1.0]])))


def test_token_is_zero_in_empty_space(two_objects):
    _, oracle = two_objects
    token = oracle.token(np.array([[0.0, 0.9, 0.9]]), np.array([[1.0, 0.0, 0.0]]))
    assert np.all(token == 0)


def test_instance_ids_follow_the_hierarchy(two_objects):
    _, oracle = two_objects
    points = np.array([[-0.5, 0.1, 0.1], [0.6, 0.0, -0.2], [0.0, 0.9, 0.9]])
    ids = oracle.instance_ids(points)
    for small, medium, large in ids[:2]:
        assert oracle.parent_tables['small'][int(small)] == medium
        assert oracle.parent_tables['medium'][int(medium)] == large
    assert ids[0, SCALE_INDEX['large']] == 0
    assert ids[1, SCALE_INDEX['large']] == 1
    assert ids[2].tolist() == [-1, -1, -1]


def test_derived_sibling_labels_have_the_configured_cosine(two_objects):
    _, oracle = two_objects
    parts = [oracle.label_tables['medium'][p] for p in (0, 1)]
    cosine = parts[0] @ parts[1] / (np.linalg.norm(parts[0]) * np.linalg.norm(parts[1]))
    assert cosine == pytest.approx(0.8, abs=1e-9)


def test_first_hit_distance(two_objects):
    _, oracle = two_objects
    t_hit, hit = oracle.first_hit(np.array([[-3.0, 0.0, 0.0], [-3.0, 0.0, 0.9]]),
                                  np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    assert hit.tolist() == [True, False]
    assert t_hit[0] == pytest.approx(2.15)


def test_trajectory_orbits_and_faces_the_center(two_objects, config):
    spec, _ = two_objects
    poses = make_trajectory(spec, 6, config)
    assert len(poses) == 6
    for pose in poses:
        position = np.asarray(pose.position)
        assert np.linalg.norm(position) == pytest.approx(2.0 * math.sqrt(3.0))
        assert pose.forward @ (-position / np.linalg.norm(position)) == pytest.approx(1.0)
        assert pose.resolution == (24, 24)


def test_trajectory_needs_a_pose(two_objects, config):
    spec, _ = two_objects
    with pytest.raises(InvalidArgumentError):
        make_trajectory(spec, 0, config)


def test_camera_pose_requires_unit_quaternion():
    with pytest.raises(InvalidArgumentError):
        CameraPose((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 2.0), 1.0, (8, 8))


def test_teacher_views_are_consistent(two_objects, poses, config):
    _, oracle = two_objects
    teacher = render_teacher_views(oracle, poses[:3], config)
    assert teacher.rgb.shape == (3, 24, 24, 3)
    assert teacher.tokens.shape == (3, 8, 8, oracle.token_dim)
    assert teacher.instances.shape == (3, 3, 24, 24)

    objects = teacher.instances[:, SCALE_INDEX['large']]
    assert np.all(objects[teacher.depth == 0] == -1)
    assert (objects >= 0).any()

    small = teacher.instances[:, SCALE_INDEX['small']]
    medium = teacher.instances[:, SCALE_INDEX['medium']]
    covered = small >= 0
    parents = np.vectorize(lambda s: oracle.parent_tables['small'][int(s)])(small[covered])
    np.testing.assert_array_equal(parents, medium[covered])

    masks = teacher.masks(0, 'medium')
    stacked = np.sum([mask for _, mask in masks], axis=0)
    assert stacked.max() <= 1


def test_teacher_outputs_persist(two_objects, poses, config, tmp_path):
    _, oracle = two_objects
    teacher = render_teacher_views(oracle, poses[:2], config)
    teacher.save(tmp_path / 'teacher')
    loaded = TeacherOutputs.load(tmp_path / 'teacher')
    np.testing.assert_array_equal(loaded.instances, teacher.instances)
    assert loaded.token_grid == 8
    assert loaded.poses == teacher.poses
    np.testing.assert_allclose(loaded.label_tables['small'][0], teacher.label_tables['small'][0], atol=1e-6)


def test_render_needs_poses(two_objects, config):
    _, oracle = two_objects
    with pytest.raises(InvalidArgumentError):
        render_teacher_views(oracle, [], config)
