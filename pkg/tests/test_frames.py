import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import InvalidArgumentError
from processors.frames import (FrameConfig, blur_score, bounds_diagonal, dissimilarity_matrix, filter_blurred,
                               min_pairwise_dissimilarity, pose_dissimilarity, select_frames, uniform_stride)
from processors.scenegen import CameraPose

IDENTITY = (0.0, 0.0, 0.0, 1.0)


def _line_poses(xs):
    return [CameraPose((float(x), 0.0, 0.0), IDENTITY, 1.0, (4, 4)) for x in xs]


def _checkerboard(size=16):
    return (np.indices((size, size)).sum(axis=0) % 2).astype(np.float64)


def test_blur_score_prefers_sharp_images():
    sharp = _checkerboard()
    flat = np.full((16, 16), 0.5)
    assert blur_score(sharp) > blur_score(flat)
    assert blur_score(flat) == 0.0


def test_blur_score_accepts_color_images():
    image = np.repeat(_checkerboard()[..., None], 3, axis=-1)
    assert blur_score(image) == pytest.approx(blur_score(_checkerboard()))


def test_blur_score_rejects_tiny_images():
    with pytest.raises(InvalidArgumentError):
        blur_score(np.zeros((2, 5)))
    with pytest.raises(InvalidArgumentError):
        blur_score(np.zeros((6, 6)), border_crop=2)


def test_filter_blurred_drops_the_blurriest():
    images = [_checkerboard(), np.full((16, 16), 0.2), _checkerboard(), np.full((16, 16), 0.7)]
    assert filter_blurred(images, 0.5) == [0, 2]


def test_filter_blurred_ties_drop_higher_indices():
    flat = np.full((8, 8), 0.3)
    assert filter_blurred([flat, flat, flat], 0.34) == [0, 1]


def test_filter_blurred_zero_fraction_keeps_everything():
    assert filter_blurred([np.zeros((2, 2))] * 3, 0.0) == [0, 1, 2]


@pytest.mark.parametrize('fraction', [-0.1, 1.0])
def test_filter_blurred_rejects_bad_fraction(fraction):
    with pytest.raises(InvalidArgumentError):
        filter_blurred([_checkerboard()], fraction)


def test_pose_dissimilarity_combines_translation_and_rotation():
    a = CameraPose((0.0, 0.0, 0.0), IDENTITY, 1.0, (4, 4))
    half_turn = CameraPose((2.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0), 1.0, (4, 4))
    assert pose_dissimilarity(a, half_turn, diag=4.0, beta=0.0) == pytest.approx(0.5)
    assert pose_dissimilarity(a, half_turn, diag=4.0, beta=0.5) == pytest.approx(1.0)


def test_dissimilarity_matrix_is_symmetric_with_zero_diagonal(two_objects, poses):
    diag = bounds_diagonal(two_objects[0].bounds)
    matrix = dissimilarity_matrix(poses, diag)
    assert matrix.shape == (8, 8)
    np.testing.assert_allclose(matrix, matrix.T)
    np.testing.assert_allclose(np.diag(matrix), 0.0)
    assert matrix[0, 3] == pytest.approx(pose_dissimilarity(poses[0], poses[3], diag))


def test_select_frames_greedy_farthest_point():
    poses = _line_poses([0, 1, 2, 3, 10])
    assert select_frames(poses, 3, diag=1.0, beta=0.0) == [4, 0, 3]


def test_select_single_frame_returns_anchor():
    poses = _line_poses([0, 1, 2, 3, 10])
    assert select_frames(poses, 1, diag=1.0, beta=0.0) == [3]


@pytest.mark.parametrize('k', [0, 6])
def test_select_frames_rejects_bad_k(k):
    with pytest.raises(InvalidArgumentError):
        select_frames(_line_poses([0, 1, 2, 3, 10]), k)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5.0, 5.0), min_size=2, max_size=12, unique=True), st.data())
def test_selection_is_distinct_and_sized(xs, data):
    poses = _line_poses(xs)
    k = data.draw(st.integers(1, len(xs)))
    chosen = select_frames(poses, k, diag=bounds_diagonal(((-5.0, -1.0, -1.0), (5.0, 1.0, 1.0))), beta=0.0)
    assert len(chosen) == k
    assert len(set(chosen)) == k


def test_uniform_stride():
    assert uniform_stride(10, 3) == [0, 3, 6]
    assert uniform_stride(4, 4) == [0, 1, 2, 3]


def test_min_pairwise_dissimilarity_single_index_is_inf():
    assert min_pairwise_dissimilarity(np.zeros((3, 3)), [1]) == math.inf


def test_bounds_diagonal():
    assert bounds_diagonal(((0.0, 0.0, 0.0), (3.0, 4.0, 0.0))) == pytest.approx(5.0)
    with pytest.raises(InvalidArgumentError):
        bounds_diagonal(((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)))


def test_frame_config_reads_config(config):
    config.set('frames.beta', 0.25)
    assert FrameConfig.from_config(config).beta == 0.25
