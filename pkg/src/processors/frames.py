"""Supervision frame selection: blur filtering and greedy pose-space coverage."""
from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from config_loader import get_config
from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

_LUMA = np.array([0.299, 0.587, 0.114])


class FrameConfig(BaseModel):
    beta: float = Field(default=0.5, ge=0.0)
    feature_views: int = Field(default=400, ge=1)
    blur_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    border_crop: int = Field(default=0, ge=0)

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'FrameConfig':
        config = config or get_config()
        values = config.get_dict('frames')
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] >= 3:
        return image[..., :3] @ _LUMA
    if image.ndim == 3:
        return image.mean(axis=-1)
    return image


def blur_score(image: np.ndarray, border_crop: int = 0) -> float:
    """Sharpness as the variance of the 3x3 Laplacian of the grayscale image.

    Args:
        image (np.ndarray): H x W or H x W x C image.
        border_crop (int): Pixels removed from every side before scoring.

    Returns:
        float: Laplacian variance; higher means sharper.

    Raises:
        InvalidArgumentError: If the (cropped) image is smaller than 3 x 3.
    """
    gray = _grayscale(image)
    if border_crop > 0:
        gray = gray[border_crop:-border_crop, border_crop:-border_crop]
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise InvalidArgumentError(f"blur_score needs an image of at least 3x3 pixels, got {gray.shape}")
    return float(np.var(ndimage.laplace(gray, mode='nearest')))


def filter_blurred(images: Sequence[np.ndarray], fraction: float, border_crop: int = 0) -> List[int]:
    """Indices of images kept after dropping the floor(fraction * N) blurriest.

    Among equal scores the higher index is dropped first, so lower indices are
    retained. The result is in ascending index order.

    Raises:
        InvalidArgumentError: If fraction is outside [0, 1).
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidArgumentError(f"Blur fraction must lie in [0, 1), got {fraction}")
    n = len(images)
    drop = int(math.floor(fraction * n))
    if drop == 0:
        return list(range(n))
    scores = [blur_score(image, border_crop) for image in images]
    order = sorted(range(n), key=lambda i: (scores[i], -i))
    dropped = set(order[:drop])
    logger.info(f"Blur filter dropped {drop} of {n} images")
    return [i for i in range(n) if i not in dropped]


def _quaternions(poses) -> np.ndarray:
    quats = np.array([p.orientation for p in poses], dtype=np.float64)
    return quats / np.linalg.norm(quats, axis=-1, keepdims=True)


def _angles(q_a: np.ndarray, q_b: np.ndarray) -> np.ndarray:
    dot = np.clip(np.abs(q_a @ q_b.T), 0.0, 1.0)
    return 2.0 * np.arccos(dot)


def pose_dissimilarity(a, b, diag: float = 1.0, beta: float = 0.5) -> float:
    """Normalized translation distance plus `beta` times the geodesic rotation angle over pi.

    Args:
        a, b: Camera poses.
        diag (float): Diagonal of the scene bounds used to normalize translation.
        beta (float): Weight of the rotational term.
    """
    if diag <= 0:
        raise InvalidArgumentError(f"Normalizing diagonal must be positive, got {diag}")
    translation = float(np.linalg.norm(np.asarray(a.position) - np.asarray(b.position)))
    angle = float(_angles(_quaternions([a]), _quaternions([b]))[0, 0])
    return translation / diag + beta * angle / math.pi


def dissimilarity_matrix(poses, diag: float = 1.0, beta: float = 0.5) -> np.ndarray:
    """Symmetric N x N matrix of `pose_dissimilarity` values with a zero diagonal."""
    positions = np.array([p.position for p in poses], dtype=np.float64)
    quats = _quaternions(poses)
    translation = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    matrix = translation / diag + beta * _angles(quats, quats) / math.pi
    np.fill_diagonal(matrix, 0.0)
    return 0.5 * (matrix + matrix.T)


def bounds_diagonal(bounds) -> float:
    """Length of the diagonal of an axis-aligned `(lo, hi)` box.

    Raises:
        InvalidArgumentError: If the box is degenerate.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise InvalidArgumentError(f"Scene bounds {lo.tolist()} / {hi.tolist()} have no extent")
    return diag


def select_frames(poses, k: int, diag: float = 1.0, beta: float = 0.5,
                  matrix: Optional[np.ndarray] = None) -> List[int]:
    """Greedy farthest-point selection of k poses.

    The pose nearest the centroid of all camera positions anchors the search:
    for k = 1 it is the answer; otherwise the first pick is the pose most
    dissimilar from the anchor, and every further pick maximizes the minimum
    dissimilarity to the poses already chosen. Ties go to the lowest index.

    Args:
        poses: Candidate camera poses.
        k (int): Number of frames to select, 1 <= k <= N.
        diag (float): Translation normalizer.
        beta (float): Rotation weight.
        matrix (np.ndarray, optional): Precomputed dissimilarity matrix.

    Returns:
        List[int]: Selected indices in selection order.

    Raises:
        InvalidArgumentError: If k is outside [1, N].
    """
    n = len(poses)
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"Cannot select k={k} frames from {n} poses")
    positions = np.array([p.position for p in poses], dtype=np.float64)
    anchor = int(np.argmin(np.linalg.norm(positions - positions.mean(axis=0), axis=-1)))
    if k == 1:
        return [anchor]

    d = dissimilarity_matrix(poses, diag, beta) if matrix is None else matrix
    first = int(np.argmax(d[anchor]))
    selected = [first]
    nearest = d[first].copy()
    chosen = np.zeros(n, dtype=bool)
    chosen[first] = True
    while len(selected) < k:
        candidates = np.where(chosen, -np.inf, nearest)
        pick = int(np.argmax(candidates))
        selected.append(pick)
        chosen[pick] = True
        nearest = np.minimum(nearest, d[pick])
    logger.debug(f"Selected {k} of {n} frames (anchor {anchor})")
    return selected


def uniform_stride(n: int, k: int) -> List[int]:
    """Baseline selection of k indices at a uniform stride over n frames."""
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"Cannot select k={k} frames from {n} poses")
    return [int(i * n // k) for i in range(k)]


def min_pairwise_dissimilarity(matrix: np.ndarray, indices: Sequence[int]) -> float:
    """Smallest dissimilarity between two distinct selected poses; inf for fewer than two."""
    indices = list(indices)
    if len(indices) < 2:
        return math.inf
    sub = matrix[np.ix_(indices, indices)].copy()
    np.fill_diagonal(sub, np.inf)
    return float(sub.min())
