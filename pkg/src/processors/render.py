"""Ray generation, stratified sampling and volume-rendering compositing.

Everything here is stateless. Batched functions operate on torch tensors with
arbitrary leading ray dimensions and samples on the last axis, so the same code
serves field training (autograd), rendering and feature extraction. Numpy
inputs are accepted and answered with numpy outputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DIRECTION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Ray:
    """A single camera ray.

    Attributes:
        origin (np.ndarray): 3-vector in world units.
        direction (np.ndarray): Unit 3-vector.
        near (float): Start of the sampled interval.
        far (float): End of the sampled interval.
        view_id (int): Index of the source view, -1 if synthetic.
        pixel (Tuple[float, float]): (row, col) pixel coordinate in the source view.
    """

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    view_id: int = -1
    pixel: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > DIRECTION_TOLERANCE:
            raise InvalidArgumentError(f"Ray direction must be unit length, got norm {np.linalg.norm(direction):.8f}")
        if not self.near < self.far:
            raise InvalidArgumentError(f"Ray requires near < far, got near={self.near} far={self.far}")
        object.__setattr__(self, 'origin', origin)
        object.__setattr__(self, 'direction', direction)


@dataclass
class RaySamples:
    """Samples along one ray (or a batch of rays on the leading axes).

    Attributes:
        t (array): Distances of the samples along the ray, ascending.
        deltas (array): Interval lengths, all positive.
        positions (array): Sample positions, shape (..., N, 3).
        densities (array, optional): Density at each sample.
        values (array, optional): Per-sample values, shape (..., N, D).
    """

    t: object
    deltas: object
    positions: object
    densities: object = None
    values: object = None


@dataclass
class RenderResult:
    """Output of compositing along rays.

    Attributes:
        value: Weighted sum of sample values, shape (..., D).
        opacity: Accumulated opacity, the sum of weights.
        depth: Expected depth, the weight-averaged sample distance (unnormalized).
        weights: Per-sample compositing weights.
    """

    value: object
    opacity: object
    depth: object
    weights: object


def _to_tensor(x, dtype=None) -> Tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return (x if dtype is None else x.to(dtype)), False
    arr = np.asarray(x)
    tensor = torch.from_numpy(np.ascontiguousarray(arr))
    if dtype is not None:
        tensor = tensor.to(dtype)
    return tensor, True


def _back(x: torch.Tensor, as_numpy: bool):
    return x.detach().cpu().numpy() if as_numpy else x


def stratified_samples(near, far, n: int, generator: Optional[torch.Generator] = None):
    """Stratified uniform sample distances on [near, far] for a batch of rays.

    Without a generator, samples sit at bin midpoints. With a generator, each
    sample is drawn uniformly inside its bin.

    Args:
        near: Tensor of shape (...,) with interval starts.
        far: Tensor of shape (...,) with interval ends.
        n (int): Samples per ray.
        generator (torch.Generator, optional): Source of jitter.

    Returns:
        Tuple[Tensor, Tensor]: Distances `t` and interval lengths `deltas`, both
            of shape (..., n). `deltas[i] = t[i+1] - t[i]` and the last interval
            is `(far - near) / n`.

    Raises:
        InvalidArgumentError: If n < 1.
    """
    if n < 1:
        raise InvalidArgumentError(f"Sample count must be >= 1, got {n}")
    near, as_numpy = _to_tensor(near)
    far, _ = _to_tensor(far, near.dtype)
    span = (far - near).unsqueeze(-1)
    bins = torch.arange(n, dtype=near.dtype, device=near.device)
    if generator is None:
        offsets = torch.full(span.shape[:-1] + (n,), 0.5, dtype=near.dtype)
    else:
        offsets = torch.rand(span.shape[:-1] + (n,), generator=generator, dtype=near.dtype)
    t = near.unsqueeze(-1) + span * (bins + offsets) / n
    deltas = torch.cat([t[..., 1:] - t[..., :-1], span / n], dim=-1)
    return _back(t, as_numpy), _back(deltas, as_numpy)


def sample_ray(ray: Ray, n: int, generator: Optional[torch.Generator] = None) -> RaySamples:
    """Stratified uniform samples along a single ray.

    Args:
        ray (Ray): The ray to sample.
        n (int): Number of samples.
        generator (torch.Generator, optional): Jitter source; midpoints when None.

    Returns:
        RaySamples: Distances, deltas and positions (numpy, float64).
    """
    t, deltas = stratified_samples(np.array([ray.near]), np.array([ray.far]), n, generator)
    t, deltas = t[0], deltas[0]
    positions = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return RaySamples(t=t, deltas=deltas, positions=positions)


def composite_weights(sigma, delta):
    """Compositing weights and transmittance.

    `T_i = exp(-sum_{j<i} sigma_j delta_j)` and `w_i = T_i (1 - exp(-sigma_i delta_i))`,
    evaluated in float64 and returned in the input dtype.

    Args:
        sigma: Densities, shape (..., N), non-negative.
        delta: Interval lengths, shape (..., N), positive.

    Returns:
        Tuple: Weights `w` and transmittance `T`, both shaped like `sigma`.

    Raises:
        InvalidArgumentError: On negative density or non-positive interval.
    """
    sigma, as_numpy = _to_tensor(sigma)
    delta, _ = _to_tensor(delta)
    if bool((sigma < 0).any()):
        raise InvalidArgumentError("Densities must be non-negative")
    if bool((delta <= 0).any()):
        raise InvalidArgumentError("Sample intervals must be positive")

    out_dtype = sigma.dtype
    optical = sigma.double() * delta.double()
    accumulated = torch.cumsum(optical, dim=-1)
    exclusive = torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1)
    transmittance = torch.exp(-exclusive)
    weights = transmittance * -torch.expm1(-optical)
    return _back(weights.to(out_dtype), as_numpy), _back(transmittance.to(out_dtype), as_numpy)


def accumulate(weights, values, t=None) -> RenderResult:
    """Weighted sum of per-sample values with opacity and expected depth.

    Args:
        weights: Shape (..., N).
        values: Shape (..., N, D).
        t: Sample distances, shape (..., N). Depth is zero when omitted.

    Returns:
        RenderResult: value (..., D), opacity (...), depth (...).
    """
    weights, as_numpy = _to_tensor(weights)
    values, _ = _to_tensor(values)
    value = (weights.unsqueeze(-1).to(values.dtype) * values).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    if t is None:
        depth = torch.zeros_like(opacity)
    else:
        t, _ = _to_tensor(t, weights.dtype)
        depth = (weights * t).sum(dim=-1)
    return RenderResult(
        value=_back(value, as_numpy),
        opacity=_back(opacity, as_numpy),
        depth=_back(depth, as_numpy),
        weights=_back(weights, as_numpy),
    )


def render_along_ray(samples: RaySamples) -> RenderResult:
    """Composite the sample values of one ray (or a batch) into a single value.

    Args:
        samples (RaySamples): Samples carrying `densities` and `values`.

    Returns:
        RenderResult: `sum_i w_i c_i`, the accumulated opacity and expected depth.

    Raises:
        InvalidArgumentError: If densities or values are missing.
    """
    if samples.densities is None or samples.values is None:
        raise InvalidArgumentError("render_along_ray needs densities and values on the samples")
    weights, _ = composite_weights(samples.densities, samples.deltas)
    return accumulate(weights, samples.values, samples.t)


def ray_box_intersection(origins: np.ndarray, directions: np.ndarray, lo, hi) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test of rays against an axis-aligned box.

    Args:
        origins (np.ndarray): (N, 3) ray origins.
        directions (np.ndarray): (N, 3) ray directions.
        lo: Box minimum corner.
        hi: Box maximum corner.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: Entry distance (clamped at 0),
            exit distance and a boolean hit mask.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    # Axis-parallel rays: inside the slab spans everything, outside spans nothing
    parallel = directions == 0.0
    inside_slab = (origins >= lo) & (origins <= hi)
    t0 = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.inf, t1)
    t_near = np.max(np.minimum(t0, t1), axis=-1)
    t_far = np.min(np.maximum(t0, t1), axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def pixel_directions(pose, pixels: np.ndarray) -> np.ndarray:
    """World-space unit directions through continuous pixel coordinates.

    The camera looks down its local -z axis with +y up and +x right. Pixel
    (row, col) = (0, 0) is the top-left corner of the image; pixel centers sit
    at half-integer coordinates.

    Args:
        pose: Camera pose exposing `rotation_matrix()`, `vertical_fov` and `resolution`.
        pixels (np.ndarray): (N, 2) array of (row, col) coordinates.

    Returns:
        np.ndarray: (N, 3) unit directions.
    """
    height, width = pose.resolution
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    focal = 0.5 * height / math.tan(0.5 * pose.vertical_fov)
    local = np.stack([
        (pixels[:, 1] - 0.5 * width) / focal,
        -(pixels[:, 0] - 0.5 * height) / focal,
        -np.ones(len(pixels)),
    ], axis=-1)
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    world = local @ pose.rotation_matrix().T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """All pixel-center coordinates of an image in row-major order, shape (H*W, 2)."""
    rows, cols = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing='ij')
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def grid_cell_centers(height: int, width: int, cells: int) -> np.ndarray:
    """Pixel coordinates of the centers of a `cells x cells` grid laid over an image.

    Returns:
        np.ndarray: (cells*cells, 2) (row, col) coordinates in row-major cell order.
    """
    centers = (np.arange(cells) + 0.5) / cells
    rows, cols = np.meshgrid(centers * height, centers * width, indexing='ij')
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def camera_rays(pose, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions of the rays through `pixels` of `pose`.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (N, 3) origins and (N, 3) directions.
    """
    directions = pixel_directions(pose, pixels)
    origins = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), directions.shape).copy()
    return origins, directions


def bounded_rays(origins: np.ndarray, directions: np.ndarray, bounds) -> dict:
    """Clip rays to the scene bounds, keeping only rays that cross the box.

    Args:
        origins (np.ndarray): (N, 3) origins.
        directions (np.ndarray): (N, 3) directions.
        bounds: Pair (lo, hi) of box corners.

    Returns:
        dict: `index` (indices of kept rays), `origins`, `directions`, `near`, `far`.
    """
    near, far, hit = ray_box_intersection(origins, directions, bounds[0], bounds[1])
    index = np.flatnonzero(hit)
    return {
        'index': index,
        'origins': origins[index],
        'directions': directions[index],
        'near': near[index],
        'far': far[index],
    }
