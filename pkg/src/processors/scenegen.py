"""Synthetic scenes with an object/part/sub-part hierarchy and analytic teacher oracles.

A scene is a set of non-overlapping object primitives (spheres or axis-aligned
boxes). Each object owns parts and each part owns sub-parts; a point inside an
object belongs to the part (and sub-part) whose primitive has the lowest signed
distance, so every interior point carries an id at all three scales. The teacher
token of a point is `base_token + (d . vd_axis) * vd_amplitude` for the owning
object, which stands in for the direction-dependent features of a pretrained
encoder.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage
from scipy.spatial.transform import Rotation

from config_loader import get_config
from errors import InvalidArgumentError, SceneValidationError
from processors.render import camera_rays, grid_cell_centers, pixel_centers
from utils.tensor_store import load_tensors, save_tensors

logger = logging.getLogger(__name__)

SCALES = ('small', 'medium', 'large')
SCALE_INDEX = {name: i for i, name in enumerate(SCALES)}
CONTAINMENT_TOLERANCE = 1e-9
SURFACE_NUDGE = 1e-6

Vec3 = Tuple[float, float, float]


class Primitive(BaseModel):
    """A sphere or an axis-aligned box.

    `extent` is the half-size per axis; spheres use equal extents and the radius is
    `extent[0]`.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal['sphere', 'box']
    center: Vec3
    extent: Vec3

    @field_validator('extent', mode='before')
    @classmethod
    def _expand_scalar_extent(cls, value):
        if isinstance(value, (int, float)):
            return (float(value),) * 3
        return value

    @model_validator(mode='after')
    def _check_extent(self):
        if min(self.extent) <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.kind == 'sphere' and len(set(self.extent)) != 1:
            raise ValueError(f"sphere extent must be equal on all axes, got {self.extent}")
        return self

    @property
    def radius(self) -> float:
        return float(self.extent[0])

    def aabb(self) -> Tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.center, dtype=np.float64)
        extent = np.asarray(self.extent, dtype=np.float64)
        return center - extent, center + extent

    def corners(self) -> np.ndarray:
        lo, hi = self.aabb()
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of `points` (N, 3); negative inside."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        center = np.asarray(self.center, dtype=np.float64)
        if self.kind == 'sphere':
            return np.linalg.norm(points - center, axis=-1) - self.radius
        q = np.abs(points - center) - np.asarray(self.extent, dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Entry and exit distances of rays; `inf` entry when the ray misses."""
        origins = np.asarray(origins, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        if self.kind == 'sphere':
            oc = origins - center
            b = np.sum(oc * directions, axis=-1)
            c = np.sum(oc * oc, axis=-1) - self.radius ** 2
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - root, -b + root
            miss = (disc <= 0) | (t1 <= 0)
        else:
            lo, hi = self.aabb()
            with np.errstate(divide='ignore', invalid='ignore'):
                inv = 1.0 / directions
                a = (lo - origins) * inv
                b_ = (hi - origins) * inv
            parallel = directions == 0.0
            inside = (origins >= lo) & (origins <= hi)
            a = np.where(parallel, np.where(inside, -np.inf, np.inf), a)
            b_ = np.where(parallel, np.inf, b_)
            t0 = np.max(np.minimum(a, b_), axis=-1)
            t1 = np.min(np.maximum(a, b_), axis=-1)
            miss = (t1 <= t0) | (t1 <= 0)
        t0 = np.maximum(t0, 0.0)
        return np.where(miss, np.inf, t0), np.where(miss, -np.inf, t1)


def _contains(parent: Primitive, child: Primitive) -> bool:
    if parent.kind == 'box':
        lo, hi = parent.aabb()
        clo, chi = child.aabb()
        return bool(np.all(clo >= lo - CONTAINMENT_TOLERANCE) and np.all(chi <= hi + CONTAINMENT_TOLERANCE))
    center = np.asarray(parent.center)
    if child.kind == 'sphere':
        gap = np.linalg.norm(np.asarray(child.center) - center) + child.radius
        return bool(gap <= parent.radius + CONTAINMENT_TOLERANCE)
    return bool(np.all(np.linalg.norm(child.corners() - center, axis=-1) <= parent.radius + CONTAINMENT_TOLERANCE))


def _overlap(a: Primitive, b: Primitive) -> bool:
    if a.kind == 'sphere' and b.kind == 'sphere':
        return bool(np.linalg.norm(np.asarray(a.center) - np.asarray(b.center)) < a.radius + b.radius)
    if a.kind == 'box' and b.kind == 'box':
        alo, ahi = a.aabb()
        blo, bhi = b.aabb()
        return bool(np.all(np.minimum(ahi, bhi) > np.maximum(alo, blo)))
    sphere, box = (a, b) if a.kind == 'sphere' else (b, a)
    lo, hi = box.aabb()
    closest = np.clip(np.asarray(sphere.center), lo, hi)
    return bool(np.linalg.norm(closest - np.asarray(sphere.center)) < sphere.radius)


class SubPartSpec(BaseModel):
    id: int
    primitive: Primitive
    color: Optional[Vec3] = None
    label_embedding: Optional[List[float]] = None


class PartSpec(BaseModel):
    id: int
    primitive: Primitive
    subparts: List[SubPartSpec] = Field(min_length=1)
    color: Optional[Vec3] = None
    label_embedding: Optional[List[float]] = None


class ObjectSpec(BaseModel):
    """One object of the scene with its teacher token parameters.

    Attributes:
        label: Semantic class of the object; defaults to the object id.
    """

    id: int
    primitive: Primitive
    parts: List[PartSpec] = Field(min_length=1)
    base_token: List[float] = Field(min_length=1)
    vd_amplitude: List[float]
    vd_axis: Vec3
    label_embedding: List[float] = Field(min_length=1)
    color: Vec3
    label: Optional[int] = None

    @model_validator(mode='after')
    def _check_object(self):
        if len(self.vd_amplitude) != len(self.base_token):
            raise ValueError("vd_amplitude and base_token must have the same length")
        if abs(np.linalg.norm(self.vd_axis) - 1.0) > 1e-6:
            raise ValueError(f"vd_axis must be a unit vector, got {self.vd_axis}")
        if any(c < 0 or c > 1 for c in self.color):
            raise ValueError(f"color components must lie in [0, 1], got {self.color}")
        return self

    @property
    def class_label(self) -> int:
        return self.id if self.label is None else self.label


class SceneSpec(BaseModel):
    """A complete synthetic scene.

    Structural checks (unique ids, nesting, bounds, overlap) run in
    `validate_structure`, which `build_scene` calls, so that rejections surface as
    `SceneValidationError` with a diagnostic.
    """

    objects: List[ObjectSpec] = Field(min_length=1)
    bounds: Tuple[Vec3, Vec3]
    seed: int = 0

    def validate_structure(self):
        lo = np.asarray(self.bounds[0], dtype=np.float64)
        hi = np.asarray(self.bounds[1], dtype=np.float64)
        if not np.all(lo < hi):
            raise SceneValidationError(f"Scene bounds must satisfy lo < hi, got {self.bounds}")

        def _check_ids(ids, what):
            if len(ids) != len(set(ids)):
                duplicates = sorted({i for i in ids if ids.count(i) > 1})
                raise SceneValidationError(f"Duplicate {what} ids: {duplicates}")

        _check_ids([o.id for o in self.objects], 'object')
        _check_ids([p.id for o in self.objects for p in o.parts], 'part')
        _check_ids([s.id for o in self.objects for p in o.parts for s in p.subparts], 'sub-part')

        token_dims = {len(o.base_token) for o in self.objects}
        label_dims = {len(o.label_embedding) for o in self.objects}
        if len(token_dims) != 1 or len(label_dims) != 1:
            raise SceneValidationError(f"Inconsistent token/label dimensions: {token_dims} / {label_dims}")
        label_dim = label_dims.pop()

        for obj in self.objects:
            olo, ohi = obj.primitive.aabb()
            if np.any(olo < lo - CONTAINMENT_TOLERANCE) or np.any(ohi > hi + CONTAINMENT_TOLERANCE):
                raise SceneValidationError(f"Object {obj.id} extends outside the scene bounds")
            for part in obj.parts:
                if not _contains(obj.primitive, part.primitive):
                    raise SceneValidationError(f"Part {part.id} is not nested inside object {obj.id}")
                if part.label_embedding is not None and len(part.label_embedding) != label_dim:
                    raise SceneValidationError(f"Part {part.id} label embedding has the wrong dimension")
                for sub in part.subparts:
                    if not _contains(part.primitive, sub.primitive):
                        raise SceneValidationError(f"Sub-part {sub.id} is not nested inside part {part.id}")
                    if sub.label_embedding is not None and len(sub.label_embedding) != label_dim:
                        raise SceneValidationError(f"Sub-part {sub.id} label embedding has the wrong dimension")

        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if _overlap(a.primitive, b.primitive):
                    raise SceneValidationError(
                        f"Objects {a.id} and {b.id} overlap; instance ground truth would be ambiguous"
                    )

    @property
    def token_dim(self) -> int:
        return len(self.objects[0].base_token)

    @property
    def label_dim(self) -> int:
        return len(self.objects[0].label_embedding)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path) -> 'SceneSpec':
        return cls.model_validate_json(Path(path).read_text(encoding='utf-8'))


def _derive_child_embeddings(parent: np.ndarray, count: int, cosine: float, rng: np.random.Generator) -> np.ndarray:
    """Child label embeddings whose pairwise cosine is exactly `cosine`.

    Each child is `|p| (sqrt(c) p_hat + sqrt(1 - c) u_k)` with `u_k` orthonormal and
    orthogonal to the parent.
    """
    dim = parent.shape[0]
    if count + 1 > dim:
        raise SceneValidationError(f"Label dimension {dim} too small to derive {count} sibling embeddings")
    norm = np.linalg.norm(parent)
    parent_hat = parent / norm
    basis = [parent_hat]
    directions = []
    while len(directions) < count:
        u = rng.standard_normal(dim)
        for b in basis:
            u = u - np.dot(u, b) * b
        u_norm = np.linalg.norm(u)
        if u_norm < 1e-8:
            continue
        u /= u_norm
        basis.append(u)
        directions.append(u)
    c = math.sqrt(cosine)
    s = math.sqrt(1.0 - cosine)
    return np.stack([norm * (c * parent_hat + s * u) for u in directions])


@dataclass(frozen=True)
class CameraPose:
    """A pinhole camera looking down its local -z axis with +y up.

    Attributes:
        position: World position.
        orientation: Unit quaternion in (x, y, z, w) order.
        vertical_fov: Vertical field of view in radians.
        resolution: (H, W) in pixels.
    """

    position: Tuple[float, float, float]
    orientation: Tuple[float, float, float, float]
    vertical_fov: float
    resolution: Tuple[int, int]

    def __post_init__(self):
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-6:
            raise InvalidArgumentError(f"Camera orientation must be a unit quaternion, got norm {norm:.8f}")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise InvalidArgumentError(f"Camera resolution must be at least 1x1, got {self.resolution}")
        if not 0 < self.vertical_fov < math.pi:
            raise InvalidArgumentError(f"Vertical field of view must lie in (0, pi), got {self.vertical_fov}")
        object.__setattr__(self, 'position', tuple(float(v) for v in self.position))
        object.__setattr__(self, 'orientation', tuple(float(v) for v in self.orientation))
        object.__setattr__(self, 'resolution', (int(self.resolution[0]), int(self.resolution[1])))

    @classmethod
    def look_at(cls, position, target, vertical_fov: float, resolution, up=(0.0, 0.0, 1.0)) -> 'CameraPose':
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        matrix = np.stack([right, true_up, -forward], axis=1)
        quat = Rotation.from_matrix(matrix).as_quat()
        quat /= np.linalg.norm(quat)
        return cls(tuple(position), tuple(quat), float(vertical_fov), tuple(resolution))

    def rotation_matrix(self) -> np.ndarray:
        """Camera-to-world rotation; columns are the camera x, y, z axes."""
        return Rotation.from_quat(self.orientation).as_matrix()

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation_matrix()[:, 2]

    def to_dict(self) -> Dict:
        return {
            'position': list(self.position),
            'orientation': list(self.orientation),
            'vertical_fov': self.vertical_fov,
            'resolution': list(self.resolution),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'CameraPose':
        return cls(tuple(data['position']), tuple(data['orientation']), float(data['vertical_fov']),
                   tuple(data['resolution']))


def save_poses(poses: Sequence[CameraPose], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([p.to_dict() for p in poses], indent=2), encoding='utf-8')
    return path


def load_poses(path) -> List[CameraPose]:
    return [CameraPose.from_dict(d) for d in json.loads(Path(path).read_text(encoding='utf-8'))]


class SceneOracle:
    """Immutable analytic query structure over a `SceneSpec`.

    Every query is a pure function of positions (and directions for tokens), so an
    oracle can be shared across threads freely.
    """

    def __init__(self, spec: SceneSpec, density_inside: float = 40.0, sibling_label_cosine: float = 0.8):
        self.spec = spec
        self.density_inside = float(density_inside)
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.bounds = (np.asarray(spec.bounds[0], dtype=np.float64), np.asarray(spec.bounds[1], dtype=np.float64))

        rng = np.random.default_rng([spec.seed, 7919])
        self.object_ids = np.array([o.id for o in spec.objects], dtype=np.int64)
        self.object_labels = np.array([o.class_label for o in spec.objects], dtype=np.int64)
        self._objects = list(spec.objects)
        self._base = np.array([o.base_token for o in spec.objects], dtype=np.float64)
        self._amplitude = np.array([o.vd_amplitude for o in spec.objects], dtype=np.float64)
        self._axis = np.array([o.vd_axis for o in spec.objects], dtype=np.float64)

        parts, subparts = [], []
        part_object, sub_part = [], []
        part_colors, sub_colors = [], []
        part_labels, sub_labels = [], []
        for oi, obj in enumerate(spec.objects):
            obj_label = np.asarray(obj.label_embedding, dtype=np.float64)
            missing = [p for p in obj.parts if p.label_embedding is None]
            derived = iter(_derive_child_embeddings(obj_label, len(missing), sibling_label_cosine, rng)) if missing else iter(())
            for part in obj.parts:
                pi = len(parts)
                parts.append(part)
                part_object.append(oi)
                part_color = part.color if part.color is not None else obj.color
                part_colors.append(part_color)
                part_label = (np.asarray(part.label_embedding, dtype=np.float64)
                              if part.label_embedding is not None else next(derived))
                part_labels.append(part_label)
                missing_sub = [s for s in part.subparts if s.label_embedding is None]
                derived_sub = (iter(_derive_child_embeddings(part_label, len(missing_sub), sibling_label_cosine, rng))
                               if missing_sub else iter(()))
                for sub in part.subparts:
                    subparts.append(sub)
                    sub_part.append(pi)
                    sub_colors.append(sub.color if sub.color is not None else part_color)
                    sub_labels.append(np.asarray(sub.label_embedding, dtype=np.float64)
                                      if sub.label_embedding is not None else next(derived_sub))

        self._parts = parts
        self._subparts = subparts
        self.part_ids = np.array([p.id for p in parts], dtype=np.int64)
        self.subpart_ids = np.array([s.id for s in subparts], dtype=np.int64)
        self._part_object = np.array(part_object, dtype=np.int64)
        self._sub_part = np.array(sub_part, dtype=np.int64)
        self._sub_colors = np.array(sub_colors, dtype=np.float64)

        self.label_tables: Dict[str, Dict[int, np.ndarray]] = {
            'large': {o.id: np.asarray(o.label_embedding, dtype=np.float64) for o in spec.objects},
            'medium': {int(p.id): lab for p, lab in zip(parts, part_labels)},
            'small': {int(s.id): lab for s, lab in zip(subparts, sub_labels)},
        }
        self.parent_tables: Dict[str, Dict[int, int]] = {
            'small': {int(self.subpart_ids[i]): int(self.part_ids[p]) for i, p in enumerate(sub_part)},
            'medium': {int(self.part_ids[i]): int(self.object_ids[o]) for i, o in enumerate(part_object)},
        }
        self.primitives: Dict[str, Dict[int, Primitive]] = {
            'large': {o.id: o.primitive for o in spec.objects},
            'medium': {p.id: p.primitive for p in parts},
            'small': {s.id: s.primitive for s in subparts},
        }
        self.logger.debug(f"Built oracle with {len(self._objects)} objects, {len(parts)} parts, "
                          f"{len(subparts)} sub-parts")

    @property
    def token_dim(self) -> int:
        return self._base.shape[1]

    @property
    def label_dim(self) -> int:
        return len(self._objects[0].label_embedding)

    def base_token(self, object_id: int) -> np.ndarray:
        return self._base[self._object_index(object_id)].copy()

    def _object_index(self, object_id: int) -> int:
        matches = np.flatnonzero(self.object_ids == object_id)
        if len(matches) == 0:
            raise InvalidArgumentError(f"Unknown object id {object_id}")
        return int(matches[0])

    def _resolve(self, points: np.ndarray, tolerance: float = 0.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Object, part and sub-part indices (not ids) of points; -1 outside."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        obj_sd = np.stack([o.primitive.signed_distance(points) for o in self._objects], axis=-1)
        obj_idx = np.argmin(obj_sd, axis=-1)
        inside = obj_sd[np.arange(n), obj_idx] <= tolerance
        obj_idx = np.where(inside, obj_idx, -1)

        part_sd = np.stack([p.primitive.signed_distance(points) for p in self._parts], axis=-1)
        part_sd = np.where(self._part_object[None, :] == obj_idx[:, None], part_sd, np.inf)
        part_idx = np.where(inside, np.argmin(part_sd, axis=-1), -1)

        sub_sd = np.stack([s.primitive.signed_distance(points) for s in self._subparts], axis=-1)
        sub_sd = np.where(self._sub_part[None, :] == part_idx[:, None], sub_sd, np.inf)
        sub_idx = np.where(inside, np.argmin(sub_sd, axis=-1), -1)
        return obj_idx, part_idx, sub_idx

    def density(self, points: np.ndarray) -> np.ndarray:
        """sigma_in inside any object primitive, 0 outside."""
        obj_idx, _, _ = self._resolve(points)
        return np.where(obj_idx >= 0, self.density_inside, 0.0)

    def token(self, points: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Teacher token of each point seen along each direction; zero in empty space."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        obj_idx, _, _ = self._resolve(points)
        inside = obj_idx >= 0
        safe = np.maximum(obj_idx, 0)
        projection = np.sum(directions * self._axis[safe], axis=-1, keepdims=True)
        tokens = self._base[safe] + projection * self._amplitude[safe]
        return np.where(inside[:, None], tokens, 0.0)

    def instance_ids(self, points: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
        """(N, 3) ids in (small, medium, large) column order; -1 in empty space."""
        obj_idx, part_idx, sub_idx = self._resolve(points, tolerance)
        out = np.full((len(obj_idx), 3), -1, dtype=np.int64)
        inside = obj_idx >= 0
        out[inside, 0] = self.subpart_ids[sub_idx[inside]]
        out[inside, 1] = self.part_ids[part_idx[inside]]
        out[inside, 2] = self.object_ids[obj_idx[inside]]
        return out

    def label_id(self, points: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
        """Semantic class of each point; -1 in empty space."""
        obj_idx, _, _ = self._resolve(points, tolerance)
        return np.where(obj_idx >= 0, self.object_labels[np.maximum(obj_idx, 0)], -1)

    def color(self, points: np.ndarray) -> np.ndarray:
        _, _, sub_idx = self._resolve(points)
        colors = self._sub_colors[np.maximum(sub_idx, 0)]
        return np.where((sub_idx >= 0)[:, None], colors, 0.0)

    def label_embeddings(self, ids: np.ndarray, scale: str) -> np.ndarray:
        """Teacher label embeddings for instance ids at `scale`; zero rows for -1."""
        table = self.label_tables[scale]
        out = np.zeros((len(ids), self.label_dim), dtype=np.float64)
        for row, instance in enumerate(np.asarray(ids).ravel()):
            if instance >= 0:
                out[row] = table[int(instance)]
        return out

    def first_hit(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance to the first object surface along each ray and a hit mask."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        entries = np.stack([o.primitive.intersect(origins, directions)[0] for o in self._objects], axis=-1)
        t_hit = np.min(entries, axis=-1)
        hit = np.isfinite(t_hit)
        return np.where(hit, t_hit, 0.0), hit

    def surface_points(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-surface points nudged inside the hit object, the hit depth and hit mask."""
        t_hit, hit = self.first_hit(origins, directions)
        points = np.asarray(origins) + (t_hit + SURFACE_NUDGE)[:, None] * np.asarray(directions)
        return points, t_hit, hit

    def object_at(self, points: np.ndarray, tolerance: float = 0.05) -> np.ndarray:
        """Object id of points lying within `tolerance` of an object; -1 otherwise."""
        return self.instance_ids(points, tolerance)[:, 2]


def build_scene(spec: SceneSpec, config=None) -> SceneOracle:
    """Validate a scene specification and build its analytic oracle.

    Args:
        spec (SceneSpec): The scene to build.
        config: Optional ConfigLoader; defaults to the process-wide config.

    Returns:
        SceneOracle: Immutable oracle over the scene.

    Raises:
        SceneValidationError: On overlapping objects, broken nesting, geometry
            outside the bounds or duplicate ids.
    """
    config = config or get_config()
    spec.validate_structure()
    return SceneOracle(
        spec,
        density_inside=config.get('scene.density_inside', 40.0),
        sibling_label_cosine=config.get('scene.sibling_label_cosine', 0.8),
    )


def make_trajectory(spec: SceneSpec, n: int, config=None) -> List[CameraPose]:
    """Inward-facing orbit around the scene bounds.

    Poses sit on a ring around the vertical axis at equal azimuth spacing
    `2 pi i / n`, elevated by `scene.elevation_deg` plus seeded uniform jitter of
    `scene.elevation_jitter_deg`, at a distance of `orbit_radius_factor` times the
    bounds diagonal from the bounds center.

    Raises:
        InvalidArgumentError: If n < 1.
    """
    if n < 1:
        raise InvalidArgumentError(f"Trajectory needs at least one pose, got n={n}")
    config = config or get_config()
    lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.bounds)
    center = 0.5 * (lo + hi)
    radius = float(config.get('scene.orbit_radius_factor', 1.0)) * float(np.linalg.norm(hi - lo))
    elevation = math.radians(float(config.get('scene.elevation_deg', 30.0)))
    jitter = math.radians(float(config.get('scene.elevation_jitter_deg', 10.0)))
    fov = math.radians(float(config.get('scene.vertical_fov_deg', 50.0)))
    resolution = tuple(config.get('scene.resolution', [96, 96]))

    rng = np.random.default_rng(spec.seed)
    offsets = rng.uniform(-jitter, jitter, size=n) if jitter > 0 else np.zeros(n)
    poses = []
    for i in range(n):
        azimuth = 2.0 * math.pi * i / n
        el = elevation + offsets[i] if n > 1 else elevation
        position = center + radius * np.array([
            math.cos(el) * math.cos(azimuth),
            math.cos(el) * math.sin(azimuth),
            math.sin(el),
        ])
        poses.append(CameraPose.look_at(position, center, fov, resolution))
    return poses


@dataclass
class TeacherOutputs:
    """Per-view teacher renders.

    Masks are stored as per-scale instance images (`instances[v, s]`, -1 where no
    mask covers the pixel); the binary masks of a scale are the level sets of that
    image, which keeps masks disjoint within a scale.
    """

    poses: List[CameraPose]
    rgb: np.ndarray
    depth: np.ndarray
    tokens: np.ndarray
    instances: np.ndarray
    label_tables: Dict[str, Dict[int, np.ndarray]] = field(default_factory=dict)
    token_grid: int = 27

    @property
    def n_views(self) -> int:
        return len(self.poses)

    def masks(self, view: int, scale: str) -> List[Tuple[int, np.ndarray]]:
        """Binary masks of one view at one scale as (instance id, H x W bool) pairs."""
        image = self.instances[view, SCALE_INDEX[scale]]
        return [(int(i), image == i) for i in np.unique(image) if i >= 0]

    def subset(self, views: Sequence[int]) -> 'TeacherOutputs':
        views = list(views)
        return TeacherOutputs(
            poses=[self.poses[v] for v in views],
            rgb=self.rgb[views], depth=self.depth[views], tokens=self.tokens[views],
            instances=self.instances[views], label_tables=self.label_tables, token_grid=self.token_grid,
        )

    def save(self, directory) -> Path:
        tensors = {
            'rgb': self.rgb,
            'depth': self.depth,
            'tokens': self.tokens,
            'instances': self.instances.astype(np.float32),
        }
        meta = {
            'poses': [p.to_dict() for p in self.poses],
            'token_grid': self.token_grid,
            'label_tables': {
                scale: {str(k): [float(x) for x in v] for k, v in table.items()}
                for scale, table in self.label_tables.items()
            },
        }
        return save_tensors(directory, tensors, meta)

    @classmethod
    def load(cls, directory) -> 'TeacherOutputs':
        tensors, meta = load_tensors(directory)
        return cls(
            poses=[CameraPose.from_dict(d) for d in meta['poses']],
            rgb=tensors['rgb'],
            depth=tensors['depth'],
            tokens=tensors['tokens'],
            instances=np.rint(tensors['instances']).astype(np.int64),
            label_tables={
                scale: {int(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
                for scale, table in meta.get('label_tables', {}).items()
            },
            token_grid=int(meta.get('token_grid', 27)),
        )


def _erode_instances(image: np.ndarray, iterations: int) -> np.ndarray:
    eroded = np.full_like(image, -1)
    for instance in np.unique(image):
        if instance < 0:
            continue
        kept = ndimage.binary_erosion(image == instance, iterations=iterations)
        eroded[kept] = instance
    return eroded


def render_teacher_views(oracle: SceneOracle, poses: Sequence[CameraPose], config=None) -> TeacherOutputs:
    """Ray-cast rgb, depth, token maps and instance masks for each pose.

    Rgb and depth come from the first surface hit through each pixel center;
    depth is 0 where the ray misses every object. Token maps are cast through the
    centers of a `token_grid x token_grid` cell grid using the teacher token at
    the first hit with the ray's own direction.

    Raises:
        InvalidArgumentError: If `poses` is empty.
    """
    if not poses:
        raise InvalidArgumentError("render_teacher_views needs at least one pose")
    config = config or get_config()
    grid = int(config.get('scene.token_grid', 27))
    erode = bool(config.get('scene.mask_erosion', False))
    iterations = int(config.get('scene.mask_erosion_iterations', 1))

    height, width = poses[0].resolution
    n = len(poses)
    rgb = np.zeros((n, height, width, 3), dtype=np.float32)
    depth = np.zeros((n, height, width), dtype=np.float32)
    tokens = np.zeros((n, grid, grid, oracle.token_dim), dtype=np.float32)
    instances = np.full((n, 3, height, width), -1, dtype=np.int64)

    for v, pose in enumerate(poses):
        if pose.resolution != (height, width):
            raise InvalidArgumentError("All teacher views must share one resolution")
        origins, directions = camera_rays(pose, pixel_centers(height, width))
        points, t_hit, hit = oracle.surface_points(origins, directions)
        rgb[v] = np.where(hit[:, None], oracle.color(points), 0.0).reshape(height, width, 3)
        depth[v] = np.where(hit, t_hit, 0.0).reshape(height, width)
        ids = np.where(hit[:, None], oracle.instance_ids(points), -1)
        for s in range(3):
            image = ids[:, s].reshape(height, width)
            instances[v, s] = _erode_instances(image, iterations) if erode else image

        g_origins, g_dirs = camera_rays(pose, grid_cell_centers(height, width, grid))
        g_points, _, g_hit = oracle.surface_points(g_origins, g_dirs)
        g_tokens = np.where(g_hit[:, None], oracle.token(g_points, g_dirs), 0.0)
        tokens[v] = g_tokens.reshape(grid, grid, -1)

    logger.info(f"Rendered {n} teacher views at {height}x{width} (token grid {grid}x{grid})")
    return TeacherOutputs(
        poses=list(poses), rgb=rgb, depth=depth, tokens=tokens, instances=instances,
        label_tables={s: dict(t) for s, t in oracle.label_tables.items()}, token_grid=grid,
    )


_PALETTE = np.array([
    [0.90, 0.30, 0.25], [0.25, 0.55, 0.90], [0.30, 0.80, 0.40], [0.95, 0.75, 0.20],
    [0.65, 0.40, 0.85], [0.20, 0.80, 0.80], [0.90, 0.50, 0.70], [0.60, 0.60, 0.60],
])


def save_previews(teacher: TeacherOutputs, directory, max_views: int = 8) -> List[Path]:
    """Write rgb and object-scale instance PNG previews for the first views."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for v in range(min(max_views, teacher.n_views)):
        rgb_path = directory / f"view_{v:03d}_rgb.png"
        Image.fromarray((np.clip(teacher.rgb[v], 0, 1) * 255).astype(np.uint8)).save(rgb_path)
        ids = teacher.instances[v, SCALE_INDEX['large']]
        colored = np.where((ids >= 0)[..., None], _PALETTE[np.maximum(ids, 0) % len(_PALETTE)], 0.0)
        mask_path = directory / f"view_{v:03d}_objects.png"
        Image.fromarray((colored * 255).astype(np.uint8)).save(mask_path)
        written.extend([rgb_path, mask_path])
    logger.debug(f"Wrote {len(written)} preview images to {directory}")
    return written


def _split_primitive(primitive: Primitive, axis: int, count: int) -> List[Primitive]:
    """Split a primitive into `count` nested children along one axis."""
    center = np.asarray(primitive.center, dtype=np.float64)
    extent = np.asarray(primitive.extent, dtype=np.float64)
    children = []
    for k in range(count):
        offset = ((2 * k + 1) / count - 1.0) * extent[axis]
        child_center = center.copy()
        child_center[axis] += offset
        if primitive.kind == 'box':
            child_extent = extent.copy()
            child_extent[axis] /= count
            children.append(Primitive(kind='box', center=tuple(child_center), extent=tuple(child_extent)))
        else:
            children.append(Primitive(kind='sphere', center=tuple(child_center), extent=primitive.radius / count))
    return children


def _orthonormal_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    if rows > dim:
        return rng.standard_normal((rows, dim)) / math.sqrt(dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, rows)))
    return q.T


def _hierarchy(primitive: Primitive, part_axis: int, n_parts: int, sub_axis: int, n_sub: int,
               next_part: int, next_sub: int) -> Tuple[List[PartSpec], int, int]:
    parts = []
    for part_prim in _split_primitive(primitive, part_axis, n_parts):
        subs = []
        for sub_prim in _split_primitive(part_prim, sub_axis, n_sub):
            subs.append(SubPartSpec(id=next_sub, primitive=sub_prim))
            next_sub += 1
        parts.append(PartSpec(id=next_part, primitive=part_prim, subparts=subs))
        next_part += 1
    return parts, next_part, next_sub


PRESETS = ('one-sphere', 'two-objects', 'five-objects')


def preset_scene(name: str, seed: int = 0, view_dependent: bool = True, config=None) -> SceneSpec:
    """Build one of the named desk-scale scenes.

    Object base tokens and label embeddings are seeded orthonormal sets, so
    objects are separable by cosine similarity.

    Args:
        name (str): One of `one-sphere`, `two-objects`, `five-objects`.
        seed (int): Scene seed.
        view_dependent (bool): When False every object has a zero VD amplitude.

    Raises:
        InvalidArgumentError: For an unknown preset name.
    """
    config = config or get_config()
    token_dim = int(config.get('scene.token_dim', 32))
    label_dim = int(config.get('scene.label_dim', 16))
    rng = np.random.default_rng(seed)

    if name == 'one-sphere':
        layout = [('sphere', (0.0, 0.0, 0.0), 0.5, 1, 2, 2, 2)]
    elif name == 'two-objects':
        layout = [
            ('sphere', (-0.5, 0.0, 0.0), 0.35, 1, 2, 2, 2),
            ('box', (0.5, 0.0, 0.0), 0.3, 2, 2, 0, 2),
        ]
    elif name == 'five-objects':
        layout = []
        for k in range(5):
            angle = 2.0 * math.pi * k / 5
            kind = 'sphere' if k % 2 == 0 else 'box'
            size = 0.22 if kind == 'sphere' else 0.18
            layout.append((kind, (0.65 * math.cos(angle), 0.65 * math.sin(angle), 0.0), size, 2, 2, 0, 2))
    else:
        raise InvalidArgumentError(f"Unknown preset '{name}', expected one of {PRESETS}")

    n = len(layout)
    tokens = _orthonormal_rows(rng, n, token_dim) * math.sqrt(token_dim) * 0.5
    labels = _orthonormal_rows(rng, n, label_dim)
    amplitudes = rng.standard_normal((n, token_dim)) * 0.5 if view_dependent else np.zeros((n, token_dim))
    axes = rng.standard_normal((n, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)

    objects = []
    next_part, next_sub = 0, 0
    for i, (kind, center, size, part_axis, n_parts, sub_axis, n_sub) in enumerate(layout):
        primitive = Primitive(kind=kind, center=center, extent=size)
        parts, next_part, next_sub = _hierarchy(primitive, part_axis, n_parts, sub_axis, n_sub, next_part, next_sub)
        objects.append(ObjectSpec(
            id=i, primitive=primitive, parts=parts,
            base_token=tokens[i].tolist(), vd_amplitude=amplitudes[i].tolist(), vd_axis=tuple(axes[i]),
            label_embedding=labels[i].tolist(), color=tuple(_PALETTE[i % len(_PALETTE)]),
        ))
    return SceneSpec(objects=objects, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), seed=seed)
