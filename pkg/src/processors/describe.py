"""Object-centric scene description and the radar-ordered scene prompt.

Each object receives the same token quota, split evenly over its parts and then
over each part's sub-parts. Tokens come from rays cast through the supervision
views whose surface point is assigned to the object, tagged view-invariant (VI)
or view-dependent (VD) according to the configured mode. Objects are ordered by
a sweep around the vertical axis and each one becomes a virtual image.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from config_loader import get_config
from errors import InvalidArgumentError, UnobservedObjectError
from processors.decomp import SegmentGraph, assign_points, sample_view_rays

logger = logging.getLogger(__name__)

ANY = -1
WIRE_VERSION = 1
PREAMBLE = (
    "You are given a set of virtual images. All of them come from one 3D scene, and each "
    "virtual image shows exactly one object of that scene, tagged with a unique image ID. "
    "The images are listed in the order of a sweep around the scene center. "
    "Answer the question using the objects below."
)


class DescribeConfig(BaseModel):
    """Scene description settings (the `describe` config section)."""

    budget: int = Field(default=30000, ge=1)
    angular_threshold_deg: float = Field(default=45.0, gt=0.0, le=180.0)
    sweep_lambda: float = Field(default=0.0157, gt=0.0, lt=1.0)
    bins: int = 20
    vi_vd_mode: Literal['all_vi', 'all_vd', 'even_split', 'adaptive'] = 'even_split'
    ray_cap_factor: int = Field(default=50, ge=1)
    rays_per_round: int = Field(default=4096, ge=1)
    samples_per_ray: int = Field(default=64, ge=1)
    min_opacity: float = Field(default=0.5, ge=0.0, le=1.0)
    multi_scale: bool = True
    radar_sweep: bool = True
    preamble: bool = True
    workers: int = Field(default=4, ge=1)
    scene_id: str = 'scene'
    seed: int = 0

    @field_validator('bins')
    @classmethod
    def _icosahedral_bins(cls, value: int) -> int:
        count = 20
        while count < value:
            count *= 4
        if count != value:
            raise ValueError(f"bins must be 20 * 4^k, got {value}")
        return value

    @property
    def angular_threshold(self) -> float:
        return math.radians(self.angular_threshold_deg)

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'DescribeConfig':
        config = config or get_config()
        values = config.get_dict('describe')
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class PartQuota:
    part_id: int
    quota: int
    subparts: Dict[int, int]


@dataclass
class ObjectQuota:
    object_id: int
    quota: int
    parts: Dict[int, PartQuota]

    def slots(self) -> Dict[Tuple[int, int], int]:
        return {(p, s): q for p, part in self.parts.items() for s, q in part.subparts.items()}


def _balanced(total: int, ids: Sequence[int]) -> Dict[int, int]:
    base, remainder = divmod(total, len(ids))
    return {i: base + (1 if k < remainder else 0) for k, i in enumerate(sorted(ids))}


def allocate_budget(W: int, graph: SegmentGraph, multi_scale: bool = True) -> Dict[int, ObjectQuota]:
    """Per-object quota floor(W / O), split evenly over parts then sub-parts.

    Remainders go to the lowest ids. An object without parts (or with
    `multi_scale` off) gets a single catch-all slot.

    Raises:
        InvalidArgumentError: If the graph has no objects or W < O.
    """
    objects = graph.objects()
    if not objects:
        raise InvalidArgumentError("Cannot allocate a budget for a graph without objects")
    if W < len(objects):
        raise InvalidArgumentError(f"Budget {W} is smaller than the number of objects {len(objects)}")
    per_object = W // len(objects)
    quotas = {}
    for object_id in objects:
        parts = graph.children('large', object_id) if multi_scale else []
        part_quotas = {}
        for part_id, part_quota in _balanced(per_object, parts or [ANY]).items():
            subparts = graph.children('medium', part_id) if (multi_scale and part_id != ANY) else []
            part_quotas[part_id] = PartQuota(part_id, part_quota, _balanced(part_quota, subparts or [ANY]))
        quotas[object_id] = ObjectQuota(object_id, per_object, part_quotas)
    return quotas


_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTICES = [
    (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
    (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
    (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


@lru_cache(maxsize=8)
def bin_centers(bins: int = 20) -> np.ndarray:
    """Unit centers of the faces of an icosahedron subdivided to `bins` faces."""
    vertices = np.asarray(_ICO_VERTICES, dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=-1, keepdims=True)
    triangles = [tuple(vertices[i] for i in face) for face in _ICO_FACES]
    while len(triangles) < bins:
        finer = []
        for a, b, c in triangles:
            ab, bc, ca = ((u + v) / np.linalg.norm(u + v) for u, v in ((a, b), (b, c), (c, a)))
            finer.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        triangles = finer
    if len(triangles) != bins:
        raise InvalidArgumentError(f"bins must be 20 * 4^k, got {bins}")
    centers = np.array([sum(t) / 3.0 for t in triangles])
    return centers / np.linalg.norm(centers, axis=-1, keepdims=True)


def direction_bins(directions: np.ndarray, bins: int = 20) -> np.ndarray:
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    return np.argmax(directions @ bin_centers(bins).T, axis=-1)


def canonical_direction(directions: np.ndarray, bins: int = 20) -> np.ndarray:
    """Normalized mean direction of the fullest spherical bin; lowest bin index on ties.

    Raises:
        UnobservedObjectError: If no direction is given.
    """
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(directions) == 0:
        raise UnobservedObjectError("Canonical direction needs at least one observing ray")
    unit = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    assignment = direction_bins(unit, bins)
    counts = np.bincount(assignment, minlength=bins)
    fullest = int(np.argmax(counts))
    mean = unit[assignment == fullest].mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else bin_centers(bins)[fullest].copy()


@dataclass
class DescribedToken:
    vector: np.ndarray
    tag: Literal['VI', 'VD']
    direction: np.ndarray
    part_id: int
    subpart_id: int
    point: Optional[np.ndarray] = None
    view: int = -1


@dataclass
class ObjectDescription:
    object_id: int
    tokens: List[DescribedToken]
    canonical_direction: np.ndarray
    centroid: np.ndarray
    quota: int
    rays_cast: int = 0
    flags: List[str] = field(default_factory=list)

    @property
    def fill_ratio(self) -> float:
        return len(self.tokens) / self.quota if self.quota else 1.0


def _tag_tokens(records: Dict[Tuple[int, int], List[Dict]], canonical: np.ndarray, cfg: DescribeConfig):
    threshold_cos = math.cos(cfg.angular_threshold)
    for slot_records in records.values():
        for k, record in enumerate(slot_records):
            if cfg.vi_vd_mode == 'all_vi':
                tag = 'VI'
            elif cfg.vi_vd_mode == 'all_vd':
                tag = 'VD'
            elif cfg.vi_vd_mode == 'even_split':
                tag = 'VI' if k % 2 == 0 else 'VD'
            else:
                dot = float(np.clip(np.dot(record['direction'], canonical), -1.0, 1.0))
                tag = 'VD' if dot >= threshold_cos else 'VI'
            record['tag'] = tag


def sample_object_description(fields, segments, graph: SegmentGraph, object_id: int, quota: ObjectQuota,
                              cfg: DescribeConfig, views: Sequence) -> ObjectDescription:
    """Fill one object's part/sub-part slots with rendered tokens.

    Rays are cast in rounds from a per-object seeded stream until every slot is
    full or `ray_cap_factor * quota` rays have been cast. A ray counts for the
    object when the object-scale assignment of its expected-depth surface point
    is the object; its part and sub-part assignment pick the slot. The canonical
    direction is computed from every ray that observed the object.

    Raises:
        UnobservedObjectError: If no ray observed the object.
    """
    rng = np.random.default_rng([cfg.seed, object_id])
    slots = quota.slots()
    records: Dict[Tuple[int, int], List[Dict]] = {slot: [] for slot in slots}
    observed = []
    cap = cfg.ray_cap_factor * quota.quota
    cast = 0

    def unfilled() -> bool:
        return any(len(records[s]) < q for s, q in slots.items())

    while cast < cap and unfilled():
        n = min(cfg.rays_per_round, cap - cast)
        rays = sample_view_rays(views, fields.bounds, n, rng)
        cast += n
        if len(rays['index']) == 0:
            continue
        rendered = fields.render_tokens(rays['origins'], rays['directions'], rays['near'], rays['far'],
                                        cfg.samples_per_ray)
        opacity = rendered['opacity']
        keep = np.flatnonzero(opacity >= cfg.min_opacity)
        if len(keep) == 0:
            continue
        points = rays['origins'][keep] + (rendered['depth'][keep] / opacity[keep])[:, None] * rays['directions'][keep]
        mine = assign_points(graph, segments, points, 'large') == object_id
        keep, points = keep[mine], points[mine]
        if len(keep) == 0:
            continue
        observed.append(rays['directions'][keep])
        parts = assign_points(graph, segments, points, 'medium') if cfg.multi_scale and len(graph.ids('medium')) else None
        subs = assign_points(graph, segments, points, 'small') if cfg.multi_scale and len(graph.ids('small')) else None
        for row, ray in enumerate(keep):
            part = int(parts[row]) if parts is not None else ANY
            if part not in quota.parts:
                # part of another object, or a part-less object
                if ANY not in quota.parts:
                    continue
                part = ANY
            sub = int(subs[row]) if subs is not None else ANY
            sub = sub if sub in quota.parts[part].subparts else ANY
            slot = (part, sub)
            if slot not in slots or len(records[slot]) >= slots[slot]:
                continue
            records[slot].append({
                't_vi': rendered['t_vi'][ray], 't_vd': rendered['t_vd'][ray],
                'direction': rays['directions'][ray], 'point': points[row], 'view': int(rays['views'][ray]),
            })

    if not observed:
        raise UnobservedObjectError(f"No ray observed object {object_id} after {cast} rays")
    canonical = canonical_direction(np.concatenate(observed), cfg.bins)
    _tag_tokens(records, canonical, cfg)

    tokens = []
    for (part, sub), slot_records in sorted(records.items()):
        for record in slot_records:
            vector = record['t_vi'] if record['tag'] == 'VI' else record['t_vd']
            tokens.append(DescribedToken(
                vector=np.asarray(vector, dtype=np.float32), tag=record['tag'], direction=record['direction'],
                part_id=part, subpart_id=sub, point=record['point'], view=record['view'],
            ))

    segment = graph.segment('large', object_id)
    if segment.spatial_centroid is not None:
        centroid = np.asarray(segment.spatial_centroid, dtype=np.float64)
    else:
        centroid = np.mean([t.point for t in tokens], axis=0) if tokens else np.zeros(3)
    description = ObjectDescription(object_id, tokens, canonical, centroid, quota.quota, cast)
    if len(tokens) < quota.quota:
        description.flags.append('partial')
        logger.warning(f"Object {object_id}: filled {len(tokens)}/{quota.quota} token slots "
                       f"after {cast} rays (fill ratio {description.fill_ratio:.3f})")
    return description


@dataclass
class RadarOrder:
    order: List[int]
    keys: np.ndarray
    flags: List[int] = field(default_factory=list)


def radar_order(centroids: np.ndarray, center: np.ndarray = None, sweep_lambda: float = 0.0157) -> RadarOrder:
    """Sort objects by polar angle around +z, plus `lambda * radius / max radius`.

    Angles are mapped to [0, 2 pi). Equal keys fall back to the smaller radius,
    then the lower index. A centroid on the vertical axis through the center
    gets angle 0 and is reported in `flags`.

    Raises:
        InvalidArgumentError: If there are no centroids.
    """
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if len(centroids) == 0:
        raise InvalidArgumentError("radar_order needs at least one object")
    center = centroids.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    offset = centroids[:, :2] - center[:2]
    radius = np.hypot(offset[:, 0], offset[:, 1])
    on_axis = radius == 0
    angle = np.where(on_axis, 0.0, np.mod(np.arctan2(offset[:, 1], offset[:, 0]), 2.0 * math.pi))
    max_radius = radius.max()
    keys = angle + (sweep_lambda * radius / max_radius if max_radius > 0 else 0.0)
    order = sorted(range(len(centroids)), key=lambda i: (keys[i], radius[i], i))
    flagged = [int(i) for i in np.flatnonzero(on_axis)]
    if flagged:
        logger.warning(f"Objects at positions {flagged} sit on the sweep axis; angle set to 0")
    return RadarOrder(order, keys, flagged)


@dataclass
class PromptObject:
    virtual_id: int
    object_id: int
    centroid: np.ndarray
    vectors: np.ndarray
    tags: List[str]


@dataclass
class ScenePrompt:
    """Ordered virtual-image object descriptions plus the question.

    The object list order is the sweep order; virtual ids run 1..O along it.
    """

    scene_id: str
    question: str
    objects: List[PromptObject]
    preamble: Optional[str] = None
    query: Optional[Dict] = None

    def virtual_to_object(self) -> Dict[int, int]:
        return {o.virtual_id: o.object_id for o in self.objects}

    def object_for(self, virtual_id: int) -> PromptObject:
        for item in self.objects:
            if item.virtual_id == virtual_id:
                return item
        raise InvalidArgumentError(f"Virtual id {virtual_id} is not part of the prompt")

    def to_wire(self) -> Dict:
        wire = {'v': WIRE_VERSION, 'scene_id': self.scene_id, 'question': self.question}
        if self.preamble is not None:
            wire['preamble'] = self.preamble
        if self.query is not None:
            wire['query'] = self.query
        wire['objects'] = [{
            'virtual_id': o.virtual_id,
            'object_id': o.object_id,
            'centroid': [float(x) for x in o.centroid],
            'tokens': [{'v': [float(x) for x in vec.astype(np.float32)], 'tag': tag}
                       for vec, tag in zip(o.vectors, o.tags)],
        } for o in self.objects]
        return wire

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_wire(), separators=(',', ':')).encode('utf-8')

    @classmethod
    def from_wire(cls, wire: Dict) -> 'ScenePrompt':
        if not isinstance(wire, dict) or 'objects' not in wire or 'question' not in wire:
            raise InvalidArgumentError("Scene prompt must carry 'question' and 'objects'")
        if wire.get('v', WIRE_VERSION) != WIRE_VERSION:
            raise InvalidArgumentError(f"Unsupported scene prompt version {wire.get('v')}")
        objects = []
        for item in wire['objects']:
            tokens = item.get('tokens', [])
            vectors = (np.asarray([t['v'] for t in tokens], dtype=np.float32) if tokens
                       else np.zeros((0, 0), dtype=np.float32))
            objects.append(PromptObject(int(item['virtual_id']), int(item['object_id']),
                                        np.asarray(item.get('centroid', [0, 0, 0]), dtype=np.float64),
                                        vectors, [t['tag'] for t in tokens]))
        return cls(str(wire.get('scene_id', '')), str(wire['question']), objects, wire.get('preamble'),
                   wire.get('query'))

    @classmethod
    def from_json(cls, text) -> 'ScenePrompt':
        try:
            return cls.from_wire(json.loads(text))
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"Scene prompt is not valid JSON: {e}") from e

    def render_text(self) -> str:
        """Plain-text layout for language-model adapters: preamble, object blocks, question."""
        lines = [self.preamble] if self.preamble else []
        for o in self.objects:
            n_vi = sum(1 for t in o.tags if t == 'VI')
            lines.append(f"<image id={o.virtual_id}> object with {len(o.tags)} tokens "
                         f"({n_vi} VI, {len(o.tags) - n_vi} VD) </image>")
        lines.append(f"Question: {self.question}")
        return "\n".join(lines)


def assemble_prompt(descriptions: Sequence[ObjectDescription], question: str, scene_id: str = 'scene',
                    preamble: bool = True) -> ScenePrompt:
    """Number ordered descriptions 1..O as virtual images and attach the question.

    Raises:
        InvalidArgumentError: If `descriptions` is empty.
    """
    if not descriptions:
        raise InvalidArgumentError("assemble_prompt needs at least one object description")
    objects = []
    for virtual_id, description in enumerate(descriptions, start=1):
        vectors = (np.stack([t.vector for t in description.tokens]).astype(np.float32) if description.tokens
                   else np.zeros((0, 0), dtype=np.float32))
        objects.append(PromptObject(virtual_id, description.object_id, np.asarray(description.centroid),
                                    vectors, [t.tag for t in description.tokens]))
    return ScenePrompt(scene_id, question, objects, PREAMBLE if preamble else None)


@dataclass
class SceneDescription:
    prompt: ScenePrompt
    descriptions: List[ObjectDescription]
    order: RadarOrder


class SceneDescriber:
    """Allocate, sample (in parallel over objects), order and assemble a scene prompt."""

    def __init__(self, cfg: DescribeConfig = None):
        self.cfg = cfg or DescribeConfig.from_config()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def describe(self, fields, segments, graph: SegmentGraph, views: Sequence, question: str = '') -> SceneDescription:
        quotas = allocate_budget(self.cfg.budget, graph, self.cfg.multi_scale)
        object_ids = sorted(quotas)
        self.logger.info(f"Describing {len(object_ids)} objects with {quotas[object_ids[0]].quota} tokens each "
                         f"({self.cfg.vi_vd_mode}, {self.cfg.workers} workers)")
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as executor:
            futures = [executor.submit(sample_object_description, fields, segments, graph, object_id,
                                       quotas[object_id], self.cfg, views) for object_id in object_ids]
            descriptions = [f.result() for f in futures]

        for description in descriptions:
            graph.metadata.setdefault('objects', {})[str(description.object_id)] = {
                'canonical_direction': [float(x) for x in description.canonical_direction],
                'centroid': [float(x) for x in description.centroid],
                'fill_ratio': description.fill_ratio,
            }

        centroids = np.stack([d.centroid for d in descriptions])
        order = radar_order(centroids, sweep_lambda=self.cfg.sweep_lambda)
        if not self.cfg.radar_sweep:
            order = RadarOrder(list(range(len(descriptions))), order.keys, order.flags)
        ordered = [descriptions[i] for i in order.order]
        prompt = assemble_prompt(ordered, question, self.cfg.scene_id, self.cfg.preamble)
        return SceneDescription(prompt, descriptions, order)
