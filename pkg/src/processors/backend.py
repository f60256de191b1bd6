"""Answer backends over a ScenePrompt plus grounding and segmentation export.

`answer_oracle` is the verifiable stand-in for a language model: nearest-feature
reasoning over each object's token set. `remote_answer` posts the prompt wire
format to a real model server. `ground` and `export_segmentation_pointcloud`
turn an object id (or a label dictionary) back into labeled 3D points.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import requests
from pydantic import BaseModel, Field, model_validator

from config_loader import get_config
from errors import (EndpointConnectionError, EndpointNotFoundError, EndpointStatusError, EndpointTimeoutError,
                    InvalidArgumentError, ProtocolError)
from processors.decomp import SegmentGraph, assign_points, nearest_segment
from processors.describe import ScenePrompt
from processors.render import bounded_rays, camera_rays
from processors.scenegen import SCALES

logger = logging.getLogger(__name__)

ALL_SCALES = 'all'


class StructuredQuery(BaseModel):
    """A machine-checkable question over the scene prompt.

    `find_object_by_feature`, `count_objects_by_feature` and `exists` need an
    `embedding` (or a `reference_virtual_id` whose features stand in for it);
    `nearest_object_to` needs `reference_virtual_id`. `threshold` applies to
    the similarity `(1 + cos) / 2`, which lies in [0, 1], not to the raw cosine.
    """

    kind: Literal['find_object_by_feature', 'count_objects_by_feature', 'nearest_object_to', 'exists']
    embedding: Optional[List[float]] = None
    reference_virtual_id: Optional[int] = None
    threshold: float = Field(default=0.5, description="Minimum (1 + cos) / 2 for count and exists")

    @model_validator(mode='after')
    def _kind_fields(self):
        if self.kind == 'nearest_object_to' and self.reference_virtual_id is None:
            raise ValueError("nearest_object_to needs reference_virtual_id")
        if self.kind != 'nearest_object_to' and self.embedding is None and self.reference_virtual_id is None:
            raise ValueError(f"{self.kind} needs an embedding or reference_virtual_id")
        if self.embedding is not None and len(self.embedding) == 0:
            raise ValueError("embedding must not be empty")
        return self


@dataclass
class OracleAnswer:
    kind: str
    virtual_id: Optional[int] = None
    object_id: Optional[int] = None
    count: Optional[int] = None
    exists: Optional[bool] = None
    scores: Dict[int, float] = field(default_factory=dict)

    @property
    def text(self) -> str:
        if self.kind in ('find_object_by_feature', 'nearest_object_to'):
            return f"<image id={self.virtual_id}>"
        if self.kind == 'count_objects_by_feature':
            return str(self.count)
        return 'yes' if self.exists else 'no'

    def to_reply(self) -> Dict:
        reply = {'answer': self.text}
        if self.virtual_id is not None:
            reply['chosen_virtual_id'] = self.virtual_id
        return reply


def object_feature(vectors: np.ndarray, tags: Sequence[str], prefer_vi: bool = True) -> np.ndarray:
    """Mean token of one object; VI-tagged tokens only when there are any and `prefer_vi` is set.

    Rows are sorted lexicographically before summing so the float result does
    not depend on token order.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.size == 0:
        raise InvalidArgumentError("Object has no tokens")
    tags = np.asarray(tags)
    if prefer_vi and np.any(tags == 'VI'):
        vectors = vectors[tags == 'VI']
    vectors = vectors[np.lexsort(vectors.T[::-1])]
    return vectors.sum(axis=0) / len(vectors)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denominator = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denominator) if denominator > 0 else 0.0


def answer_oracle(prompt: ScenePrompt, query: StructuredQuery, prefer_vi: bool = True) -> OracleAnswer:
    """Answer a structured query by cosine reasoning over per-object mean tokens.

    `find` returns the argmax-cosine object (lowest virtual id on ties).
    `count` and `exists` threshold the similarity `(1 + cos) / 2`, so a
    threshold of 0 matches every object and anything above 1 matches none.
    `nearest_object_to` uses the spatial centroids of the objects.

    Raises:
        InvalidArgumentError: On an empty prompt or an unknown reference id.
    """
    if not prompt.objects:
        raise InvalidArgumentError("Cannot answer over an empty scene prompt")
    objects = sorted(prompt.objects, key=lambda o: o.virtual_id)
    answer = OracleAnswer(kind=query.kind)

    if query.kind == 'nearest_object_to':
        reference = prompt.object_for(query.reference_virtual_id)
        distances = {o.virtual_id: float(np.linalg.norm(np.asarray(o.centroid) - np.asarray(reference.centroid)))
                     for o in objects if o.virtual_id != reference.virtual_id}
        if not distances:
            raise InvalidArgumentError("nearest_object_to needs at least two objects")
        answer.scores = distances
        answer.virtual_id = min(distances, key=lambda v: (distances[v], v))
        answer.object_id = prompt.object_for(answer.virtual_id).object_id
        return answer

    if query.embedding is not None:
        target = np.asarray(query.embedding, dtype=np.float64)
    else:
        reference = prompt.object_for(query.reference_virtual_id)
        target = object_feature(reference.vectors, reference.tags, prefer_vi)
    cosines = {o.virtual_id: _cosine(object_feature(o.vectors, o.tags, prefer_vi), target) for o in objects}
    answer.scores = cosines

    if query.kind == 'find_object_by_feature':
        answer.virtual_id = max(cosines, key=lambda v: (cosines[v], -v))
        answer.object_id = prompt.object_for(answer.virtual_id).object_id
        return answer
    matches = [v for v, c in cosines.items() if (1.0 + c) / 2.0 >= query.threshold]
    answer.count = len(matches)
    answer.exists = bool(matches)
    return answer


def remote_answer(prompt: ScenePrompt, endpoint: str = None, timeout: float = None) -> Dict:
    """POST the prompt wire bytes to `endpoint` and return the decoded reply.

    No retries. The prompt is not modified.

    Raises:
        EndpointTimeoutError, EndpointConnectionError, EndpointNotFoundError,
        EndpointStatusError, ProtocolError.
    """
    config = get_config()
    endpoint = endpoint or config.get_answer_endpoint()
    timeout = timeout if timeout is not None else config.get_answer_timeout()
    body = prompt.to_json_bytes()
    logger.info(f"Posting {len(body)} bytes ({len(prompt.objects)} objects) to {endpoint}")
    try:
        response = requests.post(endpoint, data=body, headers={'Content-Type': 'application/json'}, timeout=timeout)
    except requests.Timeout as e:
        raise EndpointTimeoutError(f"No reply within {timeout}s", endpoint, timeout) from e
    except requests.ConnectionError as e:
        raise EndpointConnectionError(f"Could not connect: {e}", endpoint, e) from e

    if response.status_code == 404:
        raise EndpointNotFoundError("Endpoint not found", endpoint, 404, response.text, dict(response.headers))
    if not 200 <= response.status_code < 300:
        raise EndpointStatusError(f"Endpoint replied {response.status_code}", endpoint, response.status_code,
                                  response.text, dict(response.headers))
    try:
        reply = response.json()
    except ValueError as e:
        raise ProtocolError(f"Reply is not JSON: {e}", endpoint, response.text) from e
    if not isinstance(reply, dict) or not isinstance(reply.get('answer'), str):
        raise ProtocolError("Reply lacks a string 'answer' member", endpoint, response.text)
    chosen = reply.get('chosen_virtual_id')
    if chosen is not None and (isinstance(chosen, bool) or not isinstance(chosen, int)):
        raise ProtocolError("'chosen_virtual_id' must be an integer", endpoint, response.text)
    return reply


class GroundingConfig(BaseModel):
    voxel_size: float = Field(default=0.01, gt=0.0)
    aggregation: Literal['feature', 'majority'] = 'feature'
    pixel_stride: int = Field(default=2, ge=1)
    samples_per_ray: int = Field(default=64, ge=1)
    min_opacity: float = Field(default=0.5, ge=0.0, le=1.0)
    workers: int = Field(default=4, ge=1)

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'GroundingConfig':
        config = config or get_config()
        values = config.get_dict('grounding')
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class ViewSurface:
    view: int
    pixels: np.ndarray
    points: np.ndarray
    ids: np.ndarray
    embeddings: np.ndarray


@dataclass
class GroundingResult:
    virtual_id: int
    object_id: int
    points: np.ndarray
    labels: np.ndarray
    point_ids: np.ndarray
    masks: Dict[int, np.ndarray]

    @property
    def positive(self) -> np.ndarray:
        return self.points[self.labels]


def view_surface(fields, segments, graph: SegmentGraph, pose, view: int, cfg: GroundingConfig,
                 scale: str = 'large') -> ViewSurface:
    """Expected-depth surface points of one view's pixel grid and their `scale` assignment."""
    height, width = pose.resolution
    rows, cols = np.meshgrid(np.arange(0, height, cfg.pixel_stride) + 0.5,
                             np.arange(0, width, cfg.pixel_stride) + 0.5, indexing='ij')
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    origins, directions = camera_rays(pose, pixels)
    rays = bounded_rays(origins, directions, fields.bounds)
    rendered = fields.render_geometry(rays['origins'], rays['directions'], rays['near'], rays['far'],
                                      cfg.samples_per_ray)
    opacity = rendered['opacity']
    keep = np.flatnonzero(opacity >= cfg.min_opacity)
    points = rays['origins'][keep] + (rendered['depth'][keep] / opacity[keep])[:, None] * rays['directions'][keep]
    if len(points):
        embeddings, _ = segments.point_embeddings(points, scale)
        ids = assign_points(graph, segments, points, scale)
    else:
        embeddings, ids = np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return ViewSurface(view, pixels[rays['index'][keep]], points, ids, embeddings)


def _voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(points / voxel_size).astype(np.int64)


def fuse_views(surfaces: Sequence[ViewSurface], voxel_size: float):
    """Deduplicate surface points of all views on a voxel grid.

    Returns the first point of each voxel (in view order) and, per input
    surface, the voxel index of each of its points.
    """
    if not any(len(s.points) for s in surfaces):
        raise InvalidArgumentError("No view produced any opaque surface point")
    stacked = np.concatenate([s.points for s in surfaces])
    keys = _voxel_keys(stacked, voxel_size)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind='stable')
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    points = stacked[first[order]]
    splits = np.cumsum([len(s.points) for s in surfaces])[:-1]
    return points, np.split(remap[inverse], splits)


def _majority_labels(n_points: int, surfaces: Sequence[ViewSurface], membership: Sequence[np.ndarray]) -> np.ndarray:
    votes: Dict[int, Dict[int, int]] = {}
    for surface, index in zip(surfaces, membership):
        for p, segment in zip(index, surface.ids):
            point_votes = votes.setdefault(int(p), {})
            point_votes[int(segment)] = point_votes.get(int(segment), 0) + 1
    labels = np.full(n_points, -1, dtype=np.int64)
    for p, point_votes in votes.items():
        labels[p] = max(point_votes, key=lambda s: (point_votes[s], -s))
    return labels


def _feature_labels(n_points: int, surfaces, membership, graph: SegmentGraph, scale: str) -> np.ndarray:
    dim = next(s.embeddings.shape[1] for s in surfaces if len(s.points))
    sums = np.zeros((n_points, dim))
    counts = np.zeros(n_points)
    for surface, index in zip(surfaces, membership):
        np.add.at(sums, index, surface.embeddings)
        np.add.at(counts, index, 1.0)
    return nearest_segment(graph, sums / np.maximum(counts, 1.0)[:, None], scale)


def label_points(fields, segments, graph: SegmentGraph, poses: Sequence, cfg: GroundingConfig = None,
                 scale: str = 'large'):
    """Scene point cloud with one `scale` segment id per point, fused over the views.

    Returns (points, point_ids, surfaces).
    """
    cfg = cfg or GroundingConfig.from_config()
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        surfaces = list(executor.map(lambda v: view_surface(fields, segments, graph, poses[v], v, cfg, scale),
                                     range(len(poses))))
    points, membership = fuse_views(surfaces, cfg.voxel_size)
    if cfg.aggregation == 'majority':
        point_ids = _majority_labels(len(points), surfaces, membership)
    else:
        point_ids = _feature_labels(len(points), surfaces, membership, graph, scale)
    return points, point_ids, surfaces


def ground(graph: SegmentGraph, fields, segments, virtual_id: int, prompt: ScenePrompt, poses: Sequence,
           cfg: GroundingConfig = None) -> GroundingResult:
    """Binary 3D segmentation of the object shown under `virtual_id`.

    Raises:
        InvalidArgumentError: If the virtual id is not in the prompt.
    """
    object_id = prompt.object_for(virtual_id).object_id
    points, point_ids, surfaces = label_points(fields, segments, graph, poses, cfg)
    masks = {}
    for surface in surfaces:
        height, width = poses[surface.view].resolution
        mask = np.zeros((height, width), dtype=bool)
        rows = np.clip(surface.pixels[:, 0].astype(int), 0, height - 1)
        cols = np.clip(surface.pixels[:, 1].astype(int), 0, width - 1)
        mask[rows, cols] = surface.ids == object_id
        masks[surface.view] = mask
    labels = point_ids == object_id
    logger.info(f"Grounded virtual image {virtual_id} (object {object_id}): "
                f"{int(labels.sum())}/{len(points)} points positive")
    return GroundingResult(virtual_id, object_id, points, labels, point_ids, masks)


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    scale: str


def classify_labels(label_vectors: Mapping[str, np.ndarray], dictionary: np.ndarray, scale: str):
    """Argmax-cosine class per point; `all` takes the best score over every scale."""
    dictionary = _normalize_rows(np.asarray(dictionary, dtype=np.float64).reshape(len(dictionary), -1))
    scales = list(SCALES) if scale == ALL_SCALES else [scale]
    scores = np.stack([_normalize_rows(label_vectors[s]) @ dictionary.T for s in scales])
    best = scores.max(axis=0)
    return np.argmax(best, axis=-1), best.max(axis=-1)


def export_segmentation_pointcloud(graph: SegmentGraph, fields, segments, poses: Sequence,
                                   dictionary: np.ndarray, scale: str = ALL_SCALES,
                                   cfg: GroundingConfig = None) -> LabeledPointCloud:
    """Label every fused surface point with the closest dictionary entry.

    Raises:
        InvalidArgumentError: On an empty dictionary or an unknown scale.
    """
    dictionary = np.asarray(dictionary, dtype=np.float64)
    if dictionary.size == 0:
        raise InvalidArgumentError("Label dictionary is empty")
    if scale != ALL_SCALES and scale not in SCALES:
        raise InvalidArgumentError(f"Unknown scale {scale!r}")
    points, _, _ = label_points(fields, segments, graph, poses, cfg)
    label_vectors = {s: segments.point_labels(points, s)[0] for s in SCALES}
    labels, scores = classify_labels(label_vectors, dictionary.reshape(len(dictionary), -1), scale)
    return LabeledPointCloud(points, labels, scores, scale)


def query_segmentation(fields, segments, graph: SegmentGraph, poses: Sequence, query: np.ndarray,
                       threshold: float = 0.5, scale: str = ALL_SCALES, cfg: GroundingConfig = None):
    """Points whose label embedding is within cosine `threshold` of a single text-like query."""
    cloud = export_segmentation_pointcloud(graph, fields, segments, poses, np.asarray(query)[None, :], scale, cfg)
    return cloud.points, cloud.scores >= threshold


def write_ply(path, points: np.ndarray, labels: np.ndarray) -> Path:
    """ASCII PLY with float x/y/z and an integer `label` per vertex."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if len(points) != len(labels):
        raise InvalidArgumentError(f"{len(points)} points but {len(labels)} labels")
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property float x", "property float y", "property float z", "property int label", "end_header"]
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(header) + "\n")
        for (x, y, z), label in zip(points, labels):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {label}\n")
    return path


def read_ply(path):
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    start = lines.index('end_header') + 1
    rows = [line.split() for line in lines[start:] if line.strip()]
    points = np.array([[float(v) for v in row[:3]] for row in rows]).reshape(-1, 3)
    labels = np.array([int(row[3]) for row in rows], dtype=np.int64)
    return points, labels


def parse_query(payload: Union[Dict, str, None]) -> Optional[StructuredQuery]:
    if payload is None:
        return None
    if isinstance(payload, str):
        payload = json.loads(payload)
    return StructuredQuery.model_validate(payload)
