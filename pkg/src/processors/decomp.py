"""Hierarchical object decomposition of a segment-embedding field.

Rays sampled from the supervision views are rendered into per-scale segment
embeddings, clustered per scale with HDBSCAN, refined (drop / split / merge),
and linked fine-to-coarse by co-occurrence into a three-level SegmentGraph.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import HDBSCAN

from config_loader import get_config
from errors import InvalidArgumentError
from processors.render import bounded_rays, camera_rays
from processors.scenegen import SCALES

logger = logging.getLogger(__name__)

NOISE = -1
UNASSIGNED = -2
FINER = {'medium': 'small', 'large': 'medium'}
COARSER = {'small': 'medium', 'medium': 'large'}


class ScaleClusterParams(BaseModel):
    min_cluster_size: int = Field(ge=2)
    min_samples: int = Field(ge=1)
    cluster_selection_epsilon: float = Field(ge=0.0)


class ClusterParams(BaseModel):
    small: ScaleClusterParams = ScaleClusterParams(min_cluster_size=10, min_samples=3, cluster_selection_epsilon=0.01)
    medium: ScaleClusterParams = ScaleClusterParams(min_cluster_size=30, min_samples=5, cluster_selection_epsilon=0.05)
    large: ScaleClusterParams = ScaleClusterParams(min_cluster_size=50, min_samples=10, cluster_selection_epsilon=0.1)

    def for_scale(self, scale: str) -> ScaleClusterParams:
        return getattr(self, scale)


class RefineParams(BaseModel):
    enabled: bool = True
    min_members: int = Field(default=10, ge=1)
    variance_percentile: float = Field(default=85.0, gt=0.0, le=100.0)
    variance_floor: float = Field(default=0.1, ge=0.0)
    split_cosine: float = Field(default=0.75, ge=-1.0, le=1.0)
    merge_cosine: float = Field(default=0.85, ge=-1.0, le=1.0)
    max_passes: int = Field(default=20, ge=1)


class DecompConfig(BaseModel):
    n_rays: int = Field(default=3 * 8192, ge=1)
    min_opacity: float = Field(default=0.5, ge=0.0, le=1.0)
    samples_per_ray: int = Field(default=64, ge=1)
    scales: ClusterParams = Field(default_factory=ClusterParams)
    refine: RefineParams = Field(default_factory=RefineParams)
    seed: int = 0

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'DecompConfig':
        config = config or get_config()
        values = config.get_dict('decomp')
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class ClusterResult:
    labels: np.ndarray
    confidences: np.ndarray


def cluster_scale(embeddings: np.ndarray, params: ScaleClusterParams) -> ClusterResult:
    """HDBSCAN over one scale's ray embeddings.

    Confidence is the HDBSCAN membership probability (0 for noise). Fewer points
    than `min_cluster_size` are all noise; a set of identical points is a single
    cluster.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < params.min_cluster_size:
        return ClusterResult(np.full(n, NOISE, dtype=np.int64), np.zeros(n))
    if np.all(np.ptp(embeddings, axis=0) == 0):
        return ClusterResult(np.zeros(n, dtype=np.int64), np.ones(n))
    model = HDBSCAN(
        min_cluster_size=params.min_cluster_size,
        min_samples=min(params.min_samples, n),
        cluster_selection_epsilon=params.cluster_selection_epsilon,
        allow_single_cluster=True,
    ).fit(embeddings)
    labels = model.labels_.astype(np.int64)
    labels[labels < 0] = NOISE
    confidences = np.where(labels >= 0, model.probabilities_, 0.0)
    return ClusterResult(labels, confidences)


@dataclass
class CentroidResult:
    centroids: Dict[int, np.ndarray]
    fallback: List[int] = field(default_factory=list)


def compute_centroids(embeddings: np.ndarray, labels: np.ndarray, confidences: np.ndarray) -> CentroidResult:
    """Confidence-weighted mean embedding of every non-noise label.

    A label whose members have zero total confidence falls back to the
    unweighted mean and is reported in `fallback`.

    Raises:
        InvalidArgumentError: If every label is noise.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    confidences = np.asarray(confidences, dtype=np.float64)
    ids = sorted(int(i) for i in np.unique(labels) if i >= 0)
    if not ids:
        raise InvalidArgumentError("compute_centroids needs at least one non-noise label")
    centroids, fallback = {}, []
    for i in ids:
        members = labels == i
        weights = confidences[members]
        total = weights.sum()
        if total > 0:
            centroids[i] = (weights[:, None] * embeddings[members]).sum(axis=0) / total
        else:
            centroids[i] = embeddings[members].mean(axis=0)
            fallback.append(i)
    if fallback:
        logger.warning(f"Zero total confidence for segments {fallback}; used unweighted means")
    return CentroidResult(centroids, fallback)


@dataclass
class RayObservations:
    """Per-ray rendered quantities shared by all scales of one clustering batch."""

    embeddings: Dict[str, np.ndarray]
    label_vectors: Dict[str, np.ndarray]
    points: np.ndarray
    directions: np.ndarray
    labels: Dict[str, np.ndarray] = field(default_factory=dict)
    confidences: Dict[str, np.ndarray] = field(default_factory=dict)
    variance_cutoffs: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Segment:
    id: int
    scale: str
    members: int
    centroid: np.ndarray
    label_centroid: np.ndarray
    confidence_mean: float = 0.0
    confidence_min: float = 0.0
    parent: Optional[int] = None
    spatial_centroid: Optional[np.ndarray] = None
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'id': self.id,
            'scale': self.scale,
            'members': self.members,
            'centroid': [float(x) for x in self.centroid],
            'label_centroid': [float(x) for x in self.label_centroid],
            'confidence_mean': self.confidence_mean,
            'confidence_min': self.confidence_min,
            'parent': self.parent,
            'spatial_centroid': None if self.spatial_centroid is None else [float(x) for x in self.spatial_centroid],
            'flags': list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Segment':
        spatial = data.get('spatial_centroid')
        return cls(
            id=int(data['id']), scale=data['scale'], members=int(data['members']),
            centroid=np.asarray(data['centroid'], dtype=np.float64),
            label_centroid=np.asarray(data['label_centroid'], dtype=np.float64),
            confidence_mean=float(data.get('confidence_mean', 0.0)),
            confidence_min=float(data.get('confidence_min', 0.0)),
            parent=data.get('parent'),
            spatial_centroid=None if spatial is None else np.asarray(spatial, dtype=np.float64),
            flags=list(data.get('flags', [])),
        )


@dataclass
class SegmentGraph:
    """Three-level forest of segments; small -> medium -> large parent edges.

    `metadata['objects']` carries per-object data filled in by later stages
    (canonical direction).
    """

    segments: Dict[str, Dict[int, Segment]]
    metadata: Dict = field(default_factory=dict)

    def ids(self, scale: str) -> List[int]:
        return sorted(self.segments.get(scale, {}))

    def objects(self) -> List[int]:
        return self.ids('large')

    def segment(self, scale: str, segment_id: int) -> Segment:
        try:
            return self.segments[scale][segment_id]
        except KeyError:
            raise InvalidArgumentError(f"No {scale} segment with id {segment_id}") from None

    def children(self, scale: str, segment_id: int) -> List[int]:
        """Ids of the segments one scale finer whose parent is `segment_id`."""
        if scale not in FINER:
            return []
        return [i for i in self.ids(FINER[scale]) if self.segments[FINER[scale]][i].parent == segment_id]

    def centroid_matrix(self, scale: str) -> Tuple[np.ndarray, np.ndarray]:
        ids = self.ids(scale)
        if not ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
        return np.asarray(ids, dtype=np.int64), np.stack([self.segments[scale][i].centroid for i in ids])

    def to_dict(self) -> Dict:
        return {
            'version': 1,
            'scales': {scale: [self.segments[scale][i].to_dict() for i in self.ids(scale)] for scale in SCALES},
            'metadata': self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SegmentGraph':
        segments = {scale: {} for scale in SCALES}
        for scale, items in data.get('scales', {}).items():
            for item in items:
                segment = Segment.from_dict(item)
                segments[scale][segment.id] = segment
        return cls(segments, data.get('metadata', {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path) -> 'SegmentGraph':
        return cls.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


def _co_occurrence_parents(fine: np.ndarray, coarse: np.ndarray) -> Dict[int, int]:
    """Parent of every fine id by co-occurrence; ties to the larger coarse segment, then lower id."""
    fine_ids = sorted(int(i) for i in np.unique(fine) if i >= 0)
    coarse_ids, coarse_sizes = np.unique(coarse[coarse >= 0], return_counts=True)
    size_of = dict(zip(coarse_ids.tolist(), coarse_sizes.tolist()))
    parents = {}
    for f in fine_ids:
        overlap = coarse[(fine == f) & (coarse >= 0)]
        if len(overlap) == 0:
            parents[f] = UNASSIGNED
            continue
        ids, counts = np.unique(overlap, return_counts=True)
        best = max(zip(ids.tolist(), counts.tolist()), key=lambda ic: (ic[1], size_of[ic[0]], -ic[0]))
        parents[f] = int(best[0])
    return parents


def _label_means(label_vectors: np.ndarray, labels: np.ndarray) -> Dict[int, np.ndarray]:
    return {int(i): label_vectors[labels == i].mean(axis=0) for i in np.unique(labels) if i >= 0}


def _cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    unit = np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)
    return unit @ unit.T


@dataclass
class RefineReport:
    labels: Dict[str, np.ndarray]
    dropped: Dict[str, List[int]] = field(default_factory=dict)
    split: Dict[str, List[Tuple[int, List[int]]]] = field(default_factory=dict)
    merged: Dict[str, List[Tuple[int, List[int]]]] = field(default_factory=dict)
    variance_cutoffs: Dict[str, float] = field(default_factory=dict)
    passes: int = 0
    reverted: bool = False

    @property
    def changed(self) -> bool:
        return any(self.dropped.values()) or any(self.split.values()) or any(self.merged.values())


def _variances(labels: np.ndarray, label_vectors: np.ndarray) -> Dict[int, float]:
    out = {}
    for i in sorted(int(i) for i in np.unique(labels) if i >= 0):
        members = label_vectors[labels == i]
        out[i] = float(np.mean(np.sum((members - members.mean(axis=0)) ** 2, axis=-1)))
    return out


def variance_cutoffs(labels: Dict[str, np.ndarray], label_vectors: Dict[str, np.ndarray],
                     params: RefineParams) -> Dict[str, float]:
    """Per-scale label-variance cutoff above which a segment counts as noisy.

    The cutoff is the larger of the `variance_percentile` of the segment
    variances and `variance_floor` times the mean squared norm of the clustered
    label vectors. A scale without segments gets an infinite cutoff.
    """
    cutoffs = {}
    for scale in SCALES:
        variances = _variances(labels[scale], label_vectors[scale])
        if not variances:
            cutoffs[scale] = float('inf')
            continue
        clustered = label_vectors[scale][labels[scale] >= 0]
        floor = params.variance_floor * float(np.mean(np.sum(clustered ** 2, axis=-1)))
        cutoffs[scale] = max(float(np.percentile(list(variances.values()), params.variance_percentile)), floor)
    return cutoffs


def _drop_noisy(labels: np.ndarray, label_vectors: np.ndarray, cutoff: float,
                params: RefineParams) -> Tuple[np.ndarray, List[int]]:
    variances = _variances(labels, label_vectors)
    dropped = [i for i, variance in variances.items()
               if int((labels == i).sum()) < params.min_members or variance > cutoff]
    out = labels.copy()
    out[np.isin(out, dropped)] = NOISE
    return out, dropped


def _child_groups(children: List[int], fine_means: Dict[int, np.ndarray], params: RefineParams) -> Tuple[int, np.ndarray]:
    """Connected groups of children once pairs with label cosine >= `split_cosine` are linked."""
    similarity = _cosine_matrix(np.stack([fine_means[f] for f in children]))
    return connected_components(csr_matrix(similarity >= params.split_cosine), directed=False)


def _needs_split(coarse: np.ndarray, fine: np.ndarray, fine_label_vectors: np.ndarray, params: RefineParams) -> bool:
    parents = _co_occurrence_parents(fine, coarse)
    fine_means = _label_means(fine_label_vectors, fine)
    for c in sorted(int(i) for i in np.unique(coarse) if i >= 0):
        children = sorted(f for f, p in parents.items() if p == c)
        if len(children) >= 2 and _child_groups(children, fine_means, params)[0] > 1:
            return True
    return False


def _split_coarse(coarse: np.ndarray, fine: np.ndarray, coarse_embeddings: np.ndarray, fine_label_vectors: np.ndarray,
                  params: RefineParams) -> Tuple[np.ndarray, List[Tuple[int, List[int]]]]:
    parents = _co_occurrence_parents(fine, coarse)
    fine_means = _label_means(fine_label_vectors, fine)
    out = coarse.copy()
    next_id = int(coarse.max()) + 1 if (coarse >= 0).any() else 0
    splits = []
    for c in sorted(int(i) for i in np.unique(coarse) if i >= 0):
        children = sorted(f for f, p in parents.items() if p == c)
        if len(children) < 2:
            continue
        n_components, component = _child_groups(children, fine_means, params)
        if n_components < 2:
            continue
        members = coarse == c
        group_of_child = dict(zip(children, component.tolist()))
        group = np.array([group_of_child.get(int(f), -1) for f in fine[members]], dtype=np.int64)
        assigned = group >= 0
        member_embeddings = coarse_embeddings[members]
        centers = np.stack([member_embeddings[group == g].mean(axis=0) for g in range(n_components)])
        if (~assigned).any():
            distances = np.linalg.norm(member_embeddings[~assigned, None, :] - centers[None], axis=-1)
            group[~assigned] = np.argmin(distances, axis=-1)
        # the component holding the lowest child id keeps the original id
        order = sorted(range(n_components), key=lambda g: min(f for f in children if group_of_child[f] == g))
        new_ids = {order[0]: c}
        for g in order[1:]:
            new_ids[g] = next_id
            next_id += 1
        out[members] = np.array([new_ids[int(g)] for g in group], dtype=np.int64)
        splits.append((c, [new_ids[g] for g in order]))
    return out, splits


def _merge_similar(labels: np.ndarray, embeddings: np.ndarray, label_vectors: np.ndarray, confidences: np.ndarray,
                   params: RefineParams, fine: Optional[np.ndarray] = None,
                   fine_label_vectors: Optional[np.ndarray] = None) -> Tuple[np.ndarray, List[Tuple[int, List[int]]]]:
    """Union segments pairwise in id order; with `fine`, skip a union that rule (ii) would split again."""
    ids = sorted(int(i) for i in np.unique(labels) if i >= 0)
    if len(ids) < 2:
        return labels, []
    centroids = compute_centroids(embeddings, labels, confidences).centroids
    label_means = _label_means(label_vectors, labels)
    similar = (_cosine_matrix(np.stack([label_means[i] for i in ids])) > params.merge_cosine) | \
              (_cosine_matrix(np.stack([centroids[i] for i in ids])) > params.merge_cosine)
    out = labels.copy()
    root = {i: i for i in ids}
    for a, b in zip(*np.nonzero(np.triu(similar, k=1))):
        keep, gone = sorted((root[ids[a]], root[ids[b]]))
        if keep == gone:
            continue
        trial = np.where(out == gone, keep, out)
        if fine is not None and _needs_split(trial, fine, fine_label_vectors, params):
            continue
        out = trial
        root = {i: keep if r == gone else r for i, r in root.items()}
    merges = []
    for keep in sorted(set(root.values())):
        group = [i for i in ids if root[i] == keep and i != keep]
        if group:
            merges.append((keep, group))
    return out, merges


def _refine_pass(labels: Dict[str, np.ndarray], observations: RayObservations, cutoffs: Dict[str, float],
                 params: RefineParams) -> Tuple[Dict[str, np.ndarray], RefineReport]:
    labels = {s: labels[s].copy() for s in SCALES}
    step = RefineReport(labels)
    for scale in SCALES:
        labels[scale], step.dropped[scale] = _drop_noisy(labels[scale], observations.label_vectors[scale],
                                                         cutoffs[scale], params)
    step.split['small'] = []
    for scale in ('medium', 'large'):
        labels[scale], step.split[scale] = _split_coarse(
            labels[scale], labels[FINER[scale]], observations.embeddings[scale],
            observations.label_vectors[FINER[scale]], params,
        )
    for scale in SCALES:
        confidences = observations.confidences.get(scale, np.ones(len(labels[scale])))
        fine = labels[FINER[scale]] if scale in FINER else None
        fine_vectors = observations.label_vectors[FINER[scale]] if scale in FINER else None
        labels[scale], step.merged[scale] = _merge_similar(
            labels[scale], observations.embeddings[scale], observations.label_vectors[scale], confidences, params,
            fine, fine_vectors,
        )
    return labels, step


def refine_segments(observations: RayObservations, params: RefineParams,
                    cutoffs: Optional[Dict[str, float]] = None) -> RefineReport:
    """Drop noisy segments, split under-segmented coarse segments, merge near-duplicates.

    One pass applies (i) to (iii) in order:

    (i) Per scale, drop segments with fewer than `min_members` rays or whose
    label-embedding variance exceeds the scale's cutoff (see `variance_cutoffs`).
    (ii) Split medium, then large, segments whose children fall into several
    groups once children with label cosine >= `split_cosine` are linked.
    (iii) Per scale, merge segments whose label centroids or confidence-weighted
    embedding centroids have cosine > `merge_cosine`; the lowest id survives and
    a merge that (ii) would undo is skipped.

    Passes repeat until one changes nothing, so the result is a fixed point:
    refining it again with the same cutoffs reports no change. The cutoffs are
    taken from `cutoffs`, else from `observations.variance_cutoffs`, else
    computed from the input labels; they are recorded on both the observations
    and the report. If the result would leave every scale empty the input
    labels are returned.
    """
    original = {s: observations.labels[s].copy() for s in SCALES}
    if cutoffs is None:
        cutoffs = observations.variance_cutoffs or variance_cutoffs(original, observations.label_vectors, params)
    observations.variance_cutoffs = dict(cutoffs)
    if not params.enabled:
        return RefineReport(original, variance_cutoffs=dict(cutoffs))

    labels = original
    report = RefineReport(labels, variance_cutoffs=dict(cutoffs))
    for scale in SCALES:
        report.dropped[scale], report.split[scale], report.merged[scale] = [], [], []
    while report.passes < params.max_passes:
        labels, step = _refine_pass(labels, observations, cutoffs, params)
        report.passes += 1
        if not step.changed:
            break
        for scale in SCALES:
            report.dropped[scale] += step.dropped[scale]
            report.split[scale] += step.split[scale]
            report.merged[scale] += step.merged[scale]
    else:
        logger.warning(f"Refinement still changing after {params.max_passes} passes; keeping the last pass")

    if all(not (labels[s] >= 0).any() for s in SCALES):
        logger.warning("Refinement would remove every segment; keeping the unrefined clustering")
        return RefineReport({s: observations.labels[s].copy() for s in SCALES},
                            variance_cutoffs=dict(cutoffs), reverted=True)

    report.labels = labels
    for scale in SCALES:
        if report.dropped[scale] or report.split[scale] or report.merged[scale]:
            logger.info(f"Refined {scale} in {report.passes} passes: dropped {report.dropped[scale]}, "
                        f"split {report.split[scale]}, merged {report.merged[scale]}")
    return report


def build_hierarchy(labels: Dict[str, np.ndarray], observations: Optional[RayObservations] = None) -> SegmentGraph:
    """Segment graph from per-scale labels of one shared ray set.

    The parent of a fine segment is the coarser segment it co-occurs with most
    often (noise excluded; ties to the larger coarse segment, then the lower id).
    A fine segment with no co-occurring coarse label hangs under the synthetic
    `UNASSIGNED` root and is flagged. With `observations`, segments carry
    confidence-weighted embedding centroids, label centroids and the mean
    surface point of their rays.
    """
    segments = {scale: {} for scale in SCALES}
    for scale in SCALES:
        scale_labels = np.asarray(labels[scale])
        ids = sorted(int(i) for i in np.unique(scale_labels) if i >= 0)
        if not ids:
            continue
        if observations is not None:
            confidences = observations.confidences.get(scale, np.ones(len(scale_labels)))
            centroids = compute_centroids(observations.embeddings[scale], scale_labels, confidences)
            label_means = _label_means(observations.label_vectors[scale], scale_labels)
        for i in ids:
            members = scale_labels == i
            if observations is not None:
                conf = confidences[members]
                segment = Segment(
                    id=i, scale=scale, members=int(members.sum()),
                    centroid=centroids.centroids[i], label_centroid=label_means[i],
                    confidence_mean=float(conf.mean()), confidence_min=float(conf.min()),
                    spatial_centroid=observations.points[members].mean(axis=0),
                    flags=['zero_confidence'] if i in centroids.fallback else [],
                )
            else:
                segment = Segment(id=i, scale=scale, members=int(members.sum()), centroid=np.zeros(0),
                                  label_centroid=np.zeros(0))
            segments[scale][i] = segment

    for fine, coarse in (('small', 'medium'), ('medium', 'large')):
        parents = _co_occurrence_parents(np.asarray(labels[fine]), np.asarray(labels[coarse]))
        for f, p in parents.items():
            segments[fine][f].parent = p
            if p == UNASSIGNED:
                segments[fine][f].flags.append('unassigned_parent')
                logger.warning(f"{fine} segment {f} has no co-occurring {coarse} segment")
    return SegmentGraph(segments, {'objects': {}})


def nearest_segment(graph: SegmentGraph, embeddings: np.ndarray, scale: str) -> np.ndarray:
    """Nearest-centroid segment id for each embedding row; lowest id on ties."""
    ids, centroids = graph.centroid_matrix(scale)
    if len(ids) == 0:
        raise InvalidArgumentError(f"Graph has no {scale} segments")
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, centroids.shape[1])
    distances = np.sum((embeddings[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return ids[np.argmin(distances, axis=-1)]


@dataclass
class PointAssignment:
    segment_id: int
    clamped: bool


def assign_point(graph: SegmentGraph, segments, X, scale: str) -> PointAssignment:
    """Assign a 3D point to the nearest `scale` centroid of `e_scale(X)`; never noise."""
    embedding, clamped = segments.point_embeddings(np.asarray(X, dtype=np.float64).reshape(1, 3), scale)
    return PointAssignment(int(nearest_segment(graph, embedding, scale)[0]), bool(np.asarray(clamped).any()))


def assign_points(graph: SegmentGraph, segments, points: np.ndarray, scale: str) -> np.ndarray:
    embeddings, _ = segments.point_embeddings(np.asarray(points, dtype=np.float64).reshape(-1, 3), scale)
    return nearest_segment(graph, embeddings, scale)


def sample_view_rays(poses: Sequence, bounds, n_rays: int, seed) -> Dict[str, np.ndarray]:
    """Seeded random rays through uniformly drawn pixels of the given views, clipped to the bounds."""
    rng = np.random.default_rng(seed)
    views = rng.integers(0, len(poses), size=n_rays)
    origins = np.zeros((n_rays, 3))
    directions = np.zeros((n_rays, 3))
    for v in np.unique(views):
        rows = np.flatnonzero(views == v)
        height, width = poses[v].resolution
        pixels = rng.uniform(0.0, 1.0, size=(len(rows), 2)) * np.array([height, width])
        origins[rows], directions[rows] = camera_rays(poses[v], pixels)
    clipped = bounded_rays(origins, directions, bounds)
    clipped['views'] = views[clipped['index']]
    return clipped


def observe_rays(segments, rays: Dict[str, np.ndarray], min_opacity: float) -> RayObservations:
    """Render segment quantities along rays and keep the ones opaque enough to anchor a surface point."""
    rendered = segments.render_segments(rays['origins'], rays['directions'], rays['near'], rays['far'])
    opacity = rendered['opacity']
    keep = opacity >= min_opacity
    depth = rendered['depth'][keep] / opacity[keep]
    points = rays['origins'][keep] + depth[:, None] * rays['directions'][keep]
    return RayObservations(
        embeddings={s: rendered['embeddings'][s][keep] for s in SCALES},
        label_vectors={s: rendered['labels'][s][keep] for s in SCALES},
        points=points,
        directions=rays['directions'][keep],
    )


@dataclass
class Decomposition:
    graph: SegmentGraph
    observations: RayObservations
    report: RefineReport


class SceneDecomposer:
    """Cluster, refine and link segment embeddings into a SegmentGraph."""

    def __init__(self, cfg: DecompConfig = None):
        self.cfg = cfg or DecompConfig.from_config()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def cluster(self, observations: RayObservations) -> RayObservations:
        for scale in SCALES:
            result = cluster_scale(observations.embeddings[scale], self.cfg.scales.for_scale(scale))
            observations.labels[scale] = result.labels
            observations.confidences[scale] = result.confidences
            n_clusters = len([i for i in np.unique(result.labels) if i >= 0])
            self.logger.info(f"{scale}: {n_clusters} clusters, {int((result.labels < 0).sum())} noise rays "
                             f"of {len(result.labels)}")
        return observations

    def decompose(self, segments, poses: Sequence) -> Decomposition:
        rays = sample_view_rays(poses, segments.bounds, self.cfg.n_rays, self.cfg.seed)
        observations = observe_rays(segments, rays, self.cfg.min_opacity)
        if len(observations) == 0:
            raise InvalidArgumentError("No sampled ray reached the minimum opacity; nothing to decompose")
        self.cluster(observations)
        report = refine_segments(observations, self.cfg.refine)
        graph = build_hierarchy(report.labels, observations)
        graph.metadata['rays'] = len(observations)
        return Decomposition(graph, observations, report)
