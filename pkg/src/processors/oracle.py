"""Analytic stand-ins for fitted fields.

`OracleFieldSet` and `OracleSegmentModel` answer the same query protocol as a
fitted `FieldSet` / `SegmentModel` directly from the scene oracle, and
`oracle_graph` builds the ground-truth SegmentGraph. Downstream stages run on
either, which gives every stage an "oracle-field quality" reference run.
"""
import logging
from typing import Dict

import numpy as np
import torch

from errors import InvalidArgumentError
from processors.decomp import Segment, SegmentGraph
from processors.render import composite_weights, stratified_samples
from processors.scenegen import SCALE_INDEX, SCALES, SceneOracle

logger = logging.getLogger(__name__)

POINT_TOLERANCE = 1e-6


class OracleFieldSet:
    """Exact first-surface rendering of the teacher.

    `t_VD` is the teacher token seen along the ray; `t_VI` is the owning
    object's base token, which is the teacher token averaged over directions.
    """

    def __init__(self, oracle: SceneOracle, samples_per_ray: int = 64):
        self.oracle = oracle
        self.bounds = oracle.bounds
        self.token_dim = oracle.token_dim
        self.samples_per_ray = samples_per_ray

    def _vi_tokens(self, points: np.ndarray) -> np.ndarray:
        ids = self.oracle.instance_ids(points, POINT_TOLERANCE)[:, 2]
        out = np.zeros((len(ids), self.token_dim))
        for object_id in np.unique(ids[ids >= 0]):
            out[ids == object_id] = self.oracle.base_token(int(object_id))
        return out

    def render_tokens(self, origins, directions, near=None, far=None, n_samples: int = None) -> Dict[str, np.ndarray]:
        points, t_hit, hit = self.oracle.surface_points(origins, directions)
        t_vd = np.where(hit[:, None], self.oracle.token(points, directions), 0.0)
        t_vi = np.where(hit[:, None], self._vi_tokens(points), 0.0)
        return {'t_vi': t_vi, 't_vd': t_vd, 'opacity': hit.astype(np.float64), 'depth': np.where(hit, t_hit, 0.0)}

    def render_geometry(self, origins, directions, near=None, far=None, n_samples: int = None) -> Dict[str, np.ndarray]:
        points, t_hit, hit = self.oracle.surface_points(origins, directions)
        rgb = np.where(hit[:, None], self.oracle.color(points), 0.0)
        return {'rgb': rgb, 'opacity': hit.astype(np.float64), 'depth': np.where(hit, t_hit, 0.0)}

    def sample_weights(self, origins: torch.Tensor, directions: torch.Tensor, near: torch.Tensor, far: torch.Tensor,
                       n_samples: int, generator=None):
        """Compositing weights of the analytic density at stratified samples."""
        t, deltas = stratified_samples(near.double(), far.double(), n_samples, generator)
        points = origins.double()[:, None, :] + t[..., None] * directions.double()[:, None, :]
        sigma = torch.as_tensor(self.oracle.density(points.reshape(-1, 3).numpy()).reshape(t.shape))
        weights, _ = composite_weights(sigma, deltas)
        return weights.to(origins.dtype), t.to(origins.dtype)

    def forward_token(self, X, d):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        return self._vi_tokens(X), self.oracle.token(X, d)


class OracleSegmentModel:
    """One-hot instance codes per scale plus a small positional term.

    The positional term keeps embeddings of distinct points distinct while
    staying far below the distance between codes.
    """

    def __init__(self, oracle: SceneOracle, position_weight: float = 0.005):
        self.oracle = oracle
        self.bounds = oracle.bounds
        self.position_weight = float(position_weight)
        self.columns = {scale: {int(i): k for k, i in enumerate(sorted(oracle.label_tables[scale]))}
                        for scale in SCALES}

    @property
    def label_dim(self) -> int:
        return self.oracle.label_dim

    def embedding_dim(self, scale: str) -> int:
        return len(self.columns[scale]) + 3

    def code(self, scale: str, instance_id: int) -> np.ndarray:
        if instance_id not in self.columns[scale]:
            raise InvalidArgumentError(f"Unknown {scale} instance {instance_id}")
        vector = np.zeros(self.embedding_dim(scale))
        vector[self.columns[scale][instance_id]] = 1.0
        return vector

    def _embed(self, ids: np.ndarray, points: np.ndarray, scale: str) -> np.ndarray:
        out = np.zeros((len(ids), self.embedding_dim(scale)))
        for row, instance in enumerate(ids):
            if instance >= 0:
                out[row, self.columns[scale][int(instance)]] = 1.0
        out[:, -3:] = self.position_weight * points
        return out

    def point_embeddings(self, points: np.ndarray, scale: str):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = self.oracle.instance_ids(points, POINT_TOLERANCE)[:, SCALE_INDEX[scale]]
        lo, hi = self.bounds
        clamped = np.any((points < lo) | (points > hi), axis=-1)
        return self._embed(ids, points, scale), clamped

    def point_labels(self, points: np.ndarray, scale: str):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = self.oracle.instance_ids(points, POINT_TOLERANCE)[:, SCALE_INDEX[scale]]
        lo, hi = self.bounds
        return self.oracle.label_embeddings(ids, scale), np.any((points < lo) | (points > hi), axis=-1)

    def render_segments(self, origins, directions, near=None, far=None) -> Dict:
        points, t_hit, hit = self.oracle.surface_points(origins, directions)
        ids = np.where(hit[:, None], self.oracle.instance_ids(points), -1)
        return {
            'embeddings': {s: self._embed(ids[:, SCALE_INDEX[s]], points, s) for s in SCALES},
            'labels': {s: self.oracle.label_embeddings(ids[:, SCALE_INDEX[s]], s) for s in SCALES},
            'opacity': hit.astype(np.float64),
            'depth': np.where(hit, t_hit, 0.0),
        }


def oracle_graph(oracle: SceneOracle, segments: OracleSegmentModel) -> SegmentGraph:
    """Ground-truth SegmentGraph whose centroids match `segments` embeddings at primitive centers."""
    graph = {scale: {} for scale in SCALES}
    for scale in SCALES:
        for instance, primitive in sorted(oracle.primitives[scale].items()):
            center = np.asarray(primitive.center, dtype=np.float64)
            centroid = segments.code(scale, int(instance))
            centroid[-3:] = segments.position_weight * center
            parent = oracle.parent_tables[scale][int(instance)] if scale in oracle.parent_tables else None
            graph[scale][int(instance)] = Segment(
                id=int(instance), scale=scale, members=0, centroid=centroid,
                label_centroid=oracle.label_tables[scale][int(instance)].copy(),
                confidence_mean=1.0, confidence_min=1.0, parent=parent,
                spatial_centroid=center, flags=['oracle'],
            )
    return SegmentGraph(graph, {'objects': {}, 'source': 'oracle'})
