"""Three-scale contrastive segment-embedding field with per-scale label heads.

One feature grid feeds three scale trunks (small, medium, large). Each trunk
produces an intermediate embedding; a linear head maps it to the contrastive
segment embedding `e_s` and a second head to the label embedding of that scale.
Compositing weights come from a separate geometry field.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field
from tqdm import tqdm

from config_loader import get_config
from errors import DivergenceError, InvalidArgumentError, NumericalError
from processors.fields import GridField, RENDER_CHUNK, load_state, parameter_norms, save_module
from processors.render import accumulate, camera_rays, ray_box_intersection
from processors.scenegen import SCALES

logger = logging.getLogger(__name__)

DESCRIPTOR_NAME = 'segfield.json'


class SegTrainConfig(BaseModel):
    """Segment-field training settings (the `segfield` config section)."""

    embedding_dim: int = Field(default=16, ge=1, le=64)
    margin: float = Field(default=1.0, gt=0.0)
    steps: int = Field(default=1500, ge=1)
    images_per_batch: int = Field(default=8, ge=1)
    rays_per_image: int = Field(default=32, ge=2)
    samples_per_ray: int = Field(default=64, ge=1)
    lr_grid: float = Field(default=1e-2, gt=0.0)
    lr_decoder: float = Field(default=1e-3, gt=0.0)
    label_weight: float = Field(default=1.0, ge=0.0)
    resolutions: List[int] = Field(default_factory=lambda: [16, 32, 64, 128], min_length=1)
    features_per_level: int = Field(default=4, ge=1)
    hidden_dim: int = Field(default=64, ge=4)
    grid_init_scale: float = Field(default=1e-2, ge=0.0)
    divergence_threshold: float = Field(default=1e6, gt=0.0)
    log_every: int = Field(default=100, ge=1)
    jitter: bool = True
    seed: int = 0

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'SegTrainConfig':
        config = config or get_config()
        values = config.get_dict('segfield')
        values.setdefault('jitter', config.get('render.jitter', True))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class SegFieldSet(nn.Module):
    """Shared grid with one trunk, embedding head and label head per scale."""

    def __init__(self, bounds, label_dim: int, cfg: SegTrainConfig):
        super().__init__()
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        self.label_dim = int(label_dim)
        self.cfg = cfg
        self.margin = float(cfg.margin)
        generator = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.grid = GridField(bounds, cfg.resolutions, cfg.features_per_level, cfg.grid_init_scale, generator)
            self.trunks = nn.ModuleDict({
                scale: nn.Sequential(nn.Linear(self.grid.out_dim, cfg.hidden_dim), nn.SiLU(),
                                     nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.SiLU())
                for scale in SCALES
            })
            self.embedding_heads = nn.ModuleDict({s: nn.Linear(cfg.hidden_dim, cfg.embedding_dim) for s in SCALES})
            self.label_heads = nn.ModuleDict({s: nn.Linear(cfg.hidden_dim, self.label_dim) for s in SCALES})

    def query(self, points: torch.Tensor):
        """Per-scale (embedding, label embedding) at `points` and the clamped mask."""
        features, clamped = self.grid(points)
        out = {}
        for scale in SCALES:
            hidden = self.trunks[scale](features)
            out[scale] = (self.embedding_heads[scale](hidden), self.label_heads[scale](hidden))
        return out, clamped

    def grid_parameters(self) -> List[nn.Parameter]:
        return list(self.grid.parameters())

    def decoder_parameters(self) -> List[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith('grid.')]

    def descriptor(self) -> Dict:
        return {
            'kind': 'segfield',
            'bounds': [self.bounds[0].tolist(), self.bounds[1].tolist()],
            'label_dim': self.label_dim,
            'config': self.cfg.model_dump(),
        }


def init_seg_field(cfg: SegTrainConfig, bounds, label_dim: int = None) -> SegFieldSet:
    label_dim = label_dim or int(get_config().get('scene.label_dim', 16))
    return SegFieldSet(bounds, label_dim, cfg)


def stable_distance(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis, accumulated in log space.

    `||d|| = exp(0.5 * logsumexp(2 * log|d_i|))`, so neither squares of large
    components nor squares of tiny ones leave the representable range. An
    all-zero row has distance 0 and a zero gradient.
    """
    magnitude = diff.abs()
    nonzero = magnitude > 0
    present = nonzero.any(dim=-1)
    log_magnitude = torch.log(torch.where(nonzero, magnitude, torch.ones_like(magnitude)))
    floor = torch.where(present.unsqueeze(-1), torch.full_like(magnitude, float('-inf')),
                        torch.zeros_like(magnitude))
    log_magnitude = torch.where(nonzero, log_magnitude, floor)
    log_norm = 0.5 * torch.logsumexp(2.0 * log_magnitude, dim=-1)
    zero = torch.zeros_like(log_norm)
    return torch.where(present, torch.exp(torch.where(present, log_norm, zero)), zero)


def contrastive_pair_loss(e_a, e_b, same, margin: float):
    """Pull loss `||eA - eB||` for same-mask pairs, push loss `max(0, m - ||eA - eB||)` otherwise.

    Accepts single vectors or batches on the leading axes; numpy inputs return numpy.

    Raises:
        InvalidArgumentError: If margin <= 0.
    """
    if margin <= 0:
        raise InvalidArgumentError(f"Contrastive margin must be positive, got {margin}")
    as_numpy = not isinstance(e_a, torch.Tensor)
    e_a = torch.as_tensor(np.asarray(e_a, dtype=np.float64) if as_numpy else e_a)
    e_b = torch.as_tensor(np.asarray(e_b, dtype=np.float64) if as_numpy else e_b, dtype=e_a.dtype)
    same = torch.as_tensor(same, dtype=torch.bool)
    distance = stable_distance(e_a - e_b)
    loss = torch.where(same, distance, F.relu(margin - distance))
    if as_numpy:
        value = loss.detach().numpy()
        return float(value) if value.ndim == 0 else value
    return loss


@dataclass
class ImageRays:
    view: int
    pixels: np.ndarray
    mask_ids: np.ndarray


@dataclass
class MaskPairBatch:
    """Rays grouped by source image and within-image pairs per scale.

    `pairs[scale]` rows are (image slot, ray i, ray j) with i < j; `same[scale]`
    tells whether both rays fall in the same mask at that scale.
    """

    images: List[ImageRays]
    pairs: Dict[str, np.ndarray] = field(default_factory=dict)
    same: Dict[str, np.ndarray] = field(default_factory=dict)

    def pair_counts(self, scale: str) -> np.ndarray:
        counts = np.zeros(len(self.images), dtype=np.int64)
        if len(self.pairs[scale]):
            np.add.at(counts, self.pairs[scale][:, 0], 1)
        return counts


def sample_training_pairs(instances: np.ndarray, n_rays: int, seed, images_per_batch: int = None,
                          views: Sequence[int] = None) -> MaskPairBatch:
    """Seeded within-image ray pairs tagged same-mask / different-mask per scale.

    Rays are drawn among the pixels covered by at least one mask. All pairs of
    rays that both carry a mask at a scale are emitted for that scale, so an image
    without masks at a scale contributes no pairs there.

    Args:
        instances (np.ndarray): (V, 3, H, W) per-scale instance images, -1 unmasked.
        n_rays (int): Rays per image.
        seed: Seed (int or sequence) of the sampling stream.
        images_per_batch (int, optional): Images drawn per batch; all views if None.
        views (Sequence[int], optional): Candidate views; all if None.
    """
    rng = np.random.default_rng(seed)
    views = list(range(instances.shape[0])) if views is None else list(views)
    if images_per_batch is None or images_per_batch >= len(views):
        chosen = views
    else:
        chosen = [views[i] for i in sorted(rng.choice(len(views), size=images_per_batch, replace=False))]

    width = instances.shape[3]
    images = []
    for view in chosen:
        covered = np.flatnonzero((instances[view] >= 0).any(axis=0).ravel())
        if len(covered) == 0:
            images.append(ImageRays(view, np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64)))
            continue
        picks = rng.choice(covered, size=n_rays, replace=len(covered) < n_rays)
        rows, cols = picks // width, picks % width
        pixels = np.stack([rows + 0.5, cols + 0.5], axis=-1)
        mask_ids = instances[view][:, rows, cols].T.astype(np.int64)
        images.append(ImageRays(view, pixels, mask_ids))

    pairs, same = {}, {}
    for s, scale in enumerate(SCALES):
        rows, flags = [], []
        for slot, image in enumerate(images):
            if len(image.mask_ids) < 2:
                continue
            i, j = np.triu_indices(len(image.mask_ids), k=1)
            ids = image.mask_ids[:, s]
            valid = (ids[i] >= 0) & (ids[j] >= 0)
            i, j = i[valid], j[valid]
            rows.append(np.stack([np.full_like(i, slot), i, j], axis=-1))
            flags.append(ids[i] == ids[j])
        pairs[scale] = np.concatenate(rows) if rows else np.zeros((0, 3), dtype=np.int64)
        same[scale] = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    return MaskPairBatch(images, pairs, same)


def _batch_rays(teacher, batch: MaskPairBatch, bounds):
    origins, directions, offsets = [], [], []
    offset = 0
    for image in batch.images:
        offsets.append(offset)
        if len(image.pixels):
            o, d = camera_rays(teacher.poses[image.view], image.pixels)
            origins.append(o)
            directions.append(d)
            offset += len(o)
    if not origins:
        return None
    origins = np.concatenate(origins)
    directions = np.concatenate(directions)
    near, far, hit = ray_box_intersection(origins, directions, bounds[0], bounds[1])
    far = np.where(hit, far, near + 1e-3)
    return origins, directions, near, far, np.asarray(offsets)


def render_segment_rays(sf: SegFieldSet, weights: torch.Tensor, t: torch.Tensor, origins: torch.Tensor,
                        directions: torch.Tensor) -> Dict[str, tuple]:
    """Composite per-scale embeddings and label embeddings with external weights."""
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    values, _ = sf.query(points)
    return {scale: (accumulate(weights, emb).value, accumulate(weights, lab).value)
            for scale, (emb, lab) in values.items()}


def segment_losses(sf: SegFieldSet, teacher, batch: MaskPairBatch, geometry, cfg: SegTrainConfig,
                   generator: Optional[torch.Generator] = None) -> Dict[str, torch.Tensor]:
    """Per-scale contrastive and label losses of one pair batch; `total` sums them."""
    dtype = next(sf.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    losses = {f'pair_{s}': zero for s in SCALES}
    losses.update({f'label_{s}': zero for s in SCALES})
    rays = _batch_rays(teacher, batch, sf.bounds)
    if rays is None:
        losses['total'] = zero
        return losses
    origins, directions, near, far = (torch.as_tensor(a, dtype=dtype) for a in rays[:4])
    offsets = rays[4]
    weights, t = geometry.sample_weights(origins, directions, near, far, cfg.samples_per_ray, generator)
    rendered = render_segment_rays(sf, weights.to(dtype), t.to(dtype), origins, directions)

    mask_ids = np.concatenate([im.mask_ids for im in batch.images if len(im.mask_ids)])
    for s, scale in enumerate(SCALES):
        embeddings, labels = rendered[scale]
        rows = batch.pairs[scale]
        if len(rows):
            a = torch.as_tensor(offsets[rows[:, 0]] + rows[:, 1])
            b = torch.as_tensor(offsets[rows[:, 0]] + rows[:, 2])
            same = torch.as_tensor(batch.same[scale])
            losses[f'pair_{scale}'] = contrastive_pair_loss(embeddings[a], embeddings[b], same, cfg.margin).mean()
        masked = np.flatnonzero(mask_ids[:, s] >= 0)
        if len(masked) and cfg.label_weight > 0:
            table = teacher.label_tables[scale]
            target = torch.as_tensor(np.stack([table[int(i)] for i in mask_ids[masked, s]]), dtype=dtype)
            losses[f'label_{scale}'] = cfg.label_weight * F.mse_loss(labels[torch.as_tensor(masked)], target)
    losses['total'] = sum(losses.values())
    return losses


class SegFieldTrainer:
    """Single-writer optimizer loop for a SegFieldSet."""

    def __init__(self, sf: SegFieldSet, geometry, cfg: SegTrainConfig):
        self.sf = sf
        self.geometry = geometry
        self.cfg = cfg
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.optimizer = torch.optim.Adam([
            {'params': sf.grid_parameters(), 'lr': cfg.lr_grid},
            {'params': sf.decoder_parameters(), 'lr': cfg.lr_decoder},
        ])
        self.generator = torch.Generator().manual_seed(cfg.seed) if cfg.jitter else None

    def train_step(self, teacher, batch: MaskPairBatch) -> Dict[str, float]:
        self.optimizer.zero_grad(set_to_none=True)
        losses = segment_losses(self.sf, teacher, batch, self.geometry, self.cfg, self.generator)
        total = losses['total']
        if not torch.isfinite(total):
            raise NumericalError("Segment loss became non-finite; step aborted", parameter_norms(self.sf))
        if float(total) > self.cfg.divergence_threshold:
            raise DivergenceError(f"Segment loss {float(total):.4g} exceeded the divergence threshold",
                                  parameter_norms(self.sf))
        if total.requires_grad:
            total.backward()
            self.optimizer.step()
        return {k: float(v) for k, v in losses.items()}

    def fit(self, teacher, views: Sequence[int] = None, progress: bool = False) -> pd.DataFrame:
        self.logger.info(f"Fitting segment field for {self.cfg.steps} steps "
                         f"({self.cfg.images_per_batch} images x {self.cfg.rays_per_image} rays per step)")
        curve = []
        for step in tqdm(range(self.cfg.steps), desc='segfield', disable=not progress):
            batch = sample_training_pairs(teacher.instances, self.cfg.rays_per_image, [self.cfg.seed, step],
                                          self.cfg.images_per_batch, views)
            losses = self.train_step(teacher, batch)
            curve.append({'step': step, **losses})
            if step % self.cfg.log_every == 0 or step == self.cfg.steps - 1:
                self.logger.info(f"step {step} total={losses['total']:.5f} "
                                 + " ".join(f"{s}={losses[f'pair_{s}']:.4f}" for s in SCALES))
        return pd.DataFrame(curve)


def fit_seg_field(sf: SegFieldSet, teacher, cfg: SegTrainConfig, geometry, views: Sequence[int] = None,
                  progress: bool = False):
    """Fit the segment field against teacher masks; returns the fitted set and loss curve."""
    curve = SegFieldTrainer(sf, geometry, cfg).fit(teacher, views, progress)
    return sf, curve


class SegmentModel:
    """Query adapter pairing a fitted segment field with the geometry that renders it."""

    def __init__(self, segfield: SegFieldSet, geometry, n_samples: int = None):
        self.segfield = segfield
        self.geometry = geometry
        self.n_samples = n_samples or segfield.cfg.samples_per_ray
        self.bounds = segfield.bounds
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    @property
    def label_dim(self) -> int:
        return self.segfield.label_dim

    def render_segments(self, origins, directions, near, far) -> Dict:
        """Rendered per-scale embeddings and label embeddings plus opacity and depth (numpy)."""
        dtype = next(self.segfield.parameters()).dtype
        embeddings = {s: [] for s in SCALES}
        labels = {s: [] for s in SCALES}
        opacity, depth = [], []
        with torch.no_grad():
            for start in range(0, len(origins), RENDER_CHUNK):
                sl = slice(start, start + RENDER_CHUNK)
                o = torch.as_tensor(origins[sl], dtype=dtype)
                d = torch.as_tensor(directions[sl], dtype=dtype)
                weights, t = self.geometry.sample_weights(o, d, torch.as_tensor(near[sl], dtype=dtype),
                                                          torch.as_tensor(far[sl], dtype=dtype), self.n_samples)
                weights, t = weights.to(dtype), t.to(dtype)
                rendered = render_segment_rays(self.segfield, weights, t, o, d)
                for scale in SCALES:
                    embeddings[scale].append(rendered[scale][0].numpy().astype(np.float64))
                    labels[scale].append(rendered[scale][1].numpy().astype(np.float64))
                opacity.append(weights.sum(dim=-1).numpy().astype(np.float64))
                depth.append((weights * t).sum(dim=-1).numpy().astype(np.float64))
        return {
            'embeddings': {s: np.concatenate(v) for s, v in embeddings.items()},
            'labels': {s: np.concatenate(v) for s, v in labels.items()},
            'opacity': np.concatenate(opacity),
            'depth': np.concatenate(depth),
        }

    def _point_query(self, points: np.ndarray, scale: str, which: int):
        dtype = next(self.segfield.parameters()).dtype
        with torch.no_grad():
            values, clamped = self.segfield.query(torch.as_tensor(np.asarray(points).reshape(-1, 3), dtype=dtype))
        clamped = clamped.numpy()
        if clamped.any():
            self.logger.warning(f"{int(clamped.sum())} segment queries fell outside the field bounds and were clamped")
        return values[scale][which].numpy().astype(np.float64), clamped

    def point_embeddings(self, points: np.ndarray, scale: str):
        """Segment embedding `e_scale(X)` and the clamped flags."""
        return self._point_query(points, scale, 0)

    def point_labels(self, points: np.ndarray, scale: str):
        return self._point_query(points, scale, 1)


def save_segfield(sf: SegFieldSet, directory) -> Path:
    return save_module(sf, directory, sf.descriptor(), DESCRIPTOR_NAME)


def load_segfield(directory) -> SegFieldSet:
    directory = Path(directory)
    descriptor_path = directory / DESCRIPTOR_NAME
    if not descriptor_path.exists():
        raise FileNotFoundError(f"No {DESCRIPTOR_NAME} in {directory}")
    descriptor = json.loads(descriptor_path.read_text(encoding='utf-8'))
    sf = SegFieldSet(descriptor['bounds'], descriptor['label_dim'], SegTrainConfig(**descriptor['config']))
    return load_state(sf, directory)
