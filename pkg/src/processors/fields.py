"""Grid-based radiance and token feature fields with a view-invariant / view-dependent split.

The token branch decodes a latent `f_VI(X)` and a direction-conditioned deviation
`delta_VD(X, d)`; `f_VD = f_VI + delta_VD`. Both latents are L2-normalized,
scaled by a learned scalar and mapped to full token width by one shared decoder.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field
from tqdm import tqdm

from config_loader import get_config
from errors import DivergenceError, InvalidArgumentError, NumericalError
from processors.render import (
    accumulate, bounded_rays, camera_rays, composite_weights, grid_cell_centers, pixel_centers, stratified_samples,
)
from utils.tensor_store import load_tensors, save_tensors

logger = logging.getLogger(__name__)

DESCRIPTOR_NAME = 'fieldset.json'
RENDER_CHUNK = 4096


class LossWeights(BaseModel):
    rgb: float = Field(default=1.0, ge=0.0)
    token_vi: float = Field(default=1.0, ge=0.0)
    token_vd: float = Field(default=1.0, ge=0.0)
    depth: float = Field(default=0.1, ge=0.0)
    opacity: float = Field(default=0.1, ge=0.0)
    vd_penalty: float = Field(default=1e-4, ge=0.0)


class TrainConfig(BaseModel):
    """Token-field training settings (the `train` config section)."""

    steps: int = Field(default=2000, ge=1)
    geometry_steps: int = Field(default=1000, ge=0)
    schedule: Literal['sequential', 'joint'] = 'sequential'
    rays_per_batch: int = Field(default=1024, ge=1)
    token_rays_per_batch: int = Field(default=512, ge=1)
    samples_per_ray: int = Field(default=64, ge=1)
    lr_grid: float = Field(default=1e-2, gt=0.0)
    lr_decoder: float = Field(default=1e-3, gt=0.0)
    latent_dim: int = Field(default=16, ge=1)
    resolutions: List[int] = Field(default_factory=lambda: [16, 32, 64, 128], min_length=1)
    features_per_level: int = Field(default=4, ge=1)
    hidden_dim: int = Field(default=64, ge=4)
    grid_init_scale: float = Field(default=1e-2, ge=0.0)
    density_bias: float = -1.0
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    divergence_threshold: float = Field(default=1e6, gt=0.0)
    log_every: int = Field(default=100, ge=1)
    jitter: bool = True
    seed: int = 0

    @classmethod
    def from_config(cls, config=None, **overrides) -> 'TrainConfig':
        config = config or get_config()
        values = config.get_dict('train')
        values.setdefault('jitter', config.get('render.jitter', True))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def encode_directions(directions: torch.Tensor) -> torch.Tensor:
    """Raw unit direction followed by the 9 real spherical harmonics up to degree 2."""
    x, y, z = directions.unbind(-1)
    sh = torch.stack([
        torch.full_like(x, 0.28209479177387814),
        0.4886025119029199 * y,
        0.4886025119029199 * z,
        0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        1.0925484305920792 * y * z,
        0.31539156525252005 * (3.0 * z * z - 1.0),
        1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
    ], dim=-1)
    return torch.cat([directions, sh], dim=-1)


DIRECTION_ENCODING_DIM = 12


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                         nn.Linear(hidden, out_dim))


class GridField(nn.Module):
    """Multi-resolution dense feature grids queried by trilinear interpolation.

    Level features are concatenated, so the output width is
    `len(resolutions) * features_per_level`.
    """

    def __init__(self, bounds, resolutions: Sequence[int], features_per_level: int, init_scale: float,
                 generator: torch.Generator):
        super().__init__()
        lo, hi = (torch.as_tensor(np.asarray(b, dtype=np.float32)) for b in bounds)
        self.register_buffer('lo', lo)
        self.register_buffer('hi', hi)
        self.resolutions = [int(r) for r in resolutions]
        self.features_per_level = int(features_per_level)
        self.levels = nn.ParameterList([
            nn.Parameter((torch.rand((1, features_per_level, r, r, r), generator=generator) * 2.0 - 1.0) * init_scale)
            for r in self.resolutions
        ])

    @property
    def out_dim(self) -> int:
        return len(self.resolutions) * self.features_per_level

    def forward(self, points: torch.Tensor):
        """Features at `points` (..., 3) and a mask of queries clamped into the domain."""
        shape = points.shape[:-1]
        lo = self.lo.to(points.dtype)
        hi = self.hi.to(points.dtype)
        normalized = (points - lo) / (hi - lo) * 2.0 - 1.0
        clamped = ((normalized < -1.0) | (normalized > 1.0)).any(dim=-1)
        normalized = normalized.clamp(-1.0, 1.0)
        # grid_sample indexes (x, y, z) as (W, H, D); levels are laid out (X, Y, Z)
        sample_grid = normalized.flip(-1).reshape(1, 1, 1, -1, 3)
        features = []
        for level in self.levels:
            sampled = F.grid_sample(level.to(points.dtype), sample_grid, mode='bilinear', align_corners=True)
            features.append(sampled.reshape(level.shape[1], -1).T)
        return torch.cat(features, dim=-1).reshape(*shape, self.out_dim), clamped


class TokenQuery(NamedTuple):
    t_vi: object
    t_vd: object
    clamped: object


class FieldSet(nn.Module):
    """Radiance field plus token field with VI/VD heads and a shared token decoder.

    The numpy-facing methods (`render_tokens`, `render_geometry`,
    `sample_weights`) form the query protocol shared with the analytic oracle
    fields, so downstream stages accept either.
    """

    def __init__(self, bounds, token_dim: int, cfg: TrainConfig):
        super().__init__()
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        self.token_dim = int(token_dim)
        self.cfg = cfg
        self.density_bias = float(cfg.density_bias)
        geo_dim = max(4, cfg.hidden_dim // 4)

        generator = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.geometry = GridField(bounds, cfg.resolutions, cfg.features_per_level, cfg.grid_init_scale, generator)
            self.density_head = mlp(self.geometry.out_dim, cfg.hidden_dim, 1 + geo_dim)
            self.color_head = mlp(geo_dim + DIRECTION_ENCODING_DIM, cfg.hidden_dim, 3)
            self.token_grid = GridField(bounds, cfg.resolutions, cfg.features_per_level, cfg.grid_init_scale,
                                        generator)
            self.vi_head = mlp(self.token_grid.out_dim, cfg.hidden_dim, cfg.latent_dim)
            self.vd_head = mlp(self.token_grid.out_dim + DIRECTION_ENCODING_DIM, cfg.hidden_dim, cfg.latent_dim)
            self.latent_scale = nn.Parameter(torch.tensor(1.0))
            self.decoder = mlp(cfg.latent_dim, cfg.hidden_dim, self.token_dim)
        nn.init.zeros_(self.vd_head[-1].weight)
        nn.init.zeros_(self.vd_head[-1].bias)

    def geometry_parameters(self) -> Dict[str, List[nn.Parameter]]:
        return {
            'grid': list(self.geometry.parameters()),
            'decoder': list(self.density_head.parameters()) + list(self.color_head.parameters()),
        }

    def token_parameters(self) -> Dict[str, List[nn.Parameter]]:
        return {
            'grid': list(self.token_grid.parameters()),
            'decoder': (list(self.vi_head.parameters()) + list(self.vd_head.parameters())
                        + [self.latent_scale] + list(self.decoder.parameters())),
        }

    def query_density(self, points: torch.Tensor):
        features, clamped = self.geometry(points)
        hidden = self.density_head(features)
        sigma = F.softplus(hidden[..., 0] + self.density_bias)
        return sigma, hidden[..., 1:], clamped

    def query_color(self, geo_features: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.color_head(torch.cat([geo_features, encode_directions(directions)], dim=-1)))

    def token_latents(self, points: torch.Tensor, directions: torch.Tensor):
        features, clamped = self.token_grid(points)
        f_vi = self.vi_head(features)
        delta = self.vd_head(torch.cat([features, encode_directions(directions)], dim=-1))
        return f_vi, delta, clamped

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.decoder(F.normalize(latent, dim=-1) * self.latent_scale)

    def query_tokens(self, points: torch.Tensor, directions: torch.Tensor):
        f_vi, delta, clamped = self.token_latents(points, directions)
        return self.decode(f_vi), self.decode(f_vi + delta), f_vi, delta, clamped

    def forward_token(self, X, d) -> TokenQuery:
        """Tokens at position(s) X seen along unit direction(s) d.

        Positions outside the bounds are clamped onto the domain; the returned
        `clamped` flag reports it.
        """
        as_numpy = not isinstance(X, torch.Tensor)
        param = next(self.parameters())
        X = torch.as_tensor(np.asarray(X) if as_numpy else X, dtype=param.dtype)
        d = torch.as_tensor(np.asarray(d) if as_numpy else d, dtype=param.dtype)
        single = X.dim() == 1
        X, d = X.reshape(-1, 3), d.reshape(-1, 3)
        t_vi, t_vd, _, _, clamped = self.query_tokens(X, d)
        if bool(clamped.any()):
            logger.warning(f"{int(clamped.sum())} token queries fell outside the field bounds and were clamped")
        if single:
            t_vi, t_vd, clamped = t_vi[0], t_vd[0], clamped[0]
        if as_numpy:
            return TokenQuery(t_vi.detach().numpy(), t_vd.detach().numpy(), clamped.numpy())
        return TokenQuery(t_vi, t_vd, clamped)

    def render_rays(self, origins, directions, near, far, n_samples: int,
                    generator: Optional[torch.Generator] = None, heads: Sequence[str] = ('rgb', 'token'),
                    detach_token_weights: bool = True) -> Dict[str, torch.Tensor]:
        """Volume-render the requested heads along a batch of rays (torch tensors)."""
        t, deltas = stratified_samples(near, far, n_samples, generator)
        points = origins[:, None, :] + t[..., None] * directions[:, None, :]
        sample_dirs = directions[:, None, :].expand_as(points)
        sigma, geo, clamped = self.query_density(points)
        weights, _ = composite_weights(sigma, deltas)
        out = {
            'weights': weights,
            't': t,
            'opacity': weights.sum(dim=-1),
            'depth': (weights * t).sum(dim=-1),
            'clamped': clamped.any(dim=-1),
        }
        if 'rgb' in heads:
            out['rgb'] = accumulate(weights, self.query_color(geo, sample_dirs)).value
        if 'token' in heads:
            w = weights.detach() if detach_token_weights else weights
            t_vi, t_vd, f_vi, delta, _ = self.query_tokens(points, sample_dirs)
            out['t_vi'] = accumulate(w, t_vi).value
            out['t_vd'] = accumulate(w, t_vd).value
            out['delta_sq'] = (w * delta.pow(2).sum(dim=-1)).sum(dim=-1)
        return out

    def _chunked(self, origins, directions, near, far, n_samples, heads, keys) -> Dict[str, np.ndarray]:
        dtype = next(self.parameters()).dtype
        results = {k: [] for k in keys}
        with torch.no_grad():
            for start in range(0, len(origins), RENDER_CHUNK):
                sl = slice(start, start + RENDER_CHUNK)
                out = self.render_rays(
                    torch.as_tensor(origins[sl], dtype=dtype), torch.as_tensor(directions[sl], dtype=dtype),
                    torch.as_tensor(near[sl], dtype=dtype), torch.as_tensor(far[sl], dtype=dtype),
                    n_samples, heads=heads,
                )
                for k in keys:
                    results[k].append(out[k].numpy().astype(np.float64))
        return {k: np.concatenate(v) if v else np.zeros((0,)) for k, v in results.items()}

    def render_tokens(self, origins, directions, near, far, n_samples: int = None) -> Dict[str, np.ndarray]:
        """Rendered VI/VD tokens, opacity and expected depth (numpy)."""
        n_samples = n_samples or self.cfg.samples_per_ray
        return self._chunked(origins, directions, near, far, n_samples, ('token',),
                             ('t_vi', 't_vd', 'opacity', 'depth'))

    def render_geometry(self, origins, directions, near, far, n_samples: int = None) -> Dict[str, np.ndarray]:
        """Rendered color, opacity and expected depth (numpy)."""
        n_samples = n_samples or self.cfg.samples_per_ray
        return self._chunked(origins, directions, near, far, n_samples, ('rgb',), ('rgb', 'opacity', 'depth'))

    def sample_weights(self, origins: torch.Tensor, directions: torch.Tensor, near: torch.Tensor,
                       far: torch.Tensor, n_samples: int, generator: Optional[torch.Generator] = None):
        """Detached compositing weights and sample distances for external heads."""
        with torch.no_grad():
            out = self.render_rays(origins, directions, near, far, n_samples, generator, heads=())
        return out['weights'], out['t']

    def descriptor(self) -> Dict:
        return {
            'kind': 'fieldset',
            'bounds': [self.bounds[0].tolist(), self.bounds[1].tolist()],
            'token_dim': self.token_dim,
            'config': self.cfg.model_dump(),
        }


def init_fields(cfg: TrainConfig, bounds, token_dim: int = None) -> FieldSet:
    """Build a seeded FieldSet; identical seeds give bit-identical parameters."""
    token_dim = token_dim or int(get_config().get('scene.token_dim', 32))
    return FieldSet(bounds, token_dim, cfg)


def parameter_norms(module: nn.Module) -> Dict[str, float]:
    return {name: float(p.detach().norm()) for name, p in module.named_parameters()}


@dataclass
class RayPool:
    """Flat pool of supervised rays already clipped to the scene bounds."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    targets: Dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.origins)

    def batch(self, index: np.ndarray, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        out = {
            'origins': torch.as_tensor(self.origins[index], dtype=dtype),
            'directions': torch.as_tensor(self.directions[index], dtype=dtype),
            'near': torch.as_tensor(self.near[index], dtype=dtype),
            'far': torch.as_tensor(self.far[index], dtype=dtype),
        }
        for key, value in self.targets.items():
            out[key] = torch.as_tensor(value[index], dtype=dtype)
        return out

    def sample(self, rng: np.random.Generator, size: int, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        if len(self) == 0:
            raise InvalidArgumentError("Cannot sample from an empty ray pool")
        return self.batch(rng.integers(0, len(self), size=size), dtype)


def _pool_from_rays(origins, directions, bounds, targets: Dict[str, np.ndarray]) -> RayPool:
    clipped = bounded_rays(origins, directions, bounds)
    index = clipped['index']
    return RayPool(clipped['origins'], clipped['directions'], clipped['near'], clipped['far'],
                   {k: v[index] for k, v in targets.items()})


def build_ray_pool(teacher, bounds, views: Sequence[int] = None) -> RayPool:
    """Every pixel ray of the given views with rgb, depth and hit targets."""
    views = range(teacher.n_views) if views is None else views
    origins, directions, rgb, depth = [], [], [], []
    for v in views:
        pose = teacher.poses[v]
        o, d = camera_rays(pose, pixel_centers(*pose.resolution))
        origins.append(o)
        directions.append(d)
        rgb.append(teacher.rgb[v].reshape(-1, 3))
        depth.append(teacher.depth[v].reshape(-1))
    depth = np.concatenate(depth).astype(np.float64)
    targets = {'rgb': np.concatenate(rgb).astype(np.float64), 'depth': depth, 'hit': (depth > 0).astype(np.float64)}
    return _pool_from_rays(np.concatenate(origins), np.concatenate(directions), bounds, targets)


def build_token_pool(teacher, bounds, views: Sequence[int] = None) -> RayPool:
    """Rays through the token-grid cell centers of the given views with token targets."""
    views = range(teacher.n_views) if views is None else views
    origins, directions, tokens = [], [], []
    for v in views:
        pose = teacher.poses[v]
        o, d = camera_rays(pose, grid_cell_centers(*pose.resolution, teacher.token_grid))
        origins.append(o)
        directions.append(d)
        tokens.append(teacher.tokens[v].reshape(-1, teacher.tokens.shape[-1]))
    return _pool_from_rays(np.concatenate(origins), np.concatenate(directions), bounds,
                           {'tokens': np.concatenate(tokens).astype(np.float64)})


def compute_losses(fs: FieldSet, rgb_batch: Optional[Dict], token_batch: Optional[Dict], cfg: TrainConfig,
                   phase: str = 'joint', generator: Optional[torch.Generator] = None,
                   detach_token_weights: bool = True) -> Dict[str, torch.Tensor]:
    """Weighted loss terms for one step; `total` is their sum.

    Geometry terms are computed for phases `geometry` and `joint`, token terms
    for `token` and `joint`. The token branch is skipped entirely when both token
    weights are zero. Token losses do not move the density unless
    `detach_token_weights` is False.
    """
    w = cfg.loss_weights
    param = next(fs.parameters())
    zero = torch.zeros((), dtype=param.dtype)
    losses = {k: zero for k in ('rgb', 'depth', 'opacity', 'token_vi', 'token_vd', 'vd_penalty')}

    if phase in ('geometry', 'joint') and rgb_batch is not None:
        out = fs.render_rays(rgb_batch['origins'], rgb_batch['directions'], rgb_batch['near'], rgb_batch['far'],
                             cfg.samples_per_ray, generator, heads=('rgb',))
        losses['rgb'] = w.rgb * F.mse_loss(out['rgb'], rgb_batch['rgb'])
        losses['depth'] = w.depth * F.mse_loss(out['depth'], rgb_batch['depth'] * rgb_batch['hit'])
        losses['opacity'] = w.opacity * F.mse_loss(out['opacity'], rgb_batch['hit'])

    token_active = w.token_vi > 0 or w.token_vd > 0
    if phase in ('token', 'joint') and token_batch is not None and token_active:
        out = fs.render_rays(token_batch['origins'], token_batch['directions'], token_batch['near'],
                             token_batch['far'], cfg.samples_per_ray, generator, heads=('token',),
                             detach_token_weights=detach_token_weights)
        losses['token_vi'] = w.token_vi * F.mse_loss(out['t_vi'], token_batch['tokens'])
        losses['token_vd'] = w.token_vd * F.mse_loss(out['t_vd'], token_batch['tokens'])
        losses['vd_penalty'] = w.vd_penalty * out['delta_sq'].mean()

    losses['total'] = sum(losses.values())
    return losses


class TokenFieldTrainer:
    """Single-writer optimizer loop for a FieldSet.

    Geometry and token branches have separate Adam optimizers with grid and
    decoder learning rates, so the sequential schedule can step one branch while
    the other stays frozen.
    """

    def __init__(self, fs: FieldSet, cfg: TrainConfig):
        self.fs = fs
        self.cfg = cfg
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.optimizers = {
            'geometry': self._adam(fs.geometry_parameters()),
            'token': self._adam(fs.token_parameters()),
        }
        self.generator = torch.Generator().manual_seed(cfg.seed) if cfg.jitter else None

    def _adam(self, groups: Dict[str, List[nn.Parameter]]) -> torch.optim.Adam:
        return torch.optim.Adam([
            {'params': groups['grid'], 'lr': self.cfg.lr_grid},
            {'params': groups['decoder'], 'lr': self.cfg.lr_decoder},
        ])

    def _check(self, total: torch.Tensor):
        if not torch.isfinite(total):
            raise NumericalError("Training loss became non-finite; step aborted", parameter_norms(self.fs))
        if float(total) > self.cfg.divergence_threshold:
            raise DivergenceError(
                f"Training loss {float(total):.4g} exceeded divergence threshold {self.cfg.divergence_threshold:g}",
                parameter_norms(self.fs),
            )

    def train_step(self, rgb_batch: Optional[Dict], token_batch: Optional[Dict], phase: str = 'joint') -> Dict[str, float]:
        """One gradient step on the branches active in `phase`; returns per-term losses.

        Raises:
            NumericalError: If the loss is non-finite (no parameters are touched).
            DivergenceError: If the loss exceeds the divergence threshold.
        """
        active = {'geometry': ['geometry'], 'token': ['token'], 'joint': ['geometry', 'token']}[phase]
        for optimizer in self.optimizers.values():
            optimizer.zero_grad(set_to_none=True)
        losses = compute_losses(self.fs, rgb_batch, token_batch, self.cfg, phase, self.generator)
        self._check(losses['total'])
        if losses['total'].requires_grad:
            losses['total'].backward()
            for name in active:
                self.optimizers[name].step()
        return {k: float(v) for k, v in losses.items()}

    def phases(self) -> List[str]:
        if self.cfg.schedule == 'joint':
            return ['joint'] * self.cfg.steps
        geometry_steps = min(self.cfg.geometry_steps, self.cfg.steps)
        return ['geometry'] * geometry_steps + ['token'] * (self.cfg.steps - geometry_steps)

    def fit(self, teacher, token_views: Sequence[int] = None, progress: bool = False) -> pd.DataFrame:
        """Fit geometry and token branches to teacher renders; returns the loss curve."""
        rgb_pool = build_ray_pool(teacher, self.fs.bounds)
        token_pool = build_token_pool(teacher, self.fs.bounds, token_views)
        self.logger.info(f"Fitting token field on {len(rgb_pool)} rgb rays and {len(token_pool)} token rays "
                         f"({self.cfg.steps} steps, {self.cfg.schedule} schedule)")
        rng = np.random.default_rng(self.cfg.seed)
        dtype = next(self.fs.parameters()).dtype
        curve = []
        for step, phase in enumerate(tqdm(self.phases(), desc='train', disable=not progress)):
            rgb_batch = rgb_pool.sample(rng, self.cfg.rays_per_batch, dtype) if phase != 'token' else None
            token_batch = token_pool.sample(rng, self.cfg.token_rays_per_batch, dtype) if phase != 'geometry' else None
            losses = self.train_step(rgb_batch, token_batch, phase)
            curve.append({'step': step, 'phase': phase, **losses})
            if step % self.cfg.log_every == 0 or step == self.cfg.steps - 1:
                self.logger.info(f"step {step} [{phase}] total={losses['total']:.5f} rgb={losses['rgb']:.5f} "
                                 f"vi={losses['token_vi']:.5f} vd={losses['token_vd']:.5f}")
        return pd.DataFrame(curve)


def train_step(fs: FieldSet, rgb_batch: Optional[Dict], token_batch: Optional[Dict], cfg: TrainConfig,
               trainer: TokenFieldTrainer = None, phase: str = 'joint') -> Dict[str, float]:
    """One optimizer step; pass a persistent `trainer` to keep optimizer state across calls."""
    trainer = trainer or TokenFieldTrainer(fs, cfg)
    return trainer.train_step(rgb_batch, token_batch, phase)


def fit_token_field(fs: FieldSet, teacher, cfg: TrainConfig, token_views: Sequence[int] = None,
                    progress: bool = False):
    """Fit `fs` to the teacher renders. Returns the fitted FieldSet and its loss curve."""
    curve = TokenFieldTrainer(fs, cfg).fit(teacher, token_views, progress)
    return fs, curve


@dataclass
class GradientCheckResult:
    entries: List[Dict]
    max_relative_error: float


def gradient_check(fs: FieldSet, rgb_batch: Dict, token_batch: Dict, cfg: TrainConfig, n_entries: int = 5,
                   eps: float = 1e-6, seed: int = 0) -> GradientCheckResult:
    """Compare analytic gradients of the joint loss with central finite differences.

    Runs on a float64 copy without jitter and with token weights attached, so
    the analytic gradient covers every path the finite difference sees. The checked
    parameter entries are drawn (seeded) among those whose gradient is at least
    1e-3 of the largest one.
    """
    model = copy.deepcopy(fs).double()
    rgb64 = {k: v.double() for k, v in rgb_batch.items()} if rgb_batch else None
    tok64 = {k: v.double() for k, v in token_batch.items()} if token_batch else None

    def loss_value() -> torch.Tensor:
        return compute_losses(model, rgb64, tok64, cfg, 'joint', None, detach_token_weights=False)['total']

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    magnitudes = torch.cat([p.grad.abs().reshape(-1) for _, p in named])
    threshold = max(float(magnitudes.max()) * 1e-3, 1e-10)
    candidates = [(name, int(i)) for name, p in named
                  for i in torch.nonzero(p.grad.abs().reshape(-1) >= threshold).reshape(-1).tolist()]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_entries, len(candidates)), replace=False)

    params = dict(named)
    entries = []
    with torch.no_grad():
        for pick in sorted(int(p) for p in picks):
            name, index = candidates[pick]
            flat = params[name].data.reshape(-1)
            analytic = float(params[name].grad.reshape(-1)[index])
            original = float(flat[index])
            flat[index] = original + eps
            plus = float(loss_value())
            flat[index] = original - eps
            minus = float(loss_value())
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            relative = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            entries.append({'parameter': name, 'index': index, 'analytic': analytic, 'numeric': numeric,
                           'relative_error': relative})
    worst = max((e['relative_error'] for e in entries), default=0.0)
    return GradientCheckResult(entries, worst)


def render_token_map(fs, pose, grid: int, n_samples: int = None) -> Dict[str, np.ndarray]:
    """Rendered VI/VD token maps of one view at token-grid cell centers (grid x grid x D)."""
    origins, directions = camera_rays(pose, grid_cell_centers(*pose.resolution, grid))
    clipped = bounded_rays(origins, directions, fs.bounds)
    t_vi = np.zeros((grid * grid, fs.token_dim))
    t_vd = np.zeros((grid * grid, fs.token_dim))
    if len(clipped['index']):
        out = fs.render_tokens(clipped['origins'], clipped['directions'], clipped['near'], clipped['far'], n_samples)
        t_vi[clipped['index']] = out['t_vi']
        t_vd[clipped['index']] = out['t_vd']
    return {'t_vi': t_vi.reshape(grid, grid, -1), 't_vd': t_vd.reshape(grid, grid, -1)}


def token_view_errors(fs, teacher, view: int, n_samples: int = None) -> Dict[str, float]:
    """MSE of rendered VI and VD token maps against one teacher view."""
    rendered = render_token_map(fs, teacher.poses[view], teacher.token_grid, n_samples)
    target = teacher.tokens[view].astype(np.float64)
    return {
        'mse_vi': float(np.mean((rendered['t_vi'] - target) ** 2)),
        'mse_vd': float(np.mean((rendered['t_vd'] - target) ** 2)),
        'mean_sq_token': float(np.mean(np.sum(target ** 2, axis=-1))),
    }


def save_module(module: nn.Module, directory, descriptor: Dict, descriptor_name: str) -> Path:
    directory = Path(directory)
    tensors = {name: value.detach().cpu().numpy() for name, value in module.state_dict().items()}
    save_tensors(directory, tensors, {'descriptor': descriptor_name})
    with open(directory / descriptor_name, 'w', encoding='utf-8') as f:
        json.dump(descriptor, f, indent=2)
    return directory


def load_state(module: nn.Module, directory) -> nn.Module:
    tensors, _ = load_tensors(directory)
    state = {name: torch.from_numpy(array) for name, array in tensors.items()}
    module.load_state_dict(state)
    return module


def save_fieldset(fs: FieldSet, directory) -> Path:
    """Write a FieldSet checkpoint: tensor directory plus `fieldset.json`."""
    return save_module(fs, directory, fs.descriptor(), DESCRIPTOR_NAME)


def load_fieldset(directory) -> FieldSet:
    directory = Path(directory)
    descriptor_path = directory / DESCRIPTOR_NAME
    if not descriptor_path.exists():
        raise FileNotFoundError(f"No {DESCRIPTOR_NAME} in {directory}")
    descriptor = json.loads(descriptor_path.read_text(encoding='utf-8'))
    cfg = TrainConfig(**descriptor['config'])
    fs = FieldSet(descriptor['bounds'], descriptor['token_dim'], cfg)
    return load_state(fs, directory)
