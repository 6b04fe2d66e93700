"""Stratified ray sampling and discrete volume compositing.

One compositing routine serves both the analytic scene oracle and the learned
field. It runs on torch tensors so the field's gradients flow through it;
numpy inputs are accepted and numpy outputs returned.

Discretization (piecewise-constant density per segment)::

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    feature = sum_i w_i f_i
    depth   = sum_i w_i t_i / max(opacity, 1e-8)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import DomainError, NumericError
from .geometry import Camera, Ray, SyntheticScene, camera_rays

DEPTH_FLOOR = 1e-8

# (points (..., 3) tensor) -> (density (...), feature (..., C)) tensors
PointSource = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class RaySamples:
    positions: np.ndarray | torch.Tensor  # (..., N, 3)
    t_values: np.ndarray | torch.Tensor  # (..., N)
    deltas: np.ndarray | torch.Tensor  # (..., N)


@dataclass(frozen=True)
class RenderOutput:
    feature: np.ndarray | torch.Tensor
    expected_depth: np.ndarray | torch.Tensor
    opacity: np.ndarray | torch.Tensor
    weights: np.ndarray | torch.Tensor
    transmittance: np.ndarray | torch.Tensor  # T_i before each sample


def _deltas(t, t_far):
    last = t_far - t[..., -1:]
    return torch.cat([t[..., 1:] - t[..., :-1], last], dim=-1)


def stratified_t(n_rays: int, n: int, t_near, t_far, generator: torch.Generator | None = None,
                 dtype=torch.float64):
    """Sample depths (n_rays, n): bin midpoints without a generator, one uniform draw per bin with one.

    ``t_near``/``t_far`` are scalars or (n_rays,) tensors.
    """
    if n < 2:
        raise DomainError("need at least 2 samples per ray")
    t_near = torch.as_tensor(t_near, dtype=dtype).reshape(-1, 1)
    t_far = torch.as_tensor(t_far, dtype=dtype).reshape(-1, 1)
    if generator is None:
        u = torch.full((n_rays, n), 0.5, dtype=dtype)
    else:
        u = torch.rand((n_rays, n), generator=generator, dtype=dtype)
    bins = torch.arange(n, dtype=dtype)
    t = t_near + (bins + u) * (t_far - t_near) / n
    return t, _deltas(t, t_far)


def sample_stratified(ray: Ray, n: int, rng: np.random.Generator | None = None) -> RaySamples:
    if n < 2:
        raise DomainError("need at least 2 samples per ray")
    u = np.full(n, 0.5) if rng is None else rng.uniform(0.0, 1.0, n)
    t = ray.t_near + (np.arange(n) + u) * (ray.t_far - ray.t_near) / n
    deltas = np.append(np.diff(t), ray.t_far - t[-1])
    return RaySamples(ray.at(t), t, deltas)


def composite(densities, features, samples: RaySamples) -> RenderOutput:
    """Front-to-back compositing over the last sample axis."""
    as_numpy = isinstance(densities, np.ndarray)
    sigma = torch.as_tensor(densities)
    feat = torch.as_tensor(features)
    t = torch.as_tensor(samples.t_values, dtype=sigma.dtype)
    delta = torch.as_tensor(samples.deltas, dtype=sigma.dtype)
    if sigma.shape != t.shape or feat.shape[:-1] != sigma.shape:
        raise DomainError(f"shape mismatch: densities {tuple(sigma.shape)}, features "
                          f"{tuple(feat.shape)}, samples {tuple(t.shape)}")
    if torch.isnan(sigma).any() or torch.isnan(feat).any():
        raise NumericError("NaN in compositing input")
    if (sigma < 0).any():
        raise DomainError("negative density")

    alpha = -torch.expm1(-sigma * delta)
    survive = 1.0 - alpha
    ones = torch.ones_like(survive[..., :1])
    trans = torch.cumprod(torch.cat([ones, survive[..., :-1]], dim=-1), dim=-1)
    weights = trans * alpha
    opacity = 1.0 - trans[..., -1] * survive[..., -1]
    feature = (weights.unsqueeze(-1) * feat).sum(dim=-2)
    depth = (weights * t).sum(dim=-1) / torch.clamp(opacity, min=DEPTH_FLOOR)
    out = RenderOutput(feature, depth, opacity, weights, trans)
    if as_numpy:
        out = RenderOutput(*(v.detach().numpy() for v in
                             (feature, depth, opacity, weights, trans)))
    return out


def scene_source(scene: SyntheticScene, layer: int | None) -> PointSource:
    """Wrap the analytic scene as a point source; ``layer=None`` gives zero-channel features."""

    def source(points: torch.Tensor):
        x = points.detach().numpy()
        dens = scene.density(x)
        if layer is None:
            feat = np.zeros(dens.shape + (0,))
        else:
            feat = scene.features(x, layer)
        return torch.from_numpy(dens), torch.from_numpy(feat)

    return source


def render_rays(source: PointSource, origins, dirs, t_near, t_far, n_samples: int,
                generator: torch.Generator | None = None, dtype=torch.float64) -> RenderOutput:
    """Render flat ray bundles (R, 3) through ``source``; returns torch tensors."""
    origins = torch.as_tensor(origins, dtype=dtype)
    dirs = torch.as_tensor(dirs, dtype=dtype)
    t, delta = stratified_t(origins.shape[0], n_samples, t_near, t_far, generator, dtype)
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma, feat = source(points)
    return composite(sigma.to(dtype), feat.to(dtype), RaySamples(points, t, delta))


def render_map(source: PointSource, camera: Camera, resolution: int, n_samples: int,
               rng: torch.Generator | None = None):
    """Feature (res, res, C), depth (res, res) and opacity (res, res) maps as numpy arrays."""
    origins, dirs = camera_rays(camera, resolution)
    with torch.no_grad():
        out = render_rays(source, origins.reshape(-1, 3), dirs.reshape(-1, 3),
                          camera.t_near, camera.t_far, n_samples, rng)
    shape = (resolution, resolution)
    feat = out.feature.reshape(shape + (out.feature.shape[-1],)).numpy()
    return feat, out.expected_depth.reshape(shape).numpy(), out.opacity.reshape(shape).numpy()
