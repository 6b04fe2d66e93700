"""QNeRF: a view-independent field with a shared density trunk and one feature head per query layer.

The field maps a 3D position (never a direction) through a sinusoidal encoding
and a fully connected trunk. A softplus head produces density; each query layer
gets its own small head whose output width is that layer's channel count.
Rendering reuses :mod:`qconsol.volrender`, so trained heads produce per-pixel
query maps by ordinary volume compositing.
"""

from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, NumericError, TrainingError
from .geometry import Camera, SyntheticScene, camera_rays, union_mask
from .volrender import RaySamples, composite, render_map, scene_source, stratified_t


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    resolution: int
    channels: int

    def __post_init__(self):
        if self.resolution < 2:
            raise ConfigError("layer resolution must be >= 2", key="layers.resolution")
        if self.channels < 1:
            raise ConfigError("layer channels must be >= 1", key="layers.channels")


def check_layer_specs(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    specs = tuple(specs)
    if not specs:
        raise ConfigError("at least one layer is required", key="layers")
    ids = [s.layer_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate layer ids {ids}", key="layers.layer_id")
    return specs


@dataclass
class QuerySet:
    """Per-layer query maps for a set of views at one timestep.

    ``maps[l]`` has shape (views, res_l, res_l, C_l), rows indexing image y.
    """
    timestep: int
    maps: list[np.ndarray]

    @property
    def n_views(self) -> int:
        return self.maps[0].shape[0]

    def view(self, v: int) -> list[np.ndarray]:
        return [m[v] for m in self.maps]

    def layer_table(self) -> list[tuple[int, int]]:
        return [(m.shape[1], m.shape[3]) for m in self.maps]


@contextlib.contextmanager
def single_threaded():
    """Pin torch intra-op parallelism so reductions run in a fixed order."""
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(before)


class FeatureField(nn.Module):
    """Positional trunk + softplus density head + per-layer feature heads.

    Parameter layout (also the checkpoint body order): trunk linears in depth
    order, density head, then per layer head (hidden linear, output linear);
    each linear stores its weight (out x in, row-major) then its bias.
    """

    def __init__(self, layers: Sequence[LayerSpec], frequencies: int = 6, width: int = 64,
                 depth: int = 3, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if frequencies < 0 or width < 1 or depth < 1:
            raise ConfigError("field needs frequencies >= 0, width >= 1, depth >= 1", key="qnerf")
        self.layers = check_layer_specs(layers)
        self.frequencies = frequencies
        self.width = width
        self.depth = depth
        in_dim = 3 * (1 + 2 * frequencies)
        self.trunk = nn.ModuleList(
            [nn.Linear(in_dim if i == 0 else width, width, dtype=dtype) for i in range(depth)])
        self.density_head = nn.Linear(width, 1, dtype=dtype)
        self.heads = nn.ModuleList(
            [nn.Sequential(nn.Linear(width, width, dtype=dtype), nn.ReLU(),
                           nn.Linear(width, spec.channels, dtype=dtype))
             for spec in self.layers])
        self.register_buffer("freq_bands", 2.0 ** torch.arange(frequencies, dtype=dtype),
                             persistent=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p_name, p in self.named_parameters():
                fan_in = p.shape[-1] if p.dim() == 2 else None
                if p.dim() == 2:
                    bound = 1.0 / np.sqrt(fan_in)
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
                else:
                    p.zero_()
            # start nearly empty: softplus(-2) ~ 0.13
            self.density_head.bias.fill_(-2.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if self.frequencies == 0:
            return x
        xb = x[..., None, :] * self.freq_bands[:, None]
        xb = xb.flatten(-2)
        return torch.cat([x, torch.sin(xb), torch.cos(xb)], dim=-1)

    def hidden(self, x: torch.Tensor):
        """Shared trunk output and density for positions x (..., 3)."""
        h = self.encode(x)
        for lin in self.trunk:
            h = F.relu(lin(h))
        sigma = F.softplus(self.density_head(h)[..., 0])
        return h, sigma

    def head(self, index: int, h: torch.Tensor) -> torch.Tensor:
        return self.heads[index](h)

    def forward(self, x: torch.Tensor):
        h, sigma = self.hidden(x)
        return sigma, [head(h) for head in self.heads]

    @property
    def dtype(self):
        return self.density_head.weight.dtype

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.parameters()])

    def load_flat(self, flat: np.ndarray):
        flat = np.asarray(flat)
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                if offset + n > flat.size:
                    raise DomainError("flat parameter vector too short")
                p.copy_(torch.from_numpy(flat[offset:offset + n].reshape(p.shape).copy()).to(p.dtype))
                offset += n
        if offset != flat.size:
            raise DomainError("flat parameter vector too long")

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite parameter {name}")


def field_eval(field: FeatureField, x):
    """Density (...) and one feature array per layer for positions x (..., 3)."""
    field.check_finite()
    x_t = torch.as_tensor(np.asarray(x), dtype=field.dtype)
    with torch.no_grad():
        sigma, feats = field(x_t)
    return sigma.numpy(), [f.numpy() for f in feats]


def field_source(field: FeatureField, layer_index: int):
    def source(points: torch.Tensor):
        h, sigma = field.hidden(points.to(field.dtype))
        return sigma, field.head(layer_index, h)

    return source


def render_field_queries(field: FeatureField, camera: Camera, layer_index: int, n_samples: int,
                         rng: torch.Generator | None = None):
    """Query map (res, res, C) of one layer; also returns depth and opacity maps."""
    res = field.layers[layer_index].resolution
    return render_map(field_source(field, layer_index), camera, res, n_samples, rng)


def render_all_queries(field: FeatureField, cameras: Sequence[Camera], n_samples: int,
                       timestep: int = 0) -> QuerySet:
    maps = []
    for li in range(len(field.layers)):
        maps.append(np.stack([render_field_queries(field, cam, li, n_samples)[0]
                              for cam in cameras]))
    return QuerySet(timestep, maps)


# --------------------------------------------------------------------------- losses


def q_loss(rendered: Sequence, target: Sequence, norm: str = "l2sq"):
    """Mean over layers of the per-ray mean distance between rendered and target queries.

    Each list entry is one layer, shaped (rays, C_l) or any (..., C_l).
    ``norm="l2sq"`` uses squared L2 over channels, ``"l1"`` the plain L1 norm.
    """
    if len(rendered) != len(target):
        raise DomainError("rendered and target cover different layer counts")
    terms = []
    for r, t in zip(rendered, target):
        if tuple(r.shape) != tuple(t.shape):
            raise DomainError(f"shape mismatch {tuple(r.shape)} vs {tuple(t.shape)}")
        diff = r - t
        if norm == "l2sq":
            terms.append((diff * diff).sum(-1).mean())
        elif norm == "l1":
            terms.append(abs(diff).sum(-1).mean())
        else:
            raise DomainError(f"unknown norm {norm!r}")
    return sum(terms) / len(terms)


def depth_loss(expected_depth, target_depth, supervised):
    """Squared expected-depth error where supervised, zero elsewhere (elementwise)."""
    if isinstance(expected_depth, torch.Tensor):
        mask = torch.as_tensor(supervised, dtype=expected_depth.dtype)
        return mask * (expected_depth - torch.as_tensor(target_depth, dtype=expected_depth.dtype)) ** 2
    return np.where(supervised, (np.asarray(expected_depth) - target_depth) ** 2, 0.0)


# --------------------------------------------------------------------------- supervision / data


@dataclass
class DepthSupervision:
    """Original-scene depth and supervision masks, keyed by map resolution.

    ``depth[res]`` and ``mask[res]`` have shape (views, res, res). A pixel is
    supervised when it lies outside the union of the object silhouettes before
    and after the edit and the original scene is opaque there.
    """
    depth: dict[int, np.ndarray]
    mask: dict[int, np.ndarray]

    def __post_init__(self):
        for res in self.depth:
            if self.depth[res].shape != self.mask[res].shape:
                raise DomainError(f"depth/mask shape mismatch at resolution {res}")


def make_depth_supervision(original: SyntheticScene, edited: SyntheticScene,
                           cameras: Sequence[Camera], resolutions: Sequence[int],
                           n_samples: int, opacity_threshold: float = 0.5) -> DepthSupervision:
    depth, mask = {}, {}
    for res in sorted(set(resolutions)):
        d_views, m_views = [], []
        for cam in cameras:
            _, d, op = render_map(scene_source(original, None), cam, res, n_samples)
            union = union_mask(original, edited, cam, res, 0.5, n_samples)
            m = (~union) & (op > opacity_threshold)
            d_views.append(np.clip(d, cam.t_near, cam.t_far))
            m_views.append(m)
        depth[res] = np.stack(d_views)
        mask[res] = np.stack(m_views)
    return DepthSupervision(depth, mask)


@dataclass
class _LayerRays:
    origins: torch.Tensor
    dirs: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    target: torch.Tensor
    depth: torch.Tensor
    mask: torch.Tensor


def _layer_rays(field: FeatureField, targets: QuerySet, cameras: Sequence[Camera],
                depth: DepthSupervision | None) -> list[_LayerRays]:
    dtype = field.dtype
    if targets.n_views != len(cameras):
        raise DomainError(f"{targets.n_views} target views for {len(cameras)} cameras")
    out = []
    for li, spec in enumerate(field.layers):
        tmap = targets.maps[li]
        if tmap.shape[1:] != (spec.resolution, spec.resolution, spec.channels):
            raise DomainError(f"layer {li} targets {tmap.shape[1:]} do not match {spec}")
        o, d, n, f = [], [], [], []
        for cam in cameras:
            oo, dd = camera_rays(cam, spec.resolution)
            o.append(oo.reshape(-1, 3))
            d.append(dd.reshape(-1, 3))
            n.append(np.full(oo.shape[0] * oo.shape[1], cam.t_near))
            f.append(np.full(oo.shape[0] * oo.shape[1], cam.t_far))
        n_rays = sum(len(x) for x in n)
        if depth is not None and spec.resolution in depth.depth:
            dep = depth.depth[spec.resolution].reshape(-1)
            msk = depth.mask[spec.resolution].reshape(-1)
        else:
            dep, msk = np.zeros(n_rays), np.zeros(n_rays, dtype=bool)
        conv = lambda a: torch.as_tensor(np.concatenate(a) if isinstance(a, list) else a, dtype=dtype)
        out.append(_LayerRays(conv(o), conv(d), conv(n), conv(f),
                              torch.as_tensor(tmap.reshape(-1, spec.channels), dtype=dtype),
                              conv(dep), torch.as_tensor(msk)))
    return out


def render_ray_batch(field: FeatureField, layer_index: int, origins, dirs, near, far, n_samples: int,
                     generator: torch.Generator | None):
    t, delta = stratified_t(origins.shape[0], n_samples, near, far, generator, field.dtype)
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    h, sigma = field.hidden(points)
    feat = field.head(layer_index, h)
    return composite(sigma, feat, RaySamples(points, t, delta))


def batch_loss(field: FeatureField, batch: list[tuple[int, _LayerRays]], n_samples: int,
               depth_weight: float, generator: torch.Generator | None, norm: str = "l2sq"):
    """L_q + depth_weight * L_depth over per-layer ray batches."""
    rendered, targets, depth_terms = [], [], []
    for li, rays in batch:
        out = render_ray_batch(field, li, rays.origins, rays.dirs, rays.near, rays.far,
                               n_samples, generator)
        rendered.append(out.feature)
        targets.append(rays.target)
        depth_terms.append(depth_loss(out.expected_depth, rays.depth, rays.mask))
    lq = q_loss(rendered, targets, norm)
    ld = torch.cat(depth_terms).mean()
    return lq + depth_weight * ld, lq, ld


def _subset(rays: _LayerRays, idx: torch.Tensor) -> _LayerRays:
    return _LayerRays(*(getattr(rays, f)[idx] for f in
                        ("origins", "dirs", "near", "far", "target", "depth", "mask")))


@dataclass
class TrainResult:
    field: FeatureField
    history: list[float]
    initial_loss: float
    final_loss: float
    step: int = 0
    moments: dict = dc_field(default_factory=dict, repr=False)


def full_loss(field: FeatureField, data: list[_LayerRays], n_samples: int, depth_weight: float,
              chunk: int = 4096, norm: str = "l2sq") -> float:
    """Deterministic (bin-midpoint) loss over every training ray."""
    q_terms, d_sum, d_count = [], 0.0, 0
    with torch.no_grad():
        for li, rays in enumerate(data):
            n = rays.origins.shape[0]
            err = 0.0
            for s in range(0, n, chunk):
                sub = _subset(rays, torch.arange(s, min(n, s + chunk)))
                out = render_ray_batch(field, li, sub.origins, sub.dirs, sub.near, sub.far,
                                       n_samples, None)
                diff = out.feature - sub.target
                if norm == "l2sq":
                    err += float((diff * diff).sum())
                else:
                    err += float(diff.abs().sum())
                d_sum += float(depth_loss(out.expected_depth, sub.depth, sub.mask).sum())
            q_terms.append(err / n)
            d_count += n
    return float(np.mean(q_terms) + depth_weight * d_sum / d_count)


def train_qnerf(init: FeatureField, targets: QuerySet, cameras: Sequence[Camera],
                depth: DepthSupervision | None, *, steps: int, batch: int, n_samples: int,
                depth_weight: float = 1.0, learning_rate: float = 5e-3, seed: int = 0,
                norm: str = "l2sq", evaluate: bool = True) -> TrainResult:
    """Fit a copy of ``init`` to the query maps of all views.

    Each step draws ``batch // n_layers`` random rays per layer, pooled across
    views, with stratified jitter along each ray. The initial field is not
    modified.
    """
    if targets.n_views < 2:
        raise DomainError("training needs at least two views")
    if steps < 1:
        raise DomainError("steps must be >= 1")
    field = copy.deepcopy(init)
    field.check_finite()
    with single_threaded():
        data = _layer_rays(field, targets, cameras, depth)
        per_layer = max(1, batch // len(data))
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(field.parameters(), lr=learning_rate)
        initial = full_loss(field, data, n_samples, depth_weight, norm=norm) if evaluate else float("nan")
        history = []
        for step in range(steps):
            chosen = []
            for li, rays in enumerate(data):
                idx = torch.randint(rays.origins.shape[0], (per_layer,), generator=gen)
                chosen.append((li, _subset(rays, idx)))
            loss, _, _ = batch_loss(field, chosen, n_samples, depth_weight, gen, norm)
            if not torch.isfinite(loss):
                raise TrainingError("loss became non-finite", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
        final = full_loss(field, data, n_samples, depth_weight, norm=norm) if evaluate else float("nan")
    field.check_finite()
    return TrainResult(field, history, initial, final, steps, opt.state_dict())
