"""A deterministic toy latent denoiser built from real self-attention blocks.

The generator runs coarse-to-fine stages, one per query layer. Each stage
embeds the resampled structure signal, the control map and a timestep
embedding into tokens ``X``, then projects them to queries, keys and values.
Two streams leave every stage:

* structure: ``tanh(X)`` feeds the next stage, so queries depend only on the
  latent, the control and the timestep;
* prediction: the attention output ``softmax(Q K^T / sqrt(C)) V`` is mapped
  back to token width and added residually to the final tokens, which are
  read out into the clean-latent prediction.

Key/value injection and direct query replacement therefore change the
prediction without touching any layer's queries.

The clean-latent prediction blends a per-view target with a readout of the
final tokens::

    lam_t = A * alpha_bar_t ** p
    z0_hat = (1 - lam_t) * target_v + lam_t * pool(tanh(final_tokens) @ M)

The structure chain is built so that ``pool(final @ M)`` is close to the latent
itself for small signals. At high noise the target dominates; near t = 0 the
prediction mostly keeps what the latent already holds, so changes made by
guidance survive the last steps instead of being pulled back to the target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError, NumericError
from .qfield import LayerSpec, QuerySet

DTYPE = torch.float64


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,)


def make_schedule(T: int) -> DiffusionSchedule:
    """Cosine cumulative-signal schedule ``cos^2(pi/2 * t/T)`` clamped to [1e-6, 1]."""
    if T < 2:
        raise DomainError("schedule needs T >= 2")
    t = np.arange(T + 1)
    ab = np.clip(np.cos(0.5 * np.pi * t / T) ** 2, 1e-6, 1.0)
    ab[0] = 1.0
    return DiffusionSchedule(T, ab)


def resample(grid: torch.Tensor, res: int) -> torch.Tensor:
    """(H, W, C) grid to (res, res, C): bilinear up, area-average down."""
    h = grid.shape[0]
    if h == res:
        return grid
    x = grid.permute(2, 0, 1).unsqueeze(0)
    if res > h:
        y = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
    else:
        if h % res:
            raise ConfigError(f"cannot downsample {h} to {res}", key="layers.resolution")
        y = F.avg_pool2d(x, h // res)
    return y[0].permute(1, 2, 0)


@dataclass(frozen=True, eq=False)
class Stage:
    embed: torch.Tensor  # (in, d)
    control: torch.Tensor  # (d,)
    time: torch.Tensor  # (T + 1, d)
    w_q: torch.Tensor  # (d, C)
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_out: torch.Tensor  # (C, d_final)


@dataclass(frozen=True, eq=False)
class GeneratorWeights:
    layers: tuple[LayerSpec, ...]
    latent_res: int
    latent_channels: int
    stages: tuple[Stage, ...]
    mix: torch.Tensor  # (d_final, C0)
    targets: torch.Tensor  # (views, R0, R0, C0)
    amplitude: float
    schedule: DiffusionSchedule
    seed: int
    feedback_power: float = 8.0

    def feedback(self, t: int) -> float:
        """Weight of the latent readout in the clean-latent prediction at timestep t."""
        return self.amplitude * float(self.schedule.alpha_bar[t]) ** self.feedback_power

    def with_targets(self, targets) -> "GeneratorWeights":
        return replace(self, targets=torch.as_tensor(np.asarray(targets), dtype=DTYPE))

    def with_amplitude(self, amplitude: float) -> "GeneratorWeights":
        return replace(self, amplitude=float(amplitude))

    @property
    def n_views(self) -> int:
        return self.targets.shape[0]


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Matrix with orthonormal rows (rows <= cols) or columns (rows > cols)."""
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if rows <= cols else q


TIME_BANDS = 3


def _time_features(T: int) -> np.ndarray:
    """(T + 1, 2B) low-frequency sinusoids of t / T, unit RMS per row."""
    u = np.arange(T + 1)[:, None] / T
    k = np.arange(1, TIME_BANDS + 1)[None, :]
    return np.concatenate([np.cos(0.5 * np.pi * k * u), np.sin(0.5 * np.pi * k * u)], axis=1) / np.sqrt(TIME_BANDS)


def make_generator(layers: Sequence[LayerSpec], *, latent_res: int, latent_channels: int,
                   targets, T: int, amplitude: float, seed: int, width: int = 32,
                   structure_gain: float = 1.0, control_weight: float = 0.3,
                   time_weight: float = 0.1, attention_gain: float = 0.5,
                   query_gain: float = 1.0, feedback_power: float = 8.0) -> GeneratorWeights:
    """Seeded fixed weights; identical arguments give bit-identical weights."""
    layers = tuple(layers)
    if width < latent_channels:
        raise ConfigError("generator width must be >= latent channels", key="generator.width")
    if not 0 <= amplitude <= 1:
        raise ConfigError("feedback amplitude must lie in [0, 1]", key="amplitude")
    for spec in layers:
        if spec.resolution % latent_res and latent_res % spec.resolution:
            raise ConfigError(f"layer resolution {spec.resolution} incompatible with latent "
                              f"resolution {latent_res}", key="layers.resolution")
    rng = np.random.default_rng([seed, 7919])
    stages = []
    chain = np.eye(latent_channels)
    in_dim = latent_channels
    for spec in layers:
        embed = structure_gain * _orthogonal(rng, in_dim, width)
        chain = chain @ embed
        c = spec.channels
        stages.append(Stage(
            embed=torch.as_tensor(embed, dtype=DTYPE),
            control=torch.as_tensor(0.5 * control_weight * rng.normal(size=width), dtype=DTYPE),
            time=torch.as_tensor(time_weight * _time_features(T) @ rng.normal(size=(2 * TIME_BANDS, width)),
                                 dtype=DTYPE),
            w_q=torch.as_tensor(query_gain * rng.normal(size=(width, c)) / np.sqrt(c), dtype=DTYPE),
            w_k=torch.as_tensor(query_gain * rng.normal(size=(width, c)) / np.sqrt(c), dtype=DTYPE),
            w_v=torch.as_tensor(rng.normal(size=(width, c)) / np.sqrt(width), dtype=DTYPE),
            w_out=torch.as_tensor(attention_gain * rng.normal(size=(c, width)) / np.sqrt(c), dtype=DTYPE),
        ))
        in_dim = width
    mix = np.linalg.pinv(chain)  # (width, C0): linear readout inverts the structure chain
    targets = torch.as_tensor(np.asarray(targets), dtype=DTYPE)
    if targets.shape[1:] != (latent_res, latent_res, latent_channels):
        raise ConfigError(f"targets shape {tuple(targets.shape)} does not match latent "
                          f"{latent_res}x{latent_res}x{latent_channels}", key="latent")
    return GeneratorWeights(layers, latent_res, latent_channels, tuple(stages),
                            torch.as_tensor(mix, dtype=DTYPE), targets, float(amplitude),
                            make_schedule(T), seed, float(feedback_power))


@dataclass
class DenoiseTrace:
    """Everything one generator pass produced for one view at one timestep."""
    view: int
    t: int
    z: torch.Tensor
    control: tuple[torch.Tensor, ...]  # per-stage control maps (r, r)
    queries: list[torch.Tensor]  # per layer (r, r, C)
    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    attention: list[torch.Tensor]  # per layer (r*r, r*r) row-stochastic
    z0_hat: torch.Tensor
    eps_hat: torch.Tensor


def control_pyramid(weights: GeneratorWeights, control) -> tuple[torch.Tensor, ...]:
    """Resample one control map (H, W) to every stage resolution."""
    c = torch.as_tensor(np.asarray(control), dtype=DTYPE)
    return tuple(resample(c[..., None], s.resolution)[..., 0] for s in weights.layers)


def _tokens(weights, z, t, control, index, prev):
    st = weights.stages[index]
    res = weights.layers[index].resolution
    u = resample(prev, res)
    return u @ st.embed + control[index][..., None] * st.control + st.time[t]


def structure_tokens(weights: GeneratorWeights, z: torch.Tensor, t: int,
                     control: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Token grids X_s (r, r, d) of every stage; differentiable in z."""
    xs, prev = [], z
    for i in range(len(weights.stages)):
        x = _tokens(weights, z, t, control, i, prev)
        xs.append(x)
        prev = torch.tanh(x)
    return xs


def compute_queries(weights: GeneratorWeights, z: torch.Tensor, t: int,
                    control: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [x @ st.w_q for x, st in zip(structure_tokens(weights, z, t, control), weights.stages)]


def _attend(q, k, v):
    c = q.shape[-1]
    qf, kf, vf = q.reshape(-1, c), k.reshape(-1, c), v.reshape(-1, c)
    p = torch.softmax(qf @ kf.T / np.sqrt(c), dim=-1)
    return p, p @ vf


def generator_forward(weights: GeneratorWeights, z, t: int, control, view: int, *,
                      kv: Mapping[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
                      q_override: Mapping[int, torch.Tensor] | None = None) -> DenoiseTrace:
    """One full pass. ``kv`` maps layer index to substitute (K, V); ``q_override`` to substitute Q.

    ``control`` is either a raw (H, W) map or an already resampled pyramid.
    """
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.shape != (weights.latent_res, weights.latent_res, weights.latent_channels):
        raise DomainError(f"latent shape {tuple(z.shape)} does not match configuration")
    if not 0 <= t <= weights.schedule.T:
        raise DomainError(f"timestep {t} outside [0, {weights.schedule.T}]")
    if not isinstance(control, tuple):
        control = control_pyramid(weights, control)
    kv = kv or {}
    q_override = q_override or {}
    xs = structure_tokens(weights, z, t, control)
    final_res = weights.layers[-1].resolution
    final = xs[-1]
    qs, ks, vs, ps = [], [], [], []
    for i, (x, st) in enumerate(zip(xs, weights.stages)):
        res, c = weights.layers[i].resolution, weights.layers[i].channels
        q = q_override.get(i, x @ st.w_q)
        q = torch.as_tensor(q, dtype=DTYPE).reshape(res, res, c)
        if i in kv:
            k, v = (torch.as_tensor(a, dtype=DTYPE) for a in kv[i])
        else:
            k, v = x @ st.w_k, x @ st.w_v
        p, o = _attend(q, k, v)
        final = final + resample((o @ st.w_out).reshape(res, res, -1), final_res)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        ps.append(p)
    readout = resample(torch.tanh(final) @ weights.mix, weights.latent_res)
    ab = float(weights.schedule.alpha_bar[t])
    lam = weights.feedback(t)
    z0_hat = (1.0 - lam) * weights.targets[view] + lam * readout
    if ab >= 1.0:
        eps_hat = torch.zeros_like(z)
    else:
        eps_hat = (z - np.sqrt(ab) * z0_hat) / np.sqrt(1.0 - ab)
    if not (torch.isfinite(z0_hat).all() and torch.isfinite(eps_hat).all()):
        raise NumericError(f"non-finite generator output at t={t}, view {view}")
    return DenoiseTrace(view, t, z, control, qs, ks, vs, ps, z0_hat, eps_hat)


def ddim_step(z_t, trace: DenoiseTrace, schedule: DiffusionSchedule, t: int) -> torch.Tensor:
    """Deterministic (eta = 0) update from t to t - 1."""
    if t < 1:
        raise DomainError("ddim_step needs t >= 1")
    ab_prev = float(schedule.alpha_bar[t - 1])
    z = np.sqrt(ab_prev) * trace.z0_hat + np.sqrt(1.0 - ab_prev) * trace.eps_hat
    if not torch.isfinite(z).all():
        raise NumericError(f"non-finite latent after step at t={t}")
    return z.detach()


@dataclass(frozen=True)
class InjectionConfig:
    start_step: int = 4
    layers: tuple[int, ...] = ()  # layer indices receiving source keys/values

    def active(self, T: int, t: int) -> bool:
        """Denoising steps are numbered from 1 at t = T; injection runs from ``start_step`` on."""
        return bool(self.layers) and (T - t + 1) >= self.start_step


def kv_from(trace: DenoiseTrace, layers: Sequence[int]) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    return {i: (trace.keys[i], trace.values[i]) for i in layers}


def inject_kv(weights: GeneratorWeights, edit_trace: DenoiseTrace, source_trace: DenoiseTrace,
              config: InjectionConfig) -> DenoiseTrace:
    """Recompute ``edit_trace`` with the source's keys and values at the configured layers."""
    for i in config.layers:
        if not 0 <= i < len(weights.layers):
            raise ConfigError(f"injection references unknown layer {i}", key="kv_injection.layers")
    if not config.active(weights.schedule.T, edit_trace.t):
        return edit_trace
    return generator_forward(weights, edit_trace.z, edit_trace.t, edit_trace.control,
                             edit_trace.view, kv=kv_from(source_trace, config.layers))


def extract_queries(trace: DenoiseTrace) -> list[np.ndarray]:
    return [q.detach().numpy().copy() for q in trace.queries]


def guidance_loss(weights: GeneratorWeights, z: torch.Tensor, t: int, control, rendered) -> torch.Tensor:
    """Sum over layers of the squared Frobenius distance between generated and rendered queries."""
    qs = compute_queries(weights, z, t, control)
    if len(rendered) != len(qs):
        raise DomainError("rendered maps cover a different number of layers")
    total = z.new_zeros(())
    for q, r in zip(qs, rendered):
        r = torch.as_tensor(np.asarray(r), dtype=DTYPE)
        if r.shape != q.shape:
            raise DomainError(f"rendered map {tuple(r.shape)} does not match {tuple(q.shape)}")
        total = total + ((q - r) ** 2).sum()
    return total


def guidance_gradient(weights, z_t, t, control, rendered) -> torch.Tensor:
    z = torch.as_tensor(z_t, dtype=DTYPE).detach().clone().requires_grad_(True)
    if not isinstance(control, tuple):
        control = control_pyramid(weights, control)
    loss = guidance_loss(weights, z, t, control, rendered)
    (grad,) = torch.autograd.grad(loss, z)
    if not torch.isfinite(grad).all():
        qs = compute_queries(weights, z.detach(), t, control)
        bad = [i for i, q in enumerate(qs) if not torch.isfinite(q).all()]
        raise NumericError(f"non-finite guidance gradient at t={t}; non-finite query layers {bad}")
    return grad


def guidance_update(weights: GeneratorWeights, z_t, t: int, control, rendered,
                    alpha: float) -> torch.Tensor:
    """One soft-guidance step: z - alpha * grad_z sum_l ||Q_l(z) - rendered_l||^2."""
    if alpha < 0:
        raise DomainError("guidance strength must be >= 0")
    z = torch.as_tensor(z_t, dtype=DTYPE)
    if alpha == 0:
        return z.clone()
    return (z - alpha * guidance_gradient(weights, z, t, control, rendered)).detach()


def direct_replace(weights: GeneratorWeights, trace: DenoiseTrace, rendered,
                   kv: Mapping[int, tuple[torch.Tensor, torch.Tensor]] | None = None) -> DenoiseTrace:
    """Overwrite every layer's queries with ``rendered`` and recompute attention downstream."""
    over = {}
    for i, (q, r) in enumerate(zip(trace.queries, rendered)):
        r = torch.as_tensor(np.asarray(r), dtype=DTYPE)
        if r.shape != q.shape:
            raise DomainError(f"rendered map {tuple(r.shape)} does not match {tuple(q.shape)}")
        over[i] = r
    if len(rendered) != len(trace.queries):
        raise DomainError("rendered maps cover a different number of layers")
    if kv is None:
        kv = {i: (trace.keys[i], trace.values[i]) for i in range(len(trace.keys))}
    return generator_forward(weights, trace.z, trace.t, trace.control, trace.view,
                             kv=kv, q_override=over)


def query_set(traces: Sequence[DenoiseTrace], timestep: int) -> QuerySet:
    per_view = [extract_queries(tr) for tr in traces]
    return QuerySet(timestep, [np.stack([pv[i] for pv in per_view]) for i in range(len(per_view[0]))])
