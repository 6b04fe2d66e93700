"""Interval scheduling and progressive consolidation.

A run denoises every view in lockstep. The denoising is cut into overlapping
intervals of ``2 * tau`` steps: guided steps pull each view's queries toward
renders of the current field, a latent snapshot is stored, free steps let the
queries evolve, the evolved queries are extracted and a warm-started field is
fitted to them, and the latents rewind to the snapshot. The first interval has
no field yet and runs free for ``2 * tau`` steps.

The schedule is a flat event program; :func:`build_schedule` is a pure
function of (T, tau) and the executed log of a full run reproduces it line
for line.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
import torch

from . import toydiff
from .errors import DomainError
from .geometry import (Camera, EditSpec, Primitive, RigidTransform, SyntheticScene, apply_edit,
                       camera_ring, rotation_matrix)
from .qfield import (DepthSupervision, FeatureField, QuerySet, make_depth_supervision,
                     render_all_queries, single_threaded, train_qnerf)
from .metrics import write_report
from .store import RunConfig, dump_config, dump_queries, save_checkpoint
from .volrender import render_map, scene_source


GUIDED, FREE, STORE, EXTRACT, TRAIN, REWIND, FINISH = (
    "GUIDED", "FREE", "STORE", "EXTRACT", "TRAIN", "REWIND", "FINISH")


@dataclass(frozen=True)
class Event:
    kind: str
    value: int  # timestep, or interval index for TRAIN

    def __str__(self):
        return f"{self.kind} {self.value}"


@dataclass(frozen=True)
class IntervalSchedule:
    T: int
    tau: int
    events: tuple[Event, ...]

    def lines(self) -> list[str]:
        return [str(e) for e in self.events]

    def extraction_timesteps(self) -> list[int]:
        return [e.value for e in self.events if e.kind == EXTRACT]

    def segments(self) -> list[tuple[Event, ...]]:
        """Events split after every REWIND and FINISH."""
        out, cur = [], []
        for e in self.events:
            cur.append(e)
            if e.kind in (REWIND, FINISH):
                out.append(tuple(cur))
                cur = []
        if cur:
            out.append(tuple(cur))
        return out


def build_schedule(T: int, tau: int) -> IntervalSchedule:
    """Event program for ``T`` denoising steps with half-interval ``tau``.

    When ``T`` is not a multiple of ``tau`` the free phase of an interval is
    cut at t = 0 and the following interval's guided phase is shortened, so
    every timestep is still denoised exactly once outside rewound segments.
    """
    if tau < 1 or 2 * tau > T:
        raise DomainError(f"schedule needs tau >= 1 and 2*tau <= T (T={T}, tau={tau})")
    ev: list[Event] = []
    train_index = 0

    def free_then_train(start: int):
        nonlocal train_index
        stop = max(start - tau, 0)
        ev.extend(Event(FREE, t) for t in range(start, stop, -1))
        ev.append(Event(EXTRACT, stop))
        train_index += 1
        ev.append(Event(TRAIN, train_index))

    # first interval: no field yet
    ev.extend(Event(FREE, t) for t in range(T, T - tau, -1))
    ev.append(Event(STORE, T - tau))
    free_then_train(T - tau)
    ev.append(Event(REWIND, T - tau))
    t_i = T - tau
    while True:
        stop = max(t_i - tau, 0)
        ev.extend(Event(GUIDED, t) for t in range(t_i, stop, -1))
        if stop == 0:
            ev.append(Event(FINISH, 0))
            break
        ev.append(Event(STORE, stop))
        free_then_train(stop)
        ev.append(Event(REWIND, stop))
        t_i = stop
    return IntervalSchedule(T, tau, tuple(ev))


def unguided_program(T: int, extraction: Sequence[int]) -> IntervalSchedule:
    """Straight T -> 0 run that still extracts queries at the given timesteps."""
    wanted = set(extraction)
    ev = []
    for t in range(T, -1, -1):
        if t in wanted:
            ev.append(Event(EXTRACT, t))
        if t > 0:
            ev.append(Event(FREE, t))
    ev.append(Event(FINISH, 0))
    return IntervalSchedule(T, 0, tuple(ev))


# --------------------------------------------------------------------------- scenario


def scene_from_config(cfg: RunConfig) -> tuple[SyntheticScene, SyntheticScene]:
    prims = []
    for p in cfg.scene.primitives:
        size = [p.radius] if p.kind == "sphere" else p.half_extents
        prims.append(Primitive(p.kind, p.center, size, rotation_matrix(p.rotation_deg),
                               p.density, p.softness, p.backdrop))
    channels = [l.channels for l in cfg.layers]
    original = SyntheticScene(tuple(prims), channels, cfg.seeds.scene, cfg.scene.feature_frequency)
    edit = EditSpec(tuple(RigidTransform(rotation_matrix(t.rotation_deg), t.translation)
                          for t in cfg.edit.transforms))
    return original, apply_edit(original, edit)


def cameras_from_config(cfg: RunConfig) -> list[Camera]:
    c = cfg.cameras
    return camera_ring(c.count, c.radius, c.elevation_deg, size=c.size, fov_deg=c.fov_deg,
                       t_near=c.t_near, t_far=c.t_far)


def heldout_camera(cfg: RunConfig) -> Camera:
    c = cfg.cameras
    el, az = np.radians(c.heldout_elevation_deg), np.radians(c.heldout_azimuth_deg)
    eye = c.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera.look_at(eye, (0.0, 0.0, 0.0), size=c.size, fov_deg=c.fov_deg,
                          t_near=c.t_near, t_far=c.t_far)


def oracle_queries(scene: SyntheticScene, cameras: Sequence[Camera], resolutions: Sequence[int],
                   n_samples: int, timestep: int = 0) -> QuerySet:
    """Ground-truth feature renders of every layer, shaped like extracted queries."""
    return QuerySet(timestep, [
        np.stack([render_map(scene_source(scene, li), cam, res, n_samples)[0] for cam in cameras])
        for li, res in enumerate(resolutions)])


@dataclass
class Scenario:
    """Everything derived once from a configuration before denoising starts."""
    cfg: RunConfig
    original: SyntheticScene
    edited: SyntheticScene
    cameras: list[Camera]
    edit_weights: toydiff.GeneratorWeights
    source_weights: toydiff.GeneratorWeights
    edit_controls: list[tuple]
    source_controls: list[tuple]
    clean_targets: np.ndarray  # edited-scene latent targets without per-view perturbation
    perturbation: np.ndarray
    initial_noise: np.ndarray
    supervision: DepthSupervision
    injection: toydiff.InjectionConfig

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def _latent_render(scene, cameras, cfg, projection):
    """Layer-0 features rendered at the finest map resolution, pooled to the latent grid, projected."""
    fine = max(l.resolution for l in cfg.layers)
    r0 = cfg.latent.resolution
    out = []
    for cam in cameras:
        feat, _, _ = render_map(scene_source(scene, 0), cam, fine, cfg.sampling.n_samples)
        pooled = toydiff.resample(torch.from_numpy(feat), r0).numpy() if fine >= r0 else feat
        out.append(pooled @ projection)
    return np.stack(out)


def _control_maps(scene, cameras, cfg):
    fine = max(l.resolution for l in cfg.layers)
    maps = []
    for cam in cameras:
        _, depth, _ = render_map(scene_source(scene, None), cam, fine, cfg.sampling.n_samples)
        depth = np.clip(depth, cam.t_near, cam.t_far)
        maps.append((depth - cam.t_near) / (cam.t_far - cam.t_near) - 0.5)
    return maps


def _perturbation(rng, shape, eta: float, sigma: float) -> np.ndarray:
    """Per-view smooth Gaussian field with RMS ``eta`` (white noise when ``sigma`` is 0)."""
    raw = rng.normal(size=shape)
    if sigma > 0:
        raw = ndimage.gaussian_filter(raw, sigma=(0, sigma, sigma, 0), mode="wrap")
        raw /= np.sqrt(np.mean(raw ** 2, axis=(1, 2, 3), keepdims=True))
    return eta * raw


def build_scenario(cfg: RunConfig) -> Scenario:
    original, edited = scene_from_config(cfg)
    cameras = cameras_from_config(cfg)
    rng = np.random.default_rng([cfg.seeds.generator, 101])
    c_first = cfg.layers[0].channels
    projection = rng.normal(size=(c_first, cfg.latent.channels)) / np.sqrt(c_first)
    edit_lat = _latent_render(edited, cameras, cfg, projection)
    src_lat = _latent_render(original, cameras, cfg, projection)
    scale = cfg.latent.scale / max(np.sqrt(np.mean(edit_lat ** 2)), 1e-12)
    edit_lat, src_lat = edit_lat * scale, src_lat * scale
    perturb = _perturbation(rng, edit_lat.shape, cfg.eta, cfg.latent.perturbation_smoothing)
    noise = rng.normal(size=edit_lat.shape)
    layers = cfg.layer_specs()
    g = cfg.generator
    weights = toydiff.make_generator(
        layers, latent_res=cfg.latent.resolution, latent_channels=cfg.latent.channels,
        targets=edit_lat + perturb, T=cfg.T, amplitude=cfg.amplitude, seed=cfg.seeds.generator,
        width=g.width, control_weight=g.control_weight, time_weight=g.time_weight,
        attention_gain=g.attention_gain, query_gain=g.query_gain,
        feedback_power=g.feedback_power)
    source = weights.with_targets(src_lat)
    edit_ctrl = [toydiff.control_pyramid(weights, m) for m in _control_maps(edited, cameras, cfg)]
    src_ctrl = [toydiff.control_pyramid(weights, m) for m in _control_maps(original, cameras, cfg)]
    supervision = make_depth_supervision(original, edited, cameras,
                                         [l.resolution for l in cfg.layers], cfg.sampling.n_samples)
    injection = toydiff.InjectionConfig(cfg.kv_injection.start_step, cfg.kv_layer_indices())
    return Scenario(cfg, original, edited, cameras, weights, source, edit_ctrl, src_ctrl,
                    edit_lat, perturb, noise, supervision, injection)


# --------------------------------------------------------------------------- execution


@dataclass
class IntervalArtifact:
    index: int
    timestep: int
    queries: QuerySet
    field: FeatureField
    history: list[float]
    initial_loss: float
    final_loss: float
    renders: QuerySet


@dataclass
class RunArtifacts:
    mode: str
    scenario: Scenario
    events: list[str]
    extracted: list[QuerySet]  # every EXTRACT event, in order
    intervals: list[IntervalArtifact]
    final_latents: np.ndarray  # (views, R0, R0, C0); equals the last clean-latent prediction
    final_queries: QuerySet
    guidance_calls: int = 0

    @property
    def targets(self) -> np.ndarray:
        return self.scenario.edit_weights.targets.numpy()

    def target_deviation(self) -> float:
        """Mean over views of ||z0_hat - target||."""
        d = self.final_latents - self.targets
        return float(np.mean(np.sqrt((d ** 2).reshape(d.shape[0], -1).sum(1))))


class _ViewPool:
    """Maps a per-view function over views; results do not depend on the worker count."""

    def __init__(self, threads: int):
        self.threads = threads if threads > 0 else (os.cpu_count() or 1)
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn: Callable[[int], object], n: int) -> list:
        if self._ex is None:
            return [fn(v) for v in range(n)]
        return list(self._ex.map(fn, range(n)))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


def source_keys_values(sc: Scenario, pool: _ViewPool) -> list[dict[int, dict]]:
    """Keys/values of the unedited trajectory at every timestep, per view, for injected layers."""
    w, T = sc.source_weights, sc.cfg.T
    layers = sc.injection.layers

    def run(v):
        z = torch.as_tensor(sc.initial_noise[v], dtype=toydiff.DTYPE)
        out = {}
        for t in range(T, -1, -1):
            tr = toydiff.generator_forward(w, z, t, sc.source_controls[v], v)
            out[t] = toydiff.kv_from(tr, layers)
            if t > 0:
                z = toydiff.ddim_step(z, tr, w.schedule, t)
        return out

    return pool.map(run, sc.n_views)


class _Runner:
    def __init__(self, sc: Scenario, mode: str, threads: int,
                 on_event: Callable[[str], None] | None = None):
        self.sc, self.mode = sc, mode
        self.on_event = on_event
        self.cfg = sc.cfg
        self.w = sc.edit_weights
        self.pool = _ViewPool(threads)
        self.src_kv = source_keys_values(sc, self.pool)
        self.latents = [torch.as_tensor(n, dtype=toydiff.DTYPE) for n in sc.initial_noise]
        self.snapshots: dict[int, list[torch.Tensor]] = {}
        self.field: FeatureField | None = None
        self.renders: QuerySet | None = None
        self.last_extracted: QuerySet | None = None
        self.events: list[str] = []
        self.extracted: list[QuerySet] = []
        self.intervals: list[IntervalArtifact] = []
        self.guidance_calls = 0
        self.offline_fields: dict[int, IntervalArtifact] | None = None

    # -- per-view primitives
    def _kv(self, v, t):
        return self.src_kv[v][t] if self.sc.injection.active(self.cfg.T, t) else None

    def _step(self, t: int, guided: bool):
        direct = self.mode == "direct_injection"

        def run(v):
            z = self.latents[v]
            ctrl = self.sc.edit_controls[v]
            if guided and not direct:
                z = toydiff.guidance_update(self.w, z, t, ctrl, self.renders.view(v), self.cfg.alpha)
            trace = toydiff.generator_forward(self.w, z, t, ctrl, v, kv=self._kv(v, t))
            if guided and direct:
                trace = toydiff.direct_replace(self.w, trace, self.renders.view(v))
            return toydiff.ddim_step(z, trace, self.w.schedule, t)

        if guided and self.renders is None:
            raise DomainError(f"guided step at t={t} before any field was trained")
        self.latents = self.pool.map(run, self.sc.n_views)
        if guided and not direct:
            self.guidance_calls += self.sc.n_views

    def _queries(self, t: int) -> QuerySet:
        def run(v):
            return toydiff.generator_forward(self.w, self.latents[v], t, self.sc.edit_controls[v],
                                             v, kv=self._kv(v, t))

        return toydiff.query_set(self.pool.map(run, self.sc.n_views), t)

    # -- field training
    def _train(self, index: int, targets: QuerySet) -> IntervalArtifact:
        q = self.cfg.qnerf
        if self.offline_fields is not None:
            art = self.offline_fields[index]
        else:
            if self.field is None:
                init = FeatureField(self.sc.cfg.layer_specs(), q.frequencies, q.width, q.depth,
                                    seed=self.cfg.seeds.training)
                steps = q.steps
            else:
                init = self.field
                steps = q.warm_steps or q.steps
            res = train_qnerf(init, targets, self.sc.cameras, self.sc.supervision, steps=steps,
                              batch=q.batch, n_samples=self.cfg.sampling.n_samples,
                              depth_weight=q.depth_coefficient, learning_rate=q.learning_rate,
                              seed=self.cfg.seeds.training * 1000 + index, norm=q.norm)
            renders = render_all_queries(res.field, self.sc.cameras, self.cfg.sampling.n_samples,
                                         targets.timestep)
            art = IntervalArtifact(index, targets.timestep, targets, res.field, res.history,
                                   res.initial_loss, res.final_loss, renders)
        self.field = art.field
        self.renders = art.renders
        return art

    def execute(self, program: IntervalSchedule):
        for ev in program.events:
            self.events.append(str(ev))
            if self.on_event is not None:
                self.on_event(str(ev))
            k, val = ev.kind, ev.value
            if k in (GUIDED, FREE):
                self._step(val, guided=(k == GUIDED))
            elif k == STORE:
                self.snapshots = {val: [z.clone() for z in self.latents]}
            elif k == REWIND:
                if val not in self.snapshots:
                    raise DomainError(f"rewind to t={val} without a stored snapshot")
                self.latents = [z.clone() for z in self.snapshots[val]]
            elif k == EXTRACT:
                self.last_extracted = self._queries(val)
                self.extracted.append(self.last_extracted)
            elif k == TRAIN:
                art = self._train(val, self.last_extracted)
                art.index = val
                self.intervals.append(art)
            elif k == FINISH:
                pass

    def finish(self) -> RunArtifacts:
        final_q = self._queries(0)
        lat = np.stack([z.numpy() for z in self.latents])
        self.pool.close()
        return RunArtifacts(self.mode, self.sc, self.events, self.extracted, self.intervals, lat,
                            final_q, self.guidance_calls)


def run_pipeline(sc: Scenario, mode: str | None = None, threads: int = 1,
                 on_event: Callable[[str], None] | None = None) -> RunArtifacts:
    """Execute one run; ``mode`` defaults to the configuration's mode.

    ``on_event`` receives every executed event line as it happens, so a caller
    can keep a flushed log even when a later step raises.
    """
    mode = mode or sc.cfg.mode
    sched = build_schedule(sc.cfg.T, sc.cfg.tau)
    with single_threaded():
        if mode in ("full", "direct_injection"):
            r = _Runner(sc, mode, threads, on_event)
            r.execute(sched)
            return r.finish()
        if mode == "unguided_baseline":
            r = _Runner(sc, mode, threads, on_event)
            r.execute(unguided_program(sc.cfg.T, sched.extraction_timesteps()))
            return r.finish()
        if mode == "non_progressive":
            return _run_non_progressive(sc, sched, threads, on_event)
    raise DomainError(f"unknown mode {mode!r}")


def _run_non_progressive(sc: Scenario, sched: IntervalSchedule, threads: int,
                         on_event=None) -> RunArtifacts:
    # 1) independent edits, caching queries at every extraction timestep
    cache = _Runner(sc, "unguided_baseline", threads)
    cache.execute(unguided_program(sc.cfg.T, sched.extraction_timesteps()))
    cache.pool.close()
    # 2) offline fields, one per extraction timestep, in schedule order
    trainer = _Runner(sc, "non_progressive", threads)
    by_t = {q.timestep: q for q in cache.extracted}
    offline = {}
    train_events = [e for e in sched.events if e.kind == TRAIN]
    for ev, t in zip(train_events, sched.extraction_timesteps()):
        offline[ev.value] = trainer._train(ev.value, by_t[t])
    trainer.pool.close()
    # 3) re-run the interval program, guiding with the offline fields
    r = _Runner(sc, "non_progressive", threads, on_event)
    r.offline_fields = offline
    r.execute(sched)
    return r.finish()


# --------------------------------------------------------------------------- output


def write_run(art: RunArtifacts, out: str | Path, figures: bool = True):
    """Write the run directory: event log, per-interval checkpoints and query dumps,
    final queries and latents, metrics and a JSON manifest. Returns the metrics report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.log").write_text("".join(line + "\n" for line in art.events))
    for ia in art.intervals:
        d = out / f"interval_{ia.index}"
        d.mkdir(exist_ok=True)
        save_checkpoint(ia.field, d / "qnerf.bin")
        dump_queries(ia.queries, d / "queries.bin")
        (d / "loss.txt").write_text("".join(f"{x!r}\n" for x in ia.history))
    fin = out / "final"
    fin.mkdir(exist_ok=True)
    dump_queries(art.final_queries, fin / "queries.bin")
    dump_queries(QuerySet(0, [art.final_latents.astype(np.float32)]), fin / "latents.bin")
    report = write_report(art, out, figures=figures)
    cfg = art.scenario.cfg
    manifest = {
        "mode": art.mode,
        "seeds": cfg.seeds.model_dump(),
        "config": json.loads(dump_config(cfg)),
        "intervals": [{"index": ia.index, "timestep": ia.timestep, "initial_loss": ia.initial_loss,
                       "final_loss": ia.final_loss} for ia in art.intervals],
        "target_deviation": art.target_deviation(),
        "final_consistency": [float(c) for c in report.consistency],
        "guidance_calls": art.guidance_calls,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return report
