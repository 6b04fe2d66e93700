"""Oracle-based consistency and fidelity measures, plus the run report.

Cross-view consistency compares query maps at true 3D correspondences: surface
points of the edited scene are projected into every view where the oracle says
they are unoccluded, and the bilinearly sampled queries are compared pairwise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, EvaluationError
from .geometry import Camera, SyntheticScene
from .qfield import DepthSupervision, FeatureField, QuerySet, field_source
from .volrender import render_map

VISIBILITY_THRESHOLD = 0.5
PGM_GAIN = 64.0


def sample_surface_points(scene: SyntheticScene, cameras: Sequence[Camera], n: int, seed: int,
                          n_march: int = 512, max_tries: int = 20) -> np.ndarray:
    """First points reaching half the peak density along random pixel rays of random cameras."""
    rng = np.random.default_rng([seed, 17])
    half = 0.5 * scene.max_density
    if half <= 0:
        raise EvaluationError("scene has no density")
    found = []
    for _ in range(max_tries):
        need = n - sum(len(f) for f in found)
        if need <= 0:
            break
        batch = 2 * need
        cam_idx = rng.integers(len(cameras), size=batch)
        pts = []
        for ci, cam in enumerate(cameras):
            sel = cam_idx == ci
            if not sel.any():
                continue
            m = int(sel.sum())
            px = rng.uniform(0, cam.width, m)
            py = rng.uniform(0, cam.height, m)
            local = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones(m)], -1)
            d = local @ cam.rotation.T
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            t = np.linspace(cam.t_near, cam.t_far, n_march)
            x = cam.translation + t[None, :, None] * d[:, None, :]
            dens = scene.density(x)
            hit = dens >= half
            has = hit.any(axis=1)
            first = hit.argmax(axis=1)
            pts.append(x[np.arange(m), first][has])
        if pts:
            found.append(np.concatenate(pts))
    if not found or sum(len(f) for f in found) == 0:
        raise EvaluationError("no surface points found")
    return np.concatenate(found)[:n]


def transmittance_to(scene: SyntheticScene, camera: Camera, points: np.ndarray,
                     n: int = 128) -> np.ndarray:
    """Oracle transmittance from the camera center to each point (midpoint quadrature)."""
    vec = points - camera.translation
    dist = np.linalg.norm(vec, axis=-1)
    u = (np.arange(n) + 0.5) / n
    x = camera.translation + u[None, :, None] * vec[:, None, :]
    optical = scene.density(x).sum(axis=1) * dist / n
    return np.exp(-optical)


def bilinear(map_: np.ndarray, camera: Camera, pix: np.ndarray) -> np.ndarray:
    """Sample a (r, r, C) map at image pixel coordinates (..., 2)."""
    r = map_.shape[0]
    u = np.clip(pix[..., 0] * r / camera.width - 0.5, 0, r - 1)
    v = np.clip(pix[..., 1] * r / camera.height - 0.5, 0, r - 1)
    u0 = np.minimum(np.floor(u).astype(int), r - 2 if r > 1 else 0)
    v0 = np.minimum(np.floor(v).astype(int), r - 2 if r > 1 else 0)
    du, dv = (u - u0)[..., None], (v - v0)[..., None]
    u1, v1 = np.minimum(u0 + 1, r - 1), np.minimum(v0 + 1, r - 1)
    return ((1 - dv) * ((1 - du) * map_[v0, u0] + du * map_[v0, u1])
            + dv * ((1 - du) * map_[v1, u0] + du * map_[v1, u1]))


@dataclass
class Correspondences:
    """Surface points with per-view pixel positions and visibility."""
    points: np.ndarray  # (P, 3)
    pixels: np.ndarray  # (V, P, 2)
    visible: np.ndarray  # (V, P) bool


def correspondences(scene: SyntheticScene, cameras: Sequence[Camera], samples: int,
                    seed: int) -> Correspondences:
    if len(cameras) < 2:
        raise DomainError("consistency needs at least two views")
    if samples < 1:
        raise DomainError("samples must be >= 1")
    pts = sample_surface_points(scene, cameras, samples, seed)
    pix, vis = [], []
    for cam in cameras:
        p, z = cam.project(pts)
        inside = (z > 0) & (p[:, 0] >= 0) & (p[:, 0] < cam.width) & (p[:, 1] >= 0) & (p[:, 1] < cam.height)
        ok = inside.copy()
        if inside.any():
            ok[inside] = transmittance_to(scene, cam, pts[inside]) > VISIBILITY_THRESHOLD
        pix.append(np.where(np.isfinite(p), p, 0.0))
        vis.append(ok)
    return Correspondences(pts, np.stack(pix), np.stack(vis))


def consistency_from(queries: QuerySet, corr: Correspondences, cameras: Sequence[Camera]) -> np.ndarray:
    """Per-layer mean pairwise query distance at correspondences over the mean query norm."""
    if queries.n_views != len(cameras):
        raise DomainError(f"{queries.n_views} query views for {len(cameras)} cameras")
    out = []
    V = len(cameras)
    pair_i, pair_j = np.triu_indices(V, 1)
    both = corr.visible[pair_i] & corr.visible[pair_j]  # (pairs, P)
    if not both.any():
        raise EvaluationError("no surface point is visible in two views")
    for m in queries.maps:
        samples = np.stack([bilinear(m[v].astype(np.float64), cameras[v], corr.pixels[v])
                            for v in range(V)])  # (V, P, C)
        diffs = np.linalg.norm(samples[pair_i] - samples[pair_j], axis=-1)  # (pairs, P)
        norms = np.linalg.norm(samples, axis=-1)[corr.visible]
        mean_norm = norms.mean()
        if mean_norm <= 0:
            out.append(0.0 if diffs[both].max() == 0 else math.inf)
        else:
            out.append(float(diffs[both].mean() / mean_norm))
    return np.array(out)


def cross_view_consistency(queries: QuerySet, scene: SyntheticScene, cameras: Sequence[Camera],
                           samples: int = 256, seed: int = 0) -> np.ndarray:
    return consistency_from(queries, correspondences(scene, cameras, samples, seed), cameras)


def depth_rmse(field: FeatureField, supervision: DepthSupervision, cameras: Sequence[Camera],
               n_samples: int, resolution: int | None = None) -> float:
    """RMSE of the field's expected depth against supervised oracle depth at one map resolution."""
    res = resolution or max(supervision.depth)
    mask, target = supervision.mask[res], supervision.depth[res]
    if not mask.any():
        raise EvaluationError("depth supervision mask is empty")
    sq = []
    for v, cam in enumerate(cameras):
        if not mask[v].any():
            continue
        _, d, _ = render_map(field_source(field, 0), cam, res, n_samples)
        sq.append(((d - target[v]) ** 2)[mask[v]])
    return float(np.sqrt(np.concatenate(sq).mean()))


def feature_psnr(rendered, reference) -> float:
    """10 log10(peak^2 / MSE) with peak = max |reference|; +inf for identical inputs."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise DomainError(f"shape mismatch {rendered.shape} vs {reference.shape}")
    mse = np.mean((rendered - reference) ** 2)
    if mse == 0:
        return math.inf
    peak = np.abs(reference).max()
    return float(10 * np.log10(peak ** 2 / mse))


def queryset_psnr(rendered: QuerySet, reference: QuerySet) -> float:
    """Mean over views and layers of per-map PSNR."""
    vals = [feature_psnr(r[v], q[v]) for r, q in zip(rendered.maps, reference.maps)
            for v in range(q.shape[0])]
    return float(np.mean(vals))


# --------------------------------------------------------------------------- report


@dataclass
class ConsistencyReport:
    rows: list[dict]
    consistency: np.ndarray  # final per-layer
    depth_rmse: float
    feature_psnr: float
    series: list[float] = dc_field(default_factory=list)  # mean-over-layers per extraction

    @property
    def mean_consistency(self) -> float:
        return float(np.mean(self.consistency))


def to_gray(map_: np.ndarray, gain: float = PGM_GAIN) -> np.ndarray:
    """First three channels side by side, mapped linearly as 128 + gain * value, clipped."""
    chans = [map_[..., c] for c in range(min(3, map_.shape[-1]))]
    tile = np.concatenate(chans, axis=1)
    return np.clip(np.round(128.0 + gain * tile), 0, 255).astype(np.uint8)


def write_pgm(path: Path, img: np.ndarray):
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _fmt(x: float) -> str:
    return repr(float(x))


def build_report(artifacts, seed: int | None = None) -> ConsistencyReport:
    """Metric rows for every trained interval plus the final queries."""
    sc = artifacts.scenario
    cfg = sc.cfg
    seed = cfg.seeds.sampling if seed is None else seed
    corr = correspondences(sc.edited, sc.cameras, cfg.sampling.metric_points, seed)
    n_layers = len(cfg.layers)
    rows = []
    series = []
    by_t = {a.timestep: a for a in artifacts.intervals}
    for k, q in enumerate(artifacts.extracted):
        cons = consistency_from(q, corr, sc.cameras)
        series.append(float(cons.mean()))
        art = by_t.get(q.timestep)
        if art is not None:
            dr = depth_rmse(art.field, sc.supervision, sc.cameras, cfg.sampling.n_samples)
            ps = queryset_psnr(art.renders, art.queries)
        else:
            dr = ps = math.nan
        rows.append({"interval_index": k + 1, "timestep": q.timestep,
                     **{f"consistency_layer_{l.layer_id}": c for l, c in zip(cfg.layers, cons)},
                     "depth_rmse": dr, "feature_psnr": ps})
    final = consistency_from(artifacts.final_queries, corr, sc.cameras)
    if artifacts.intervals:
        last = artifacts.intervals[-1]
        dr = depth_rmse(last.field, sc.supervision, sc.cameras, cfg.sampling.n_samples)
        ps = queryset_psnr(last.renders, artifacts.final_queries)
    else:
        dr = ps = math.nan
    rows.append({"interval_index": "final", "timestep": 0,
                 **{f"consistency_layer_{l.layer_id}": c for l, c in zip(cfg.layers, final)},
                 "depth_rmse": dr, "feature_psnr": ps})
    assert len(rows) == len(artifacts.extracted) + 1 and n_layers == len(final)
    return ConsistencyReport(rows, final, dr, ps, series)


def report_csv(report: ConsistencyReport) -> str:
    buf = io.StringIO()
    fields = list(report.rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in report.rows:
        w.writerow({k: (_fmt(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return buf.getvalue()


def write_report(artifacts, path: str | Path, figures: bool = True) -> ConsistencyReport:
    """Write ``metrics.csv``, per-view/per-layer PGM images and summary figures under ``path``."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        report = build_report(artifacts)
        (path / "metrics.csv").write_text(report_csv(report))
        img_dir = path / "images"
        img_dir.mkdir(exist_ok=True)
        for li, (spec, m) in enumerate(zip(artifacts.scenario.cfg.layers, artifacts.final_queries.maps)):
            for v in range(m.shape[0]):
                write_pgm(img_dir / f"view{v}_layer{spec.layer_id}.pgm", to_gray(m[v]))
        if figures:
            from .plotting import plot_query_grid, plot_series
            plot_series(report, path / "consistency.png")
            plot_query_grid(artifacts.final_queries, path / "queries.png")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return report
