"""Cameras, rays, and analytic editable scenes.

Conventions: world space is right-handed with +z up. A camera looks along +z
of its own frame, x points right and y points down in pixel space, so the
columns of ``Camera.rotation`` are the world directions of (right, down,
forward).

Scenes are sums of soft solids. Each solid carries its own random-Fourier
feature functions evaluated in the solid's local frame, so a rigid edit moves
surface features together with the geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DomainError

_ORTHO_TOL = 1e-9


def rotation_matrix(euler_deg: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Extrinsic xyz Euler angles in degrees to a 3x3 rotation matrix."""
    return Rotation.from_euler("xyz", np.asarray(euler_deg, dtype=float), degrees=True).as_matrix()


def _check_rotation(r: np.ndarray, what: str) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise DomainError(f"{what} must be 3x3, got {r.shape}")
    if np.linalg.norm(r.T @ r - np.eye(3)) >= _ORTHO_TOL or np.linalg.det(r) <= 0:
        raise DomainError(f"{what} is not a proper rotation")
    return r


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise DomainError("ray direction must have unit norm")
        if not self.t_near < self.t_far:
            raise DomainError("ray bounds require t_near < t_far")

    def at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True, eq=False)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "camera rotation"))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if not 0 < self.t_near < self.t_far:
            raise DomainError("camera bounds require 0 < t_near < t_far")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be positive")

    @classmethod
    def look_at(cls, eye, target, *, size: int, fov_deg: float, t_near: float, t_far: float,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            raise DomainError("look_at: view direction parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        focal = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
        return cls(size, size, focal, focal, size / 2, size / 2,
                   np.stack([right, down, forward], axis=1), eye, t_near, t_far)

    def project(self, points: np.ndarray):
        """World points (..., 3) to pixel coordinates (..., 2) and camera-space depth (...)."""
        local = (np.asarray(points, dtype=float) - self.translation) @ self.rotation
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * local[..., 0] / z + self.cx
            py = self.fy * local[..., 1] / z + self.cy
        return np.stack([px, py], axis=-1), z


def ray_for_pixel(camera: Camera, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise DomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = camera.rotation @ np.array([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0])
    return Ray(camera.translation.copy(), d / np.linalg.norm(d), camera.t_near, camera.t_far)


def pixel_grid(camera: Camera, resolution: int) -> np.ndarray:
    """Pixel-center coordinates (res, res, 2) of a res x res grid spanning the image."""
    if resolution < 1:
        raise DomainError("resolution must be >= 1")
    xs = (np.arange(resolution) + 0.5) * camera.width / resolution
    ys = (np.arange(resolution) + 0.5) * camera.height / resolution
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx, gy], axis=-1)


def camera_rays(camera: Camera, resolution: int):
    """Origins and unit directions, each (res, res, 3), for a res x res pixel grid.

    Row index is image y, column index is image x.
    """
    pix = pixel_grid(camera, resolution)
    local = np.stack([(pix[..., 0] - camera.cx) / camera.fx,
                      (pix[..., 1] - camera.cy) / camera.fy,
                      np.ones(pix.shape[:2])], axis=-1)
    dirs = local @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    return origins, dirs


def camera_ring(count: int, radius: float, elevation_deg: float, *, size: int, fov_deg: float,
                t_near: float, t_far: float, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a circle, all looking at ``target``."""
    el = np.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = 2 * np.pi * k / count
        eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az),
                                                      np.cos(el) * np.sin(az),
                                                      np.sin(el)])
        cams.append(Camera.look_at(eye, target, size=size, fov_deg=fov_deg,
                                   t_near=t_near, t_far=t_far))
    return cams


# --------------------------------------------------------------------------- scenes


def smoothstep_occupancy(sd: np.ndarray, softness: float) -> np.ndarray:
    """1 inside (sd <= -softness), 0 outside (sd >= softness), C1 cubic between."""
    u = np.clip((softness - sd) / (2 * softness), 0.0, 1.0)
    return u * u * (3 - 2 * u)


@dataclass(frozen=True, eq=False)
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # radius (shape (1,)) or half extents (shape (3,))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    density: float = 10.0
    softness: float = 0.05
    backdrop: bool = False  # static scenery, excluded from object silhouettes

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ConfigError(f"unknown primitive kind {self.kind!r}", key="scene.primitives.kind")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        size = np.atleast_1d(np.asarray(self.size, dtype=float))
        if size.shape != ((1,) if self.kind == "sphere" else (3,)) or np.any(size <= 0):
            raise ConfigError(f"bad size for {self.kind}: {size}", key="scene.primitives.size")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "primitive rotation"))
        if self.density < 0:
            raise ConfigError("density amplitude must be >= 0", key="scene.primitives.density")
        if self.softness <= 0:
            raise ConfigError("softness must be > 0", key="scene.primitives.softness")

    def to_local(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) @ self.rotation

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        p = self.to_local(x)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.size[0]
        q = np.abs(p) - self.size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def occupancy(self, x: np.ndarray) -> np.ndarray:
        return smoothstep_occupancy(self.signed_distance(x), self.softness)


@dataclass(frozen=True)
class _FourierMap:
    frequencies: np.ndarray  # (C, 3)
    phases: np.ndarray  # (C,)

    def __call__(self, local: np.ndarray) -> np.ndarray:
        return np.cos(local @ self.frequencies.T + self.phases)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    primitives: tuple[Primitive, ...]
    channels: tuple[int, ...]
    feature_seed: int = 0
    feature_frequency: float = 1.5
    _maps: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if any(c < 1 for c in self.channels):
            raise ConfigError("layer channel counts must be >= 1", key="layers.channels")
        maps = []
        for p_idx in range(len(self.primitives)):
            per_layer = []
            for l_idx, c in enumerate(self.channels):
                rng = np.random.default_rng([self.feature_seed, p_idx, l_idx])
                per_layer.append(_FourierMap(rng.normal(0.0, self.feature_frequency, (c, 3)),
                                             rng.uniform(0.0, 2 * np.pi, c)))
            maps.append(tuple(per_layer))
        object.__setattr__(self, "_maps", tuple(maps))

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    def object_part(self) -> "SyntheticScene":
        keep = tuple(p for p in self.primitives if not p.backdrop)
        return SyntheticScene(keep, self.channels, self.feature_seed, self.feature_frequency)

    @property
    def max_density(self) -> float:
        return max((p.density for p in self.primitives), default=0.0)

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for p in self.primitives:
            out += p.density * p.occupancy(x)
        return out

    def features(self, x, layer: int) -> np.ndarray:
        """Occupancy-weighted blend of each solid's local-frame Fourier features."""
        if not 0 <= layer < self.n_layers:
            raise DomainError(f"layer {layer} out of range for {self.n_layers} layers")
        x = np.asarray(x, dtype=float)
        num = np.zeros(x.shape[:-1] + (self.channels[layer],))
        den = np.zeros(x.shape[:-1])
        for p, maps in zip(self.primitives, self._maps):
            occ = p.occupancy(x)
            num += occ[..., None] * maps[layer](p.to_local(x))
            den += occ
        return np.where(den[..., None] > 0, num / np.maximum(den, 1e-300)[..., None], 0.0)


def eval_scene(scene: SyntheticScene, x, layer: int):
    """Density and layer feature at points x (..., 3)."""
    return scene.density(x), scene.features(x, layer)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation about the primitive's own center, then translation."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "edit rotation"))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))


@dataclass(frozen=True)
class EditSpec:
    transforms: tuple[RigidTransform, ...]

    @classmethod
    def identity(cls, n: int) -> "EditSpec":
        return cls(tuple(RigidTransform() for _ in range(n)))


def apply_edit(scene: SyntheticScene, edit: EditSpec) -> SyntheticScene:
    if len(edit.transforms) != len(scene.primitives):
        raise ConfigError(f"edit has {len(edit.transforms)} transforms for "
                          f"{len(scene.primitives)} primitives", key="edit.transforms")
    moved = tuple(
        replace(p, center=p.center + tr.translation, rotation=tr.rotation @ p.rotation)
        for p, tr in zip(scene.primitives, edit.transforms)
    )
    return SyntheticScene(moved, scene.channels, scene.feature_seed, scene.feature_frequency)


def silhouette_mask(scene: SyntheticScene, camera: Camera, resolution: int, threshold: float = 0.5,
                    n_samples: int = 128) -> np.ndarray:
    """Pixels where the scene's non-backdrop solids render with opacity above ``threshold``."""
    from .volrender import render_map, scene_source

    if not 0 < threshold < 1:
        raise DomainError("threshold must lie in (0, 1)")
    _, _, opacity = render_map(scene_source(scene.object_part(), None), camera, resolution,
                               n_samples, rng=None)
    return opacity > threshold


def union_mask(scene_a: SyntheticScene, scene_b: SyntheticScene, camera: Camera, resolution: int,
               threshold: float = 0.5, n_samples: int = 128) -> np.ndarray:
    return (silhouette_mask(scene_a, camera, resolution, threshold, n_samples)
            | silhouette_mask(scene_b, camera, resolution, threshold, n_samples))
