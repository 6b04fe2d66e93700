"""Run configuration and binary persistence.

Configuration is a JSON document validated against a strict schema. The
``profile`` key selects a default set: ``"paper"`` carries the published
hyperparameters (alpha 60, 50 denoising steps, 10,000 field steps, depth
weight 1, key/value injection from step 4 at resolutions 32 and 64, nine query
layers), ``"desk"`` shrinks everything to laptop scale. Keys given in the
document override the profile defaults; lists replace defaults wholesale.

Binary formats are little-endian:

checkpoint (``QNRF``)
    magic, u32 version, u32 layer count, per layer (u32 resolution,
    u32 channels), u32 frequencies, u32 width, u32 depth, then every field
    parameter as f32 in :class:`~qconsol.qfield.FeatureField` layout order.

query dump (``QDMP``)
    magic, u32 version, u32 view count, i32 timestep, u32 layer count,
    per layer (u32 resolution, u32 channels), then f32 values ordered by
    view, layer, row, column, channel.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .errors import ConfigError, FormatError
from .qfield import FeatureField, LayerSpec, QuerySet

CHECKPOINT_MAGIC = b"QNRF"
CHECKPOINT_VERSION = 1
QUERY_MAGIC = b"QDMP"
QUERY_VERSION = 1

MODES = ("full", "unguided_baseline", "direct_injection", "non_progressive")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class PrimitiveConfig(_Strict):
    kind: Literal["sphere", "box"]
    center: list[float]
    radius: float | None = None
    half_extents: list[float] | None = None
    rotation_deg: list[float] = [0.0, 0.0, 0.0]
    density: float = 10.0
    softness: float = 0.06
    backdrop: bool = False

    @model_validator(mode="after")
    def _shape(self):
        if len(self.center) != 3 or len(self.rotation_deg) != 3:
            raise ValueError("center and rotation_deg need 3 entries")
        if self.kind == "sphere" and (self.radius is None or self.half_extents is not None):
            raise ValueError("a sphere takes radius and no half_extents")
        if self.kind == "box" and (self.half_extents is None or len(self.half_extents) != 3
                                   or self.radius is not None):
            raise ValueError("a box takes 3 half_extents and no radius")
        return self


class SceneConfig(_Strict):
    primitives: list[PrimitiveConfig]
    feature_frequency: float = 1.5


class TransformConfig(_Strict):
    rotation_deg: list[float] = [0.0, 0.0, 0.0]
    translation: list[float] = [0.0, 0.0, 0.0]


class EditConfig(_Strict):
    transforms: list[TransformConfig]


class CameraConfig(_Strict):
    count: int
    radius: float
    elevation_deg: float
    size: int
    fov_deg: float
    t_near: float
    t_far: float
    heldout_azimuth_deg: float = 22.5
    heldout_elevation_deg: float = 38.0


class LayerConfig(_Strict):
    layer_id: int
    resolution: int
    channels: int


class LatentConfig(_Strict):
    resolution: int
    channels: int
    scale: float = 0.5
    perturbation_smoothing: float = 1.0  # Gaussian sigma of the per-view perturbation, latent pixels


class GeneratorConfig(_Strict):
    width: int = 32
    control_weight: float = 0.3
    time_weight: float = 0.1
    attention_gain: float = 0.5
    query_gain: float = 1.0
    feedback_power: float = 8.0


class KVConfig(_Strict):
    start_step: int
    resolutions: list[int]


class QNeRFConfig(_Strict):
    steps: int
    warm_steps: int | None = None  # steps for warm-started trainings; None = steps
    batch: int = 256
    learning_rate: float = 5e-3
    depth_coefficient: float = 1.0
    frequencies: int = 6
    width: int = 64
    depth: int = 3
    norm: Literal["l2sq", "l1"] = "l2sq"


class SamplingConfig(_Strict):
    n_samples: int = 32
    metric_points: int = 256


class SeedConfig(_Strict):
    scene: int = 0
    generator: int = 1
    training: int = 2
    sampling: int = 3

    def summary(self) -> str:
        return (f"seeds: scene={self.scene} generator={self.generator} "
                f"training={self.training} sampling={self.sampling}")


class RunConfig(_Strict):
    profile: Literal["paper", "desk"]
    scene: SceneConfig
    edit: EditConfig
    cameras: CameraConfig
    layers: list[LayerConfig]
    latent: LatentConfig
    T: int
    tau: int
    alpha: float
    eta: float
    amplitude: float
    generator: GeneratorConfig
    kv_injection: KVConfig
    qnerf: QNeRFConfig
    sampling: SamplingConfig
    seeds: SeedConfig
    mode: Literal["full", "unguided_baseline", "direct_injection", "non_progressive"] = "full"
    output: str = "runs/default"

    @model_validator(mode="after")
    def _invariants(self):
        checks = [
            (self.tau >= 1, "tau", "tau must be >= 1"),
            (2 * self.tau <= self.T, "tau", "2τ ≤ T violated"),
            (self.T >= 2, "T", "T must be >= 2"),
            (self.alpha >= 0, "alpha", "alpha must be >= 0"),
            (self.eta >= 0, "eta", "eta must be >= 0"),
            (0 <= self.amplitude <= 1, "amplitude", "amplitude must lie in [0, 1]"),
            (self.cameras.count >= 2, "cameras.count", "need at least 2 views"),
            (0 < self.cameras.t_near < self.cameras.t_far, "cameras.t_near",
             "need 0 < t_near < t_far"),
            (self.cameras.size >= 1 and self.cameras.fov_deg > 0, "cameras.size",
             "size and fov must be positive"),
            (len(self.edit.transforms) == len(self.scene.primitives), "edit.transforms",
             "one transform per primitive required"),
            (self.qnerf.steps >= 1, "qnerf.steps", "steps must be >= 1"),
            (self.qnerf.warm_steps is None or self.qnerf.warm_steps >= 1, "qnerf.warm_steps",
             "warm_steps must be >= 1"),
            (self.qnerf.batch >= len(self.layers), "qnerf.batch",
             "batch must hold at least one ray per layer"),
            (self.qnerf.learning_rate > 0, "qnerf.learning_rate", "learning rate must be > 0"),
            (self.qnerf.depth_coefficient >= 0, "qnerf.depth_coefficient",
             "depth coefficient must be >= 0"),
            (self.sampling.n_samples >= 2, "sampling.n_samples", "need >= 2 samples per ray"),
            (self.sampling.metric_points >= 1, "sampling.metric_points", "need >= 1 point"),
            (self.kv_injection.start_step >= 1, "kv_injection.start_step", "start_step >= 1"),
            (self.latent.resolution >= 1 and self.latent.channels >= 1, "latent",
             "latent dimensions must be positive"),
            (self.latent.perturbation_smoothing >= 0, "latent.perturbation_smoothing",
             "smoothing must be >= 0"),
            (self.generator.width >= self.latent.channels, "generator.width",
             "generator width must be >= latent channels"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)
        ids = [l.layer_id for l in self.layers]
        if not self.layers or len(set(ids)) != len(ids):
            raise ConfigError("layers must be non-empty with unique ids", key="layers")
        res = [l.resolution for l in self.layers]
        if res != sorted(res):
            raise ConfigError("layers must be ordered coarse to fine", key="layers")
        for l in self.layers:
            if l.resolution < 2 or l.channels < 1:
                raise ConfigError("resolution >= 2 and channels >= 1 required", key="layers")
            r0 = self.latent.resolution
            if l.resolution % r0 and r0 % l.resolution:
                raise ConfigError(f"layer resolution {l.resolution} incompatible with latent "
                                  f"resolution {r0}", key="layers")
        unknown = set(self.kv_injection.resolutions) - set(res)
        if unknown:
            raise ConfigError(f"no layers at resolutions {sorted(unknown)}",
                              key="kv_injection.resolutions")
        return self

    # convenience views ------------------------------------------------------

    def layer_specs(self) -> list[LayerSpec]:
        return [LayerSpec(l.layer_id, l.resolution, l.channels) for l in self.layers]

    def kv_layer_indices(self) -> tuple[int, ...]:
        wanted = set(self.kv_injection.resolutions)
        return tuple(i for i, l in enumerate(self.layers) if l.resolution in wanted)


_SCENE = {
    "primitives": [
        {"kind": "box", "center": [0.0, 0.0, -0.7], "half_extents": [1.6, 1.6, 0.2],
         "density": 10.0, "softness": 0.08, "backdrop": True},
        {"kind": "box", "center": [0.0, 0.0, -0.1], "half_extents": [0.35, 0.25, 0.4],
         "density": 10.0, "softness": 0.06},
        {"kind": "sphere", "center": [0.0, 0.0, 0.55], "radius": 0.3,
         "density": 10.0, "softness": 0.06},
    ],
    "feature_frequency": 1.5,
}
_EDIT = {"transforms": [
    {},
    {"rotation_deg": [0.0, 0.0, 35.0]},
    {"translation": [0.3, 0.15, -0.05]},
]}
_CAMERAS = {"count": 8, "radius": 3.2, "elevation_deg": 30.0, "size": 64, "fov_deg": 40.0,
            "t_near": 1.5, "t_far": 5.5}

DESK_DEFAULTS: dict[str, Any] = {
    "profile": "desk",
    "scene": _SCENE,
    "edit": _EDIT,
    "cameras": _CAMERAS,
    "layers": [{"layer_id": 0, "resolution": 8, "channels": 16},
               {"layer_id": 1, "resolution": 16, "channels": 12},
               {"layer_id": 2, "resolution": 32, "channels": 8}],
    "latent": {"resolution": 8, "channels": 8, "scale": 0.5},
    "T": 20,
    "tau": 4,
    "alpha": 0.02,
    "eta": 0.3,
    "amplitude": 0.9,
    "generator": {},
    "kv_injection": {"start_step": 4, "resolutions": [16, 32]},
    "qnerf": {"steps": 2000, "warm_steps": 50, "batch": 256, "learning_rate": 5e-3,
              "depth_coefficient": 1.0},
    "sampling": {"n_samples": 32, "metric_points": 256},
    "seeds": {},
    "mode": "full",
    "output": "runs/desk",
}

PAPER_DEFAULTS: dict[str, Any] = {
    **DESK_DEFAULTS,
    "profile": "paper",
    "layers": ([{"layer_id": i, "resolution": 16, "channels": 1280} for i in range(3)]
               + [{"layer_id": 3 + i, "resolution": 32, "channels": 640} for i in range(3)]
               + [{"layer_id": 6 + i, "resolution": 64, "channels": 320} for i in range(3)]),
    "latent": {"resolution": 64, "channels": 4, "scale": 0.5},
    "T": 50,
    "tau": 5,
    "alpha": 60.0,
    "kv_injection": {"start_step": 4, "resolutions": [32, 64]},
    "qnerf": {"steps": 10000, "batch": 4096, "learning_rate": 5e-3, "depth_coefficient": 1.0},
    "cameras": {**_CAMERAS, "size": 512},
    "output": "runs/paper",
}


def _merge(base: dict, doc: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(text: str | dict) -> RunConfig:
    """Parse and validate a JSON configuration document."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    profile = doc.get("profile", "paper")
    if profile not in ("paper", "desk"):
        raise ConfigError(f"unknown profile {profile!r}", key="profile")
    merged = _merge(PAPER_DEFAULTS if profile == "paper" else DESK_DEFAULTS, doc)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or None
        cause = err.get("ctx", {}).get("error")
        if isinstance(cause, ConfigError):
            raise cause from None
        raise ConfigError(err["msg"], key=key) from None


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    return parse_config(apply_overrides(doc, overrides or []))


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON, else kept as strings."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("override descends into a non-object", key=key)
        node[parts[-1]] = value
    return doc


# --------------------------------------------------------------------------- checkpoints


def _read_exact(buf: memoryview, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return bytes(buf[offset:offset + n]), offset + n


def save_checkpoint(field: FeatureField, path: str | Path):
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<II", CHECKPOINT_VERSION, len(field.layers))
    for spec in field.layers:
        header += struct.pack("<II", spec.resolution, spec.channels)
    header += struct.pack("<III", field.frequencies, field.width, field.depth)
    body = field.flat_parameters().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(header) + body)


def load_checkpoint(path: str | Path) -> FeatureField:
    buf = memoryview(Path(path).read_bytes())
    magic, off = _read_exact(buf, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    raw, off = _read_exact(buf, off, 8, "header")
    version, n_layers = struct.unpack("<II", raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version: found {version}, "
                          f"expected {CHECKPOINT_VERSION}")
    specs = []
    for i in range(n_layers):
        raw, off = _read_exact(buf, off, 8, "layer table")
        res, ch = struct.unpack("<II", raw)
        specs.append(LayerSpec(i, res, ch))
    raw, off = _read_exact(buf, off, 12, "trunk header")
    k, w, d = struct.unpack("<III", raw)
    field = FeatureField(specs, frequencies=k, width=w, depth=d, dtype=torch.float32)
    n_params = sum(p.numel() for p in field.parameters())
    if len(buf) - off != 4 * n_params:
        raise FormatError(f"checkpoint body holds {(len(buf) - off) // 4} values, "
                          f"expected {n_params}")
    field.load_flat(np.frombuffer(buf[off:], dtype="<f4").astype(np.float32))
    return field


# --------------------------------------------------------------------------- query dumps


def dump_queries(qs: QuerySet, path: str | Path):
    header = bytearray(QUERY_MAGIC)
    header += struct.pack("<IIiI", QUERY_VERSION, qs.n_views, qs.timestep, len(qs.maps))
    for res, ch in qs.layer_table():
        header += struct.pack("<II", res, ch)
    parts = [bytes(header)]
    for v in range(qs.n_views):
        for m in qs.maps:
            parts.append(np.ascontiguousarray(m[v], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_queries(path: str | Path, expected_layers: list[tuple[int, int]] | None = None) -> QuerySet:
    """Read a query dump; ``expected_layers`` is the (resolution, channels) table to enforce."""
    buf = memoryview(Path(path).read_bytes())
    magic, off = _read_exact(buf, 0, 4, "magic")
    if magic != QUERY_MAGIC:
        raise FormatError(f"bad query dump magic {magic!r}")
    raw, off = _read_exact(buf, off, 16, "header")
    version, n_views, timestep, n_layers = struct.unpack("<IIiI", raw)
    if version != QUERY_VERSION:
        raise FormatError(f"unsupported query dump version: found {version}, "
                          f"expected {QUERY_VERSION}")
    table = []
    for _ in range(n_layers):
        raw, off = _read_exact(buf, off, 8, "layer table")
        table.append(struct.unpack("<II", raw))
    if expected_layers is not None and [tuple(t) for t in expected_layers] != table:
        raise FormatError(f"layer table {table} does not match configuration {list(expected_layers)}")
    per_view = sum(r * r * c for r, c in table)
    if len(buf) - off != 4 * per_view * n_views:
        raise FormatError("query dump body length does not match header")
    flat = np.frombuffer(buf[off:], dtype="<f4").astype(np.float32)
    maps = [np.empty((n_views, r, r, c), dtype=np.float32) for r, c in table]
    pos = 0
    for v in range(n_views):
        for m, (r, c) in zip(maps, table):
            n = r * r * c
            m[v] = flat[pos:pos + n].reshape(r, r, c)
            pos += n
    return QuerySet(timestep, maps)
