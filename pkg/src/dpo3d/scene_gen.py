"""Synthetic labelled BEV scenes and parameterised domain shifts.

Each object is rendered as an oriented anisotropic flat-topped Gaussian bump
(order-4 exponent). The bump gates a per-cell feature vector whose channels
carry the object amplitude, the offset to the object centre, its log
footprint size, its doubled-angle orientation and a per-object random
signature: roughly what a trained BEV backbone exposes to a dense head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geom3d import Box3D

NOMINAL_LENGTH = 4.0
NOMINAL_WIDTH = 1.8
# amplitude, centre offset (2), log footprint (2), doubled-angle yaw (2), signature
N_LATENT = 8


@dataclass(frozen=True)
class GenConfig:
    height: int = 64
    width: int = 64
    channels: int = 8
    cell_size: float = 1.0
    min_objects: int = 1
    max_objects: int = 10
    length_range: tuple = (3.0, 6.0)
    width_range: tuple = (1.5, 2.6)
    height_ratio: float = 0.4
    yaw_range: tuple = (-math.pi / 4, math.pi / 4)
    amplitude_range: tuple = (0.8, 1.2)
    bump_spread: float = 1.0
    margin: float = 4.0
    min_center_gap: float = 6.0
    clutter_sigma: float = 0.02
    mix_seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("grid dimensions must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        for name in ("length_range", "width_range", "amplitude_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) pair")

    @property
    def extent(self) -> tuple[float, float]:
        """(x extent, y extent) in meters."""
        return self.width * self.cell_size, self.height * self.cell_size


@dataclass(frozen=True)
class ShiftSpec:
    scale_factor: float = 1.0
    noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    blur_width: int = 0
    intensity_offset: float = 0.0

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if int(self.blur_width) != self.blur_width or self.blur_width < 0:
            raise ValueError("blur_width must be a non-negative integer")
        if not math.isfinite(self.intensity_offset):
            raise ValueError("intensity_offset must be finite")

    @property
    def is_identity(self) -> bool:
        return (self.scale_factor == 1.0 and self.noise_sigma == 0 and self.dropout_prob == 0
                and self.blur_width == 0 and self.intensity_offset == 0)


IDENTITY_SHIFT = ShiftSpec()

# severity conventions for the synthetic corruptions
SHIFT_PRESETS = {
    "none": ShiftSpec(),
    "scale": ShiftSpec(scale_factor=1.3),
    "noise-light": ShiftSpec(noise_sigma=0.03),
    "noise-heavy": ShiftSpec(noise_sigma=0.1),
    "dropout-light": ShiftSpec(dropout_prob=0.05),
    "dropout-heavy": ShiftSpec(dropout_prob=0.2),
    "blur": ShiftSpec(blur_width=1),
    "wet": ShiftSpec(intensity_offset=0.1),
    "composite-heavy": ShiftSpec(scale_factor=1.3, noise_sigma=0.1, dropout_prob=0.1),
}


@dataclass(frozen=True)
class BEVFeature:
    values: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("BEV values must be H x W x C")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("BEV values must be finite")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    amplitude: float
    signature: float


@dataclass(frozen=True)
class Scene:
    gt_boxes: tuple
    bev: BEVFeature
    shift_applied: Optional[ShiftSpec]
    seed: int
    objects: tuple = field(default=(), repr=False)
    clutter_sigma: float = field(default=0.0, repr=False)


def _object_box(cfg: GenConfig, cx: float, cy: float, length: float, width: float,
                yaw: float) -> Box3D:
    dz = cfg.height_ratio * length
    return Box3D(cx, cy, 0.5 * dz, length, width, dz, yaw)


def _sample_objects(rng: np.random.Generator, cfg: GenConfig) -> list[SceneObject]:
    ex, ey = cfg.extent
    if ex - 2 * cfg.margin <= 0 or ey - 2 * cfg.margin <= 0:
        raise ValueError("placement region is empty: margin too large for the grid extent")
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objs: list[SceneObject] = []
    centers: list[tuple[float, float]] = []
    attempts = 0
    while len(objs) < n:
        attempts += 1
        if attempts > 200 * n:
            if objs:
                break
            raise ValueError("could not place any object in the placement region")
        cx = float(rng.uniform(cfg.margin, ex - cfg.margin))
        cy = float(rng.uniform(cfg.margin, ey - cfg.margin))
        length = float(rng.uniform(*cfg.length_range))
        width = float(rng.uniform(*cfg.width_range))
        yaw = float(rng.uniform(*cfg.yaw_range))
        amp = float(rng.uniform(*cfg.amplitude_range))
        sig = float(rng.uniform(-1.0, 1.0))
        if any(math.hypot(cx - px, cy - py) < cfg.min_center_gap for px, py in centers):
            continue
        centers.append((cx, cy))
        objs.append(SceneObject(_object_box(cfg, cx, cy, length, width, yaw), amp, sig))
    return objs


def mixing_matrix(channels: int, seed: int = 0) -> np.ndarray:
    """Fixed C x 8 map from the latent object channels to feature channels.

    Orthonormal columns scaled by sqrt(C / 8), so the mean energy per channel
    matches the unmixed layout. With C > 8 the clean features span only an
    8-dimensional subspace and the remaining directions carry pure noise.
    """
    rng = np.random.default_rng([int(seed), 0x313])
    q, r = np.linalg.qr(rng.standard_normal((max(channels, N_LATENT), N_LATENT)))
    q = q * np.sign(np.diag(r))
    return q[:channels] * math.sqrt(channels / N_LATENT)


def render(objects, cfg: GenConfig) -> np.ndarray:
    """Render objects into an H x W x C float64 grid (no clutter)."""
    H, W, C = cfg.height, cfg.width, cfg.channels
    cs = cfg.cell_size
    latent = np.zeros((H, W, N_LATENT))
    xs = (np.arange(W) + 0.5) * cs
    ys = (np.arange(H) + 0.5) * cs
    for obj in objects:
        b = obj.box
        su = cfg.bump_spread * 0.5 * b.dx
        sv = cfg.bump_spread * 0.5 * b.dy
        reach = 3.0 * max(su, sv)
        j0 = max(0, int(math.floor((b.cx - reach) / cs)))
        j1 = min(W, int(math.ceil((b.cx + reach) / cs)) + 1)
        i0 = max(0, int(math.floor((b.cy - reach) / cs)))
        i1 = min(H, int(math.ceil((b.cy + reach) / cs)) + 1)
        if j0 >= j1 or i0 >= i1:
            continue
        gx, gy = np.meshgrid(xs[j0:j1], ys[i0:i1])
        ox = b.cx - gx
        oy = b.cy - gy
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        u = -ox * c - oy * s
        v = ox * s - oy * c
        q = (u / su) ** 2 + (v / sv) ** 2
        # flat-topped (order-4) Gaussian gate; amplitude scales only channel 0
        w = np.exp(-0.5 * q * q)
        feats = (
            np.full_like(w, obj.amplitude),
            ox / cs,
            oy / cs,
            np.full_like(w, math.log(b.dx / NOMINAL_LENGTH)),
            np.full_like(w, math.log(b.dy / NOMINAL_WIDTH)),
            np.full_like(w, math.sin(2.0 * b.yaw)),
            np.full_like(w, math.cos(2.0 * b.yaw)),
            np.full_like(w, obj.signature),
        )
        latent[i0:i1, j0:j1] += w[..., None] * np.stack(feats, axis=-1)
    if C == N_LATENT:
        return latent
    return latent @ mixing_matrix(C, cfg.mix_seed).T


def _finish(values: np.ndarray, cell_size: float) -> BEVFeature:
    # features are stored as float32 so files round-trip bitwise
    return BEVFeature(values.astype(np.float32), cell_size)


def generate_scene(seed: int, cfg: GenConfig = GenConfig()) -> Scene:
    """Sample and render one labelled source scene, deterministic in ``seed``."""
    rng = np.random.default_rng([int(seed), 0x5CE9E])
    objects = _sample_objects(rng, cfg)
    values = render(objects, cfg)
    if cfg.clutter_sigma > 0:
        values = values + rng.normal(0.0, cfg.clutter_sigma, size=values.shape)
    return Scene(
        gt_boxes=tuple(o.box for o in objects),
        bev=_finish(values, cfg.cell_size),
        shift_applied=None,
        seed=int(seed),
        objects=tuple(objects),
        clutter_sigma=cfg.clutter_sigma,
    )


def generate_dataset(n: int, seed: int, cfg: GenConfig = GenConfig()) -> list[Scene]:
    return [generate_scene(int(s), cfg) for s in np.random.default_rng(seed).integers(0, 2**31, n)]


def box_blur(values: np.ndarray, half_width: int) -> np.ndarray:
    """Spatial mean filter over a (2k+1)^2 window with edge replication."""
    if half_width == 0:
        return values
    k = int(half_width)
    padded = np.pad(values, ((k, k), (k, k), (0, 0)), mode="edge")
    csum = padded.cumsum(axis=0).cumsum(axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0), (0, 0)))
    H, W = values.shape[:2]
    n = 2 * k + 1
    total = csum[n:n + H, n:n + W] - csum[:H, n:n + W] - csum[n:n + H, :W] + csum[:H, :W]
    return total / (n * n)


def _ground_scaled(box: Box3D, factor: float) -> Box3D:
    # dims scale exactly; the box stays on the ground plane
    b = box.scaled(factor)
    return replace(b, cz=box.cz - 0.5 * box.dz + 0.5 * b.dz)


def apply_shift(scene: Scene, spec: ShiftSpec, seed: int, cfg: GenConfig = GenConfig()) -> Scene:
    """Scale objects, re-render, then corrupt: noise, dropout, blur, offset."""
    if scene.shift_applied is not None:
        raise ValueError("shift already applied to this scene")
    if not scene.objects:
        raise ValueError("scene carries no renderable objects")
    rng = np.random.default_rng([int(seed), 0x5A1F7])
    objects = tuple(replace(o, box=_ground_scaled(o.box, spec.scale_factor)) for o in scene.objects)
    values = render(objects, cfg)
    if scene.clutter_sigma > 0:
        # clutter is part of the scene, not of the shift: replay the source draw
        clutter_rng = np.random.default_rng([int(scene.seed), 0x5CE9E])
        _sample_objects(clutter_rng, cfg)
        values = values + clutter_rng.normal(0.0, scene.clutter_sigma, size=values.shape)
    if spec.noise_sigma > 0:
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)
    if spec.dropout_prob > 0:
        values = np.where(rng.random(values.shape) < spec.dropout_prob, 0.0, values)
    values = box_blur(values, spec.blur_width)
    if spec.intensity_offset != 0:
        values = values + spec.intensity_offset
    return Scene(
        gt_boxes=tuple(o.box for o in objects),
        bev=_finish(values, cfg.cell_size),
        shift_applied=spec,
        seed=scene.seed,
        objects=objects,
        clutter_sigma=scene.clutter_sigma,
    )


def make_stream(n_batches: int, batch_size: int, spec: ShiftSpec, seed: int,
                cfg: GenConfig = GenConfig()) -> list[list[Scene]]:
    """Ordered test stream of shifted scene batches."""
    if n_batches < 1 or batch_size < 1:
        raise ValueError("n_batches and batch_size must be >= 1")
    rng = np.random.default_rng([int(seed), 0x57AE])
    seeds = rng.integers(0, 2**31, size=(n_batches, batch_size, 2))
    return [[apply_shift(generate_scene(int(s[0]), cfg), spec, int(s[1]), cfg) for s in row]
            for row in seeds]
