"""Builds the user-facing light condition and the edge-conditioning image
from a source image: depth estimation, height-field lifting, irradiance
render, edge composition.

Depth and albedo estimation are pluggable backends; the built-in stubs are
deterministic and keep the test suite free of model downloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from .imgio import load_png, resize, to_gray
from .render.core import IrradianceMap, RenderConfig, ShapeMismatch, linear_to_display
from .render.heightfield import HeightField, render_heightfield_condition
from .scene import GGXMaterial, LightProbe


class ModelUnavailable(RuntimeError):
    pass


class EmptyMask(ValueError):
    pass


@dataclass
class DepthMap:
    values: np.ndarray  # HxW float
    valid_mask: np.ndarray  # HxW bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape:
            raise ShapeMismatch("depth/mask shapes differ")
        if self.valid_mask.any() and not np.isfinite(self.values[self.valid_mask]).all():
            raise ValueError("depth must be finite on the valid mask")


@dataclass
class EdgeConditionImage:
    pixels: np.ndarray  # HxW float in [0,1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("edge condition must lie in [0,1]")


# -- pluggable backends -----------------------------------------------------


def luminance_depth_stub(image: np.ndarray) -> DepthMap:
    """Deterministic test backend: smoothed luminance read as relative depth."""
    lum = to_gray(image)
    vals = ndimage.gaussian_filter(lum, sigma=2.0)
    return DepthMap(values=vals, valid_mask=np.ones_like(vals, dtype=bool))


def identity_albedo_stub(image: np.ndarray) -> np.ndarray:
    return image


DEPTH_BACKENDS = {"stub": luminance_depth_stub}
ALBEDO_BACKENDS = {"stub": identity_albedo_stub}


def estimate_depth(image: np.ndarray, backend: str = "stub") -> DepthMap:
    if image.size == 0:
        raise ValueError("empty image")
    fn = DEPTH_BACKENDS.get(backend)
    if fn is None:
        raise ModelUnavailable(f"no depth backend named {backend!r}")
    depth = fn(image)
    if depth.values.shape != image.shape[:2]:
        raise ShapeMismatch("depth backend returned wrong resolution")
    return depth


# -- height-field lifting ---------------------------------------------------


def lift_to_heightfield(
    depth: DepthMap,
    roughness: float = 0.5,
    depth_scale: float = 1.0,
    cell_size: float = 1.0,
    invert: bool = False,
) -> HeightField:
    """normalize(depth) * depth_scale; invalid pixels filled from nearest valid."""
    if not depth.valid_mask.any():
        raise EmptyMask("no valid depth pixels")
    vals = depth.values.copy()
    if not depth.valid_mask.all():
        idx = ndimage.distance_transform_edt(
            ~depth.valid_mask, return_distances=False, return_indices=True
        )
        vals = vals[tuple(idx)]
    lo, hi = vals.min(), vals.max()
    if hi - lo < 1e-12 or depth_scale == 0.0:
        grid = np.zeros_like(vals)
    else:
        grid = (vals - lo) / (hi - lo) * depth_scale
        if invert:
            grid = depth_scale - grid
    return HeightField(grid=grid, cell_size=cell_size, material=GGXMaterial(roughness=roughness))


def default_depth_scale(width: int, cell_size: float = 1.0) -> float:
    """Height range = 0.35 x image width in scene units (moderate relief)."""
    return 0.35 * width * cell_size


# -- condition + edge map ---------------------------------------------------


def build_condition(
    heightfield: HeightField,
    lights: list[LightProbe],
    cfg: RenderConfig | None = None,
    display: bool = True,
) -> IrradianceMap:
    """Grayscale direct-irradiance condition; display state by default."""
    linear = render_heightfield_condition(heightfield, lights, heightfield.material, cfg)
    if not display:
        return linear
    return IrradianceMap.wrap(linear_to_display(linear.pixels), state="display")


@dataclass
class EdgeConfig:
    sigma: float = 1.5
    low_threshold: float = 0.05
    high_threshold: float = 0.2


def _edges(gray: np.ndarray, cfg: EdgeConfig) -> np.ndarray:
    rng = np.ptp(gray)
    if rng < 1e-12:
        return np.zeros_like(gray)
    return canny(
        gray,
        sigma=cfg.sigma,
        low_threshold=cfg.low_threshold,
        high_threshold=cfg.high_threshold,
        use_quantiles=False,
    ).astype(np.float64)


def build_edge_condition(
    condition: IrradianceMap | np.ndarray,
    albedo_estimate: np.ndarray,
    cfg: EdgeConfig | None = None,
) -> EdgeConditionImage:
    """clamp(edges(condition) + edges(gray(albedo)), 0, 1)."""
    cfg = cfg or EdgeConfig()
    cond = condition.pixels if isinstance(condition, IrradianceMap) else np.asarray(condition)
    cond = to_gray(cond)
    albedo = resize(np.asarray(albedo_estimate, dtype=np.float64), cond.shape[:2])
    if albedo.shape[:2] != cond.shape[:2]:
        raise ShapeMismatch("albedo resample failed")
    combined = _edges(cond, cfg) + _edges(to_gray(albedo), cfg)
    return EdgeConditionImage(pixels=np.clip(combined, 0.0, 1.0))


# -- light spec JSON --------------------------------------------------------


@dataclass
class LightSpecFile:
    lights: list[LightProbe]
    roughness: float = 0.5
    depth_scale: float | None = None

    @classmethod
    def parse(cls, d: dict, base_dir=None) -> "LightSpecFile":
        lights = []
        for l in d.get("lights", []):
            kind = l.get("kind", "point")
            if kind == "point":
                lights.append(
                    LightProbe(kind="point", position=tuple(l["position"]), intensity=float(l.get("intensity", 1.0)))
                )
            elif kind in ("env", "environment"):
                img = None
                if "image" in l:
                    path = Path(l["image"])
                    if base_dir is not None and not path.is_absolute():
                        path = Path(base_dir) / path
                    img = to_gray(load_png(path))
                lights.append(LightProbe(kind="environment", intensity=float(l.get("intensity", 1.0)), env_image=img))
            else:
                raise ValueError(f"unknown light kind {kind!r}")
        return cls(
            lights=lights,
            roughness=float(d.get("roughness", 0.5)),
            depth_scale=d.get("depth_scale"),
        )

    @classmethod
    def load(cls, path) -> "LightSpecFile":
        p = Path(path)
        return cls.parse(json.loads(p.read_text()), base_dir=p.parent)


def condition_from_image(
    image: np.ndarray,
    spec: LightSpecFile,
    render_cfg: RenderConfig | None = None,
    depth_backend: str = "stub",
    albedo_backend: str = "stub",
    edge_cfg: EdgeConfig | None = None,
):
    """Full pipeline: depth -> height field -> condition + edge condition."""
    depth = estimate_depth(image, backend=depth_backend)
    h, w = depth.values.shape
    scale = spec.depth_scale if spec.depth_scale is not None else default_depth_scale(w)
    field_ = lift_to_heightfield(depth, roughness=spec.roughness, depth_scale=scale, invert=True)
    cond = build_condition(field_, spec.lights, render_cfg)
    albedo_fn = ALBEDO_BACKENDS.get(albedo_backend)
    if albedo_fn is None:
        raise ModelUnavailable(f"no albedo backend named {albedo_backend!r}")
    edge = build_edge_condition(cond, albedo_fn(image), edge_cfg)
    return cond, edge
