"""First-bounce irradiance rendering for depth-lifted height fields.

The camera is implicitly orthographic, axis aligned, looking down -z and
framing the full grid, so primary visibility is one grid cell per pixel and
only shadow rays need actual marching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..scene import GGXMaterial, LightProbe
from .core import F0, IrradianceMap, RenderConfig, _ggx_terms

_SHADOW_STEPS = 96  # fixed strata along each shadow ray; deterministic


class HeightFieldError(ValueError):
    pass


@dataclass
class HeightField:
    grid: np.ndarray  # HxW heights (z-up, scene units)
    cell_size: float = 1.0
    material: GGXMaterial = field(default_factory=lambda: GGXMaterial(roughness=0.5))

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if not np.all(np.isfinite(self.grid)):
            raise HeightFieldError("height grid must be finite")
        if self.cell_size <= 0:
            raise HeightFieldError("cell_size must be > 0")

    def points(self):
        """World positions of cell centers, (H,W,3); x right, y down, z up."""
        h, w = self.grid.shape
        x = (np.arange(w) + 0.5) * self.cell_size
        y = (np.arange(h) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx, yy, self.grid], axis=-1)

    def normals(self):
        dzdx = np.gradient(self.grid, self.cell_size, axis=1)
        dzdy = np.gradient(self.grid, self.cell_size, axis=0)
        n = np.stack([-dzdx, -dzdy, np.ones_like(self.grid)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def sample_height(self, x, y):
        """Bilinear height lookup at world coordinates; outside the grid -> -inf."""
        h, w = self.grid.shape
        fx = x / self.cell_size - 0.5
        fy = y / self.cell_size - 0.5
        inside = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
        fx = np.clip(fx, 0, w - 1.000001)
        fy = np.clip(fy, 0, h - 1.000001)
        x0 = np.floor(fx).astype(int)
        y0 = np.floor(fy).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = fx - x0
        ty = fy - y0
        v = (
            self.grid[y0, x0] * (1 - tx) * (1 - ty)
            + self.grid[y0, x1] * tx * (1 - ty)
            + self.grid[y1, x0] * (1 - tx) * ty
            + self.grid[y1, x1] * tx * ty
        )
        return np.where(inside, v, -np.inf)


def _shadow_visible(field: HeightField, p, to_light, max_t, eps):
    """March fixed strata along p + s*to_light and test against the terrain."""
    # strata midpoints, skipping the endpoints to avoid self/light hits
    s = (np.arange(_SHADOW_STEPS) + 0.5) / _SHADOW_STEPS
    occluded = np.zeros(p.shape[0], dtype=bool)
    for sk in s:
        q = p + to_light * (sk * max_t)[:, None]
        terrain = field.sample_height(q[:, 0], q[:, 1])
        occluded |= terrain > q[:, 2] + eps
    return ~occluded


def _fib_hemisphere(n: int) -> np.ndarray:
    """Deterministic upper-hemisphere direction set (z > 0)."""
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = i / n  # uniform in z over (0,1]
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def render_heightfield_condition(
    field: HeightField,
    lights: list[LightProbe],
    material: GGXMaterial | None = None,
    cfg: RenderConfig | None = None,
) -> IrradianceMap:
    """Grayscale first-bounce irradiance map of the height field (linear)."""
    cfg = cfg or RenderConfig()
    mat = material or field.material
    h, w = field.grid.shape
    p = field.points().reshape(-1, 3)
    n = field.normals().reshape(-1, 3)
    wo = np.broadcast_to(np.array([0.0, 0.0, 1.0]), p.shape)  # toward the ortho camera
    gray_albedo = float(np.mean(mat.albedo))
    out = np.zeros(p.shape[0])
    eps = cfg.shadow_epsilon * max(1.0, float(np.ptp(field.grid)) + 1.0)
    for light in lights:
        if light.kind == "point":
            lp = np.asarray(light.position, dtype=np.float64)
            to_l = lp - p
            dist = np.linalg.norm(to_l, axis=1)
            wi = to_l / np.maximum(dist[:, None], 1e-12)
            cos = np.sum(n * wi, axis=1)
            facing = cos > 0
            start = p + n * eps
            vis = _shadow_visible(field, start, wi, dist, eps)
            e = light.intensity * np.maximum(cos, 0.0) / np.maximum(dist * dist, 1e-12)
            e = np.where(facing & vis, e, 0.0)
        else:
            dirs = _fib_hemisphere(cfg.env_samples)
            from .core import _env_value

            vals = _env_value(light, dirs)
            wgt = 2.0 * math.pi / cfg.env_samples  # uniform hemisphere MC
            e = np.zeros(p.shape[0])
            far = 2.0 * max(h, w) * field.cell_size + float(np.ptp(field.grid))
            start = p + n * eps
            for k in range(cfg.env_samples):
                wi = np.broadcast_to(dirs[k], p.shape)
                cos = np.sum(n * wi, axis=1)
                facing = cos > 0
                if not facing.any():
                    continue
                vis = _shadow_visible(field, start, wi, np.full(p.shape[0], far), eps)
                e += np.where(facing & vis, vals[k] * np.maximum(cos, 0.0) * wgt, 0.0)
            wi = None
        if light.kind == "point":
            spec = _ggx_terms(n, wi, wo, mat.roughness)
        else:
            spec = 0.0  # env specular folded into diffuse response for conditions
        out += ((1.0 - F0) * gray_albedo / math.pi + spec) * e
    return IrradianceMap.wrap(out.reshape(h, w))
