"""CPU ray-cast renderer for primitive scenes.

Produces a beauty pass (short path trace) plus noise-free first-bounce
direct diffuse / direct specular passes. All passes are linear radiometric
values; display conversion is a separate explicit step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..scene import CameraSpec, GGXMaterial, SceneSpec, rotation_matrix

F0 = 0.04  # dielectric normal-incidence reflectance

PASS_BEAUTY = "beauty"
PASS_DIFFUSE = "direct_diffuse"
PASS_SPECULAR = "direct_specular"
ALL_PASSES = (PASS_BEAUTY, PASS_DIFFUSE, PASS_SPECULAR)


class RenderError(ValueError):
    pass


class DegenerateGeometry(RenderError):
    pass


class ShapeMismatch(RenderError):
    pass


@dataclass
class RenderConfig:
    resolution: tuple[int, int] = (128, 128)  # (width, height)
    passes: tuple[str, ...] = ALL_PASSES
    samples_per_pixel: int = 16
    max_bounces: int = 3
    shadow_epsilon: float = 1e-4
    rng_seed: int = 0
    env_samples: int = 64  # stratified directions for environment lights

    def __post_init__(self):
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise RenderError("resolution components must be > 0")
        if self.shadow_epsilon <= 0:
            raise RenderError("shadow_epsilon must be > 0")
        if self.samples_per_pixel < 1 or self.max_bounces < 1:
            raise RenderError("spp and max_bounces must be >= 1")
        for p in self.passes:
            if p not in ALL_PASSES:
                raise RenderError(f"unknown pass {p!r}")


@dataclass
class IrradianceMap:
    pixels: np.ndarray  # HxW or HxWx3 float
    channels: int = 3
    tonemap_state: str = "linear"  # linear | display

    @classmethod
    def wrap(cls, pixels, state="linear"):
        pixels = np.asarray(pixels, dtype=np.float64)
        ch = 1 if pixels.ndim == 2 else pixels.shape[2]
        return cls(pixels=pixels, channels=ch, tonemap_state=state)


def compose_direct_irradiance(direct_diffuse: IrradianceMap, direct_specular: IrradianceMap) -> IrradianceMap:
    if direct_diffuse.pixels.shape != direct_specular.pixels.shape:
        raise ShapeMismatch("direct pass resolutions differ")
    if direct_diffuse.tonemap_state != "linear" or direct_specular.tonemap_state != "linear":
        raise RenderError("compose expects linear passes")
    return IrradianceMap.wrap(direct_diffuse.pixels + direct_specular.pixels)


def linear_to_display(img: np.ndarray, target_percentile=99.0, target_value=0.95) -> np.ndarray:
    """Exposure-normalize (p99 -> 0.95) then apply the sRGB transfer curve."""
    img = np.asarray(img, dtype=np.float64)
    p = np.percentile(img, target_percentile)
    scale = target_value / p if p > 1e-12 else 1.0
    x = np.clip(img * scale, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


# -- GGX microfacet BRDF ----------------------------------------------------


def _ggx_terms(n, wi, wo, roughness):
    """Vectorized D, G, F and the specular term; inputs broadcast over (...,3)."""
    alpha = roughness * roughness
    a2 = alpha * alpha
    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    nh = np.maximum(np.sum(n * h, axis=-1), 1e-6)
    ni = np.maximum(np.sum(n * wi, axis=-1), 1e-6)
    no = np.maximum(np.sum(n * wo, axis=-1), 1e-6)
    oh = np.clip(np.sum(wo * h, axis=-1), 1e-6, 1.0)
    d = a2 / (math.pi * (nh * nh * (a2 - 1.0) + 1.0) ** 2)

    def smith(c):
        return 2.0 / (1.0 + np.sqrt(1.0 + a2 * (1.0 - c * c) / (c * c)))

    g = smith(ni) * smith(no)
    f = F0 + (1.0 - F0) * (1.0 - oh) ** 5
    spec = d * g * f / (4.0 * ni * no)
    return spec


def ggx_brdf(normal, w_in, w_out, material: GGXMaterial) -> np.ndarray:
    """Reflectance (1/sr) for a diffuse + GGX specular material.

    Directions point away from the surface; caller must cull back-facing
    configurations (DegenerateGeometry otherwise).
    """
    n = np.asarray(normal, dtype=np.float64)
    wi = np.asarray(w_in, dtype=np.float64)
    wo = np.asarray(w_out, dtype=np.float64)
    if np.sum(n * wi, axis=-1).min() <= 0 or np.sum(n * wo, axis=-1).min() <= 0:
        raise DegenerateGeometry("direction below the surface hemisphere")
    spec = _ggx_terms(n, wi, wo, material.roughness)
    albedo = np.asarray(material.albedo, dtype=np.float64)
    diffuse = (1.0 - F0) * albedo / math.pi
    return diffuse + spec[..., None] * np.ones(3)


# -- compiled scene ---------------------------------------------------------


@dataclass
class _Prim:
    kind: str
    center: np.ndarray
    rot: np.ndarray  # world-from-local rotation
    scale: np.ndarray  # half extents / radius
    material: GGXMaterial


class CompiledScene:
    def __init__(self, spec: SceneSpec, room_material: GGXMaterial | None = None):
        spec.validate()
        self.spec = spec
        self.room_lo = np.asarray(spec.room[0], dtype=np.float64)
        self.room_hi = np.asarray(spec.room[1], dtype=np.float64)
        self.room_material = room_material or GGXMaterial(roughness=0.9, albedo=(0.7, 0.7, 0.7))
        self.prims = [
            _Prim(
                kind=o.kind,
                center=np.asarray(o.position, dtype=np.float64),
                rot=rotation_matrix(o.rotation),
                scale=np.asarray(o.scale, dtype=np.float64),
                material=o.material,
            )
            for o in spec.objects
        ]
        self.lights = spec.lights

    # every intersect routine takes origins (N,3), dirs (N,3) (unit)

    def _prim_intersect(self, prim: _Prim, o, d):
        """Returns (t, normal) with t=inf on miss."""
        ol = (o - prim.center) @ prim.rot / prim.scale
        dl = (d @ prim.rot) / prim.scale
        if prim.kind == "sphere":
            b = np.sum(ol * dl, axis=1)
            a = np.sum(dl * dl, axis=1)
            c = np.sum(ol * ol, axis=1) - 1.0
            disc = b * b - a * c
            hit = disc > 0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            t = np.where(hit, t, np.inf)
            ts = np.where(np.isfinite(t), t, 0.0)
            pl = ol + ts[:, None] * dl
            nl = pl  # unit-sphere normal in local space
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dl
            t_lo = (-1.0 - ol) * inv
            t_hi = (1.0 - ol) * inv
            tmin = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
            tmax = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
            hit = (tmax > np.maximum(tmin, 1e-9))
            t = np.where(hit & (tmin > 1e-9), tmin, np.where(hit, tmax, np.inf))
            ts = np.where(np.isfinite(t), t, 0.0)
            pl = ol + ts[:, None] * dl
            ax = np.argmax(np.abs(pl), axis=1)
            nl = np.zeros_like(pl)
            nl[np.arange(len(pl)), ax] = np.sign(pl[np.arange(len(pl)), ax])
        nw = (nl / prim.scale) @ prim.rot.T
        norm = np.linalg.norm(nw, axis=1, keepdims=True)
        nw = nw / np.maximum(norm, 1e-12)
        return t, nw

    def _room_intersect(self, o, d):
        """Exit point of the inverted room box; normals point inward."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t_lo = (self.room_lo - o) * inv
        t_hi = (self.room_hi - o) * inv
        tmax = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
        t = np.where(tmax > 1e-9, tmax, np.inf)
        p = o + t[:, None] * d
        # inward normal of the face that was hit
        dist_lo = np.abs(p - self.room_lo)
        dist_hi = np.abs(p - self.room_hi)
        all_d = np.concatenate([dist_lo, dist_hi], axis=1)
        face = np.argmin(all_d, axis=1)
        n = np.zeros_like(p)
        idx = np.arange(len(p))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        n[idx, axis] = sign
        return t, n

    def intersect(self, o, d):
        """Closest hit. Returns t (N,), normal (N,3), prim index (N,), -1 = room, -2 = miss."""
        t, n = self._room_intersect(o, d)
        pid = np.where(np.isfinite(t), -1, -2)
        for i, prim in enumerate(self.prims):
            tp, np_ = self._prim_intersect(prim, o, d)
            closer = tp < t
            t = np.where(closer, tp, t)
            n = np.where(closer[:, None], np_, n)
            pid = np.where(closer, i, pid)
        return t, n, pid

    def occluded(self, o, d, t_max):
        """Any-hit against the objects only (the room never occludes interior segments)."""
        occ = np.zeros(len(o), dtype=bool)
        for prim in self.prims:
            tp, _ = self._prim_intersect(prim, o, d)
            occ |= tp < t_max
        return occ

    def materials_at(self, pid):
        """Per-ray (albedo (N,3), roughness (N,)) for hit arrays."""
        albedo = np.zeros((len(pid), 3))
        rough = np.ones(len(pid))
        mask_room = pid == -1
        albedo[mask_room] = self.room_material.albedo
        rough[mask_room] = self.room_material.roughness
        for i, prim in enumerate(self.prims):
            m = pid == i
            albedo[m] = prim.material.albedo
            rough[m] = prim.material.roughness
        return albedo, rough


# -- direct lighting --------------------------------------------------------


def _fib_sphere(n: int) -> np.ndarray:
    """Deterministic spherical Fibonacci direction set."""
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _env_value(light, dirs) -> np.ndarray:
    if light.env_image is None:
        return np.full(len(dirs), light.intensity)
    img = np.asarray(light.env_image, dtype=np.float64)
    h, w = img.shape[:2]
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0]) % (2 * math.pi)
    row = np.clip((theta / math.pi * h).astype(int), 0, h - 1)
    col = np.clip((phi / (2 * math.pi) * w).astype(int), 0, w - 1)
    return img[row, col] * light.intensity


def direct_light(scene: CompiledScene, p, n, wo, albedo, rough, cfg: RenderConfig):
    """First-bounce diffuse and specular reflected radiance at shading points."""
    diff = np.zeros((len(p), 3))
    spec = np.zeros((len(p), 3))
    origin = p + n * cfg.shadow_epsilon
    for light in scene.lights:
        if light.kind == "point":
            lp = np.asarray(light.position, dtype=np.float64)
            to_l = lp - origin
            dist = np.linalg.norm(to_l, axis=1)
            wi = to_l / np.maximum(dist[:, None], 1e-12)
            cos = np.sum(n * wi, axis=1)
            facing = cos > 0
            vis = ~scene.occluded(origin, wi, dist - cfg.shadow_epsilon)
            e = light.intensity * np.maximum(cos, 0.0) / np.maximum(dist * dist, 1e-12)
            e = np.where(facing & vis, e, 0.0)
            diff += (1.0 - F0) * albedo / math.pi * e[:, None]
            s = _ggx_terms(n, wi, wo, rough)
            spec += (s * e * (np.maximum(cos, 0) > 0))[:, None] * np.ones(3)
        else:
            dirs = _fib_sphere(cfg.env_samples)
            vals = _env_value(light, dirs)
            # uniform-sphere MC: E contribution = mean over dirs * 4pi * cos+ * vis
            w = 4.0 * math.pi / cfg.env_samples
            for k in range(cfg.env_samples):
                wi = np.broadcast_to(dirs[k], p.shape)
                cos = np.sum(n * wi, axis=1)
                facing = cos > 0
                if not facing.any():
                    continue
                vis = ~scene.occluded(origin, wi, np.full(len(p), np.inf))
                e = vals[k] * np.maximum(cos, 0.0) * w
                e = np.where(facing & vis, e, 0.0)
                diff += (1.0 - F0) * albedo / math.pi * e[:, None]
                s = _ggx_terms(n, wi, wo, rough)
                spec += (s * e)[:, None] * np.ones(3)
    return diff, spec


# -- main render entry ------------------------------------------------------


def _primary_rays(camera: CameraSpec, width, height, jitter=None):
    pos, right, up, fwd = camera.basis()
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    u = (j.ravel() + 0.5) / width * 2.0 - 1.0
    v = 1.0 - (i.ravel() + 0.5) / height * 2.0
    if jitter is not None:
        u = u + (jitter[..., 0].ravel() - 0.5) * 2.0 / width
        v = v - (jitter[..., 1].ravel() - 0.5) * 2.0 / height
    aspect = width / height
    if camera.kind == "perspective":
        half_h = math.tan(camera.fov / 2.0)
        d = (
            fwd[None, :]
            + right[None, :] * (u * half_h * aspect)[:, None]
            + up[None, :] * (v * half_h)[:, None]
        )
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(pos, d.shape).copy()
    else:
        o = (
            pos[None, :]
            + right[None, :] * (u * camera.ortho_extent * aspect)[:, None]
            + up[None, :] * (v * camera.ortho_extent)[:, None]
        )
        d = np.broadcast_to(fwd, o.shape).copy()
    return o, d


def _shade_direct(scene, o, d, cfg):
    t, n, pid = scene.intersect(o, d)
    hit = pid >= -1
    diff = np.zeros((len(o), 3))
    spec = np.zeros((len(o), 3))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        albedo, rough = scene.materials_at(pid[hit])
        wo = -d[hit]
        dn, sn = direct_light(scene, p, n[hit], wo, albedo, rough, cfg)
        diff[hit] = dn
        spec[hit] = sn
    return diff, spec, t, n, pid


def _beauty(scene: CompiledScene, camera, cfg: RenderConfig, width, height):
    n_px = width * height
    rng = np.random.Generator(np.random.Philox(key=[cfg.rng_seed, 0xBEA07]))
    # pre-generated random layout keeps results independent of scheduling
    jit = rng.random((cfg.samples_per_pixel, height, width, 2))
    bounce_rnd = rng.random((cfg.samples_per_pixel, cfg.max_bounces, n_px, 2))
    acc = np.zeros((n_px, 3))
    for s in range(cfg.samples_per_pixel):
        o, d = _primary_rays(camera, width, height, jitter=jit[s])
        throughput = np.ones((n_px, 3))
        alive = np.ones(n_px, dtype=bool)
        for b in range(cfg.max_bounces):
            t, n, pid = scene.intersect(o, d)
            hit = (pid >= -1) & alive
            alive = hit
            if not hit.any():
                break
            p = o[hit] + t[hit, None] * d[hit]
            albedo, rough = scene.materials_at(pid[hit])
            wo = -d[hit]
            dn, sn = direct_light(scene, p, n[hit], wo, albedo, rough, cfg)
            acc[hit] += throughput[hit] * (dn + sn)
            if b == cfg.max_bounces - 1:
                break
            # diffuse-only indirect bounce, cosine sampled: f*cos/pdf = albedo
            u = bounce_rnd[s, b][hit]
            nd = _cosine_sample(n[hit], u)
            throughput[hit] *= (1.0 - F0) * albedo
            o = np.zeros_like(o)
            dnew = np.zeros_like(d)
            o[hit] = p + n[hit] * cfg.shadow_epsilon
            dnew[hit] = nd
            d = dnew
    return acc / cfg.samples_per_pixel


def _cosine_sample(n, u):
    r = np.sqrt(u[:, 0])
    phi = 2 * math.pi * u[:, 1]
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z = np.sqrt(np.maximum(1.0 - u[:, 0], 0.0))
    # build tangent frames
    a = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1 * x[:, None] + t2 * y[:, None] + n * z[:, None]


def render(scene: SceneSpec | CompiledScene, camera: CameraSpec | None = None, cfg: RenderConfig | None = None):
    """Render the requested passes. Returns {pass_name: IrradianceMap} (linear)."""
    cfg = cfg or RenderConfig()
    if isinstance(scene, SceneSpec):
        compiled = CompiledScene(scene)
        camera = camera or scene.camera
    else:
        compiled = scene
        camera = camera or compiled.spec.camera
    width, height = cfg.resolution
    out = {}
    if PASS_DIFFUSE in cfg.passes or PASS_SPECULAR in cfg.passes:
        o, d = _primary_rays(camera, width, height)
        diff, spec, *_ = _shade_direct(compiled, o, d, cfg)
        if PASS_DIFFUSE in cfg.passes:
            out[PASS_DIFFUSE] = IrradianceMap.wrap(diff.reshape(height, width, 3))
        if PASS_SPECULAR in cfg.passes:
            out[PASS_SPECULAR] = IrradianceMap.wrap(spec.reshape(height, width, 3))
    if PASS_BEAUTY in cfg.passes:
        img = _beauty(compiled, camera, cfg, width, height)
        out[PASS_BEAUTY] = IrradianceMap.wrap(img.reshape(height, width, 3))
    return out
