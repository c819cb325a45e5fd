"""Scene description types shared by the synthesizer and the renderer.

All geometry lives in meters. Scenes are serialized as versioned JSON so the
renderer CLI and the service can exchange them as files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

ROUGHNESS_MIN = 0.05  # guards the GGX distribution singularity at 0


class SceneError(ValueError):
    pass


@dataclass
class GGXMaterial:
    roughness: float = 0.5
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __post_init__(self):
        self.roughness = float(min(max(self.roughness, ROUGHNESS_MIN), 1.0))
        self.albedo = tuple(float(min(max(a, 0.0), 1.0)) for a in self.albedo)


def rotation_matrix(euler_xyz) -> np.ndarray:
    """Rotation matrix from intrinsic XYZ Euler angles (radians)."""
    rx, ry, rz = euler_xyz
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass
class PrimitiveInstance:
    kind: str  # sphere | cube | cuboid
    position: tuple[float, float, float]
    rotation: tuple[float, float, float]  # euler XYZ, radians
    scale: tuple[float, float, float]  # half-extents (sphere: radius in x, uniform)
    material: GGXMaterial = field(default_factory=GGXMaterial)

    def __post_init__(self):
        if self.kind not in ("sphere", "cube", "cuboid"):
            raise SceneError(f"unknown primitive kind {self.kind!r}")
        if any(s <= 0 for s in self.scale):
            raise SceneError("scale components must be > 0")
        if self.kind == "sphere":
            # spheres are uniformly scaled; keep a single radius
            r = self.scale[0]
            self.scale = (r, r, r)
        if self.kind == "cube":
            s = self.scale[0]
            self.scale = (s, s, s)

    def bounding_volume(self):
        """('sphere', center, radius) or ('aabb', lo, hi) in world space.

        Oriented boxes are wrapped in their world-axis AABB, which is
        conservative but exact enough for placement at 3-object scale.
        """
        c = np.asarray(self.position, dtype=float)
        if self.kind == "sphere":
            return ("sphere", c, float(self.scale[0]))
        R = rotation_matrix(self.rotation)
        half = np.abs(R) @ np.asarray(self.scale, dtype=float)
        return ("aabb", c - half, c + half)


@dataclass
class LightProbe:
    kind: str = "point"  # point | environment
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 1.0
    env_image: np.ndarray | None = None  # grayscale HxW, environment only

    def __post_init__(self):
        if self.kind not in ("point", "environment"):
            raise SceneError(f"unknown light kind {self.kind!r}")
        if self.intensity < 0:
            raise SceneError("light intensity must be >= 0")


@dataclass
class CameraSpec:
    kind: str = "perspective"  # perspective | orthographic
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, -1.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = math.radians(50.0)  # vertical, perspective only
    ortho_extent: float = 1.0  # half-height, orthographic only

    def __post_init__(self):
        if self.kind not in ("perspective", "orthographic"):
            raise SceneError(f"unknown camera kind {self.kind!r}")
        if self.kind == "perspective" and not (0.0 < self.fov < math.pi):
            raise SceneError("fov must be in (0, pi)")
        if self.kind == "orthographic" and self.ortho_extent <= 0:
            raise SceneError("ortho_extent must be > 0")

    def basis(self):
        pos = np.asarray(self.position, dtype=float)
        fwd = np.asarray(self.look_at, dtype=float) - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=float))
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return pos, right, up, fwd


@dataclass
class SceneSpec:
    room: tuple[tuple[float, float, float], tuple[float, float, float]]  # (lo, hi)
    objects: list[PrimitiveInstance]
    lights: list[LightProbe]
    camera: CameraSpec
    seed: int = 0

    def validate(self):
        lo = np.asarray(self.room[0], dtype=float)
        hi = np.asarray(self.room[1], dtype=float)
        if not np.all(lo < hi):
            raise SceneError("degenerate room box")
        if not self.lights:
            raise SceneError("at least one light required")
        for obj in self.objects:
            blo, bhi = _volume_aabb(obj.bounding_volume())
            if not (np.all(blo > lo) and np.all(bhi < hi)):
                raise SceneError(f"object {obj.kind} not strictly inside room")
        vols = [o.bounding_volume() for o in self.objects]
        for i in range(len(vols)):
            for j in range(i + 1, len(vols)):
                if volumes_overlap(vols[i], vols[j]):
                    raise SceneError(f"objects {i} and {j} intersect")
        for light in self.lights:
            if light.kind != "point":
                continue
            p = np.asarray(light.position, dtype=float)
            if not (np.all(p > lo) and np.all(p < hi)):
                raise SceneError("point light outside room")
            for v in vols:
                if volume_contains_point(v, p):
                    raise SceneError("light inside an object")
        return self

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "room": [list(self.room[0]), list(self.room[1])],
            "seed": int(self.seed),
            "camera": asdict(self.camera),
            "objects": [
                {
                    "kind": o.kind,
                    "position": list(o.position),
                    "rotation": list(o.rotation),
                    "scale": list(o.scale),
                    "material": {
                        "roughness": o.material.roughness,
                        "albedo": list(o.material.albedo),
                    },
                }
                for o in self.objects
            ],
            "lights": [
                {
                    "kind": l.kind,
                    "position": list(l.position),
                    "intensity": l.intensity,
                }
                for l in self.lights
            ],
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SceneError(f"unsupported schema_version {d.get('schema_version')!r}")
        cam = CameraSpec(
            kind=d["camera"]["kind"],
            position=tuple(d["camera"]["position"]),
            look_at=tuple(d["camera"]["look_at"]),
            up=tuple(d["camera"]["up"]),
            fov=d["camera"]["fov"],
            ortho_extent=d["camera"]["ortho_extent"],
        )
        objs = [
            PrimitiveInstance(
                kind=o["kind"],
                position=tuple(o["position"]),
                rotation=tuple(o["rotation"]),
                scale=tuple(o["scale"]),
                material=GGXMaterial(
                    roughness=o["material"]["roughness"],
                    albedo=tuple(o["material"]["albedo"]),
                ),
            )
            for o in d["objects"]
        ]
        lights = [
            LightProbe(kind=l["kind"], position=tuple(l["position"]), intensity=l["intensity"])
            for l in d["lights"]
        ]
        return cls(
            room=(tuple(d["room"][0]), tuple(d["room"][1])),
            objects=objs,
            lights=lights,
            camera=cam,
            seed=d.get("seed", 0),
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(self.to_json())


# -- bounding volume helpers ------------------------------------------------


def _volume_aabb(vol):
    if vol[0] == "sphere":
        _, c, r = vol
        return c - r, c + r
    return vol[1], vol[2]


def volumes_overlap(a, b) -> bool:
    if a[0] == "sphere" and b[0] == "sphere":
        return np.linalg.norm(a[1] - b[1]) < a[2] + b[2]
    if a[0] == "sphere":
        a, b = b, a
    if b[0] == "sphere":
        # aabb vs sphere: closest point on box to sphere center
        _, c, r = b
        lo, hi = a[1], a[2]
        closest = np.clip(c, lo, hi)
        return np.linalg.norm(closest - c) < r
    alo, ahi = a[1], a[2]
    blo, bhi = b[1], b[2]
    return bool(np.all(alo < bhi) and np.all(blo < ahi))


def volume_contains_point(vol, p) -> bool:
    if vol[0] == "sphere":
        return np.linalg.norm(vol[1] - p) < vol[2]
    return bool(np.all(p > vol[1]) and np.all(p < vol[2]))
