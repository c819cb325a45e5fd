"""Randomized synthetic scene sampling and dataset generation.

Scenes are a cube room with a few primitives and one point light; each dataset
entry is a (scene.json, beauty.png, direct_irradiance.npy) triple listed in a
JSON manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .imgio import save_png8
from .render.core import (
    PASS_BEAUTY,
    PASS_DIFFUSE,
    PASS_SPECULAR,
    RenderConfig,
    compose_direct_irradiance,
    linear_to_display,
    render,
)
from .scene import (
    ROUGHNESS_MIN,
    CameraSpec,
    GGXMaterial,
    LightProbe,
    PrimitiveInstance,
    SceneSpec,
    volume_contains_point,
    volumes_overlap,
)


class PlacementFailure(RuntimeError):
    """Rejection sampling could not place the scene; the config is over-constrained."""


@dataclass
class SynthConfig:
    room_size: float = 4.0  # cube edge length, meters
    n_objects: int = 3
    kinds: tuple[str, ...] = ("sphere", "cube", "cuboid")
    scale_range: tuple[float, float] = (0.25, 0.6)  # half-extent, meters
    roughness_range: tuple[float, float] = (ROUGHNESS_MIN, 1.0)
    intensity_range: tuple[float, float] = (2.0, 40.0)  # sampled log-uniformly
    max_attempts: int = 1000
    wall_margin: float = 0.05

    def validate(self):
        for lo, hi in (self.scale_range, self.roughness_range, self.intensity_range):
            if not lo < hi:
                raise ValueError("config ranges must satisfy min < max")
        if self.n_objects < 1 or self.room_size <= 0:
            raise ValueError("invalid synth config")
        return self


@dataclass
class DatasetManifest:
    entries: list[dict]
    count: int
    generator_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return cls(entries=d["entries"], count=d["count"], generator_seed=d["generator_seed"])

    def save(self, path):
        Path(path).write_text(self.to_json())


def _sample_position(rng, half, margin):
    return rng.uniform(-half + margin, half - margin, size=3)


def sample_scene(seed: int, config: SynthConfig | None = None) -> SceneSpec:
    """Deterministically sample a valid scene for the given seed."""
    config = (config or SynthConfig()).validate()
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 0x5CE4E]))
    half = config.room_size / 2.0
    room = ((-half, -half, -half), (half, half, half))

    objects: list[PrimitiveInstance] = []
    vols = []
    attempts = 0
    while len(objects) < config.n_objects:
        if attempts >= config.max_attempts:
            raise PlacementFailure(
                f"could not place object {len(objects) + 1}/{config.n_objects} "
                f"after {config.max_attempts} attempts"
            )
        attempts += 1
        kind = config.kinds[rng.integers(len(config.kinds))]
        s = rng.uniform(*config.scale_range, size=3)
        rot = tuple(rng.uniform(0, 2 * math.pi, size=3))
        mat = GGXMaterial(
            roughness=float(rng.uniform(*config.roughness_range)),
            albedo=tuple(rng.uniform(0.1, 0.95, size=3)),
        )
        margin = float(np.max(s)) * 1.8 + config.wall_margin
        if margin >= half:
            continue
        pos = tuple(_sample_position(rng, half, margin))
        cand = PrimitiveInstance(kind=kind, position=pos, rotation=rot, scale=tuple(s), material=mat)
        vol = cand.bounding_volume()
        if any(volumes_overlap(vol, v) for v in vols):
            continue
        objects.append(cand)
        vols.append(vol)

    # one point light, kept away from objects and near the upper half for useful shading
    for _ in range(config.max_attempts):
        lp = _sample_position(rng, half, config.wall_margin + 0.1)
        lp[2] = rng.uniform(0.0, half - config.wall_margin - 0.1)
        if not any(volume_contains_point(v, lp) for v in vols):
            break
    else:
        raise PlacementFailure("could not place light")
    intensity = float(np.exp(rng.uniform(*np.log(config.intensity_range))))
    light = LightProbe(kind="point", position=tuple(lp), intensity=intensity)

    # camera inside the room looking at the scene center area
    cam_pos = _sample_position(rng, half, config.wall_margin + 0.2)
    cam_pos[2] = rng.uniform(-0.2 * half, 0.6 * half)
    target = rng.uniform(-0.3, 0.3, size=3)
    if np.linalg.norm(np.asarray(cam_pos) - target) < 0.5:
        cam_pos = cam_pos + (cam_pos - target) * 2.0
        cam_pos = np.clip(cam_pos, -half + 0.3, half - 0.3)
    camera = CameraSpec(kind="perspective", position=tuple(cam_pos), look_at=tuple(target))

    return SceneSpec(room=room, objects=objects, lights=[light], camera=camera, seed=int(seed)).validate()


def _scene_seed(generator_seed: int, index: int, retry: int = 0) -> int:
    return int((generator_seed * 1_000_003 + index * 7919 + retry * 104_729) % (2**31 - 1))


def render_pair(scene: SceneSpec, render_cfg: RenderConfig):
    """(beauty display image HxWx3, direct irradiance linear HxWx3) for a scene."""
    cfg = RenderConfig(
        resolution=render_cfg.resolution,
        passes=(PASS_BEAUTY, PASS_DIFFUSE, PASS_SPECULAR),
        samples_per_pixel=render_cfg.samples_per_pixel,
        max_bounces=render_cfg.max_bounces,
        shadow_epsilon=render_cfg.shadow_epsilon,
        rng_seed=render_cfg.rng_seed,
        env_samples=render_cfg.env_samples,
    )
    passes = render(scene, scene.camera, cfg)
    beauty = linear_to_display(passes[PASS_BEAUTY].pixels)
    direct = compose_direct_irradiance(passes[PASS_DIFFUSE], passes[PASS_SPECULAR])
    return beauty, direct.pixels


def generate_dataset(
    n: int,
    seed: int,
    out_dir,
    render_cfg: RenderConfig | None = None,
    retry_budget: int = 10,
) -> DatasetManifest:
    """Write n scene/beauty/irradiance triples under out_dir; resumable."""
    if n < 1:
        raise ValueError("n must be >= 1")
    render_cfg = render_cfg or RenderConfig(resolution=(512, 512), samples_per_pixel=64)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        scene_path = out / f"scene_{i:05d}.json"
        beauty_path = out / f"beauty_{i:05d}.png"
        irr_path = out / f"direct_{i:05d}.npy"
        entry = {
            "scene_path": scene_path.name,
            "beauty_path": beauty_path.name,
            "direct_irradiance_path": irr_path.name,
        }
        if not (scene_path.exists() and beauty_path.exists() and irr_path.exists()):
            scene = None
            for retry in range(retry_budget):
                try:
                    scene = sample_scene(_scene_seed(seed, i, retry))
                    break
                except PlacementFailure:
                    continue
            if scene is None:
                raise PlacementFailure(f"entry {i}: retry budget exhausted")
            beauty, direct = render_pair(scene, render_cfg)
            scene.save(scene_path)
            save_png8(beauty_path, beauty)
            np.save(str(irr_path), direct.astype(np.float32))
        entries.append(entry)
    manifest = DatasetManifest(entries=entries, count=len(entries), generator_seed=int(seed))
    manifest.save(out / "manifest.json")
    return manifest
