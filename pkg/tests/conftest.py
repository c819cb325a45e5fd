"""Shared fixtures: tiny backbone, rendered datasets, trained adapter, eval set.

The heavy fixtures (dataset render, regressor training) are session scoped so
the acceptance suite and the unit tests share one copy.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from practilight.control import LightSpecFile, condition_from_image, default_depth_scale
from practilight.diffusion import build_backbone
from practilight.evalsuite import CATEGORIES, EvalEntry
from practilight.imgio import save_png8
from practilight.lora import TrainingConfig, train_regressor
from practilight.render.core import RenderConfig
from practilight.sampler import GuidanceConfig, sample_source
from practilight.scene import LightProbe
from practilight.synth import generate_dataset

DATASET_RENDER_CFG = RenderConfig(resolution=(64, 64), samples_per_pixel=4)


@pytest.fixture(scope="session")
def backbone():
    """Read-only tiny backbone; tests that attach adapters build their own."""
    return build_backbone("tiny")


@pytest.fixture(scope="session")
def dataset256(tmp_path_factory):
    """256-pair synthetic training dataset at 64x64."""
    root = tmp_path_factory.mktemp("ds256")
    manifest = generate_dataset(256, 0, root, render_cfg=DATASET_RENDER_CFG)
    return root / "manifest.json", manifest


@pytest.fixture(scope="session")
def holdout16(tmp_path_factory):
    """16 held-out pairs from an independent generator seed."""
    root = tmp_path_factory.mktemp("dshold")
    manifest = generate_dataset(16, 999, root, render_cfg=DATASET_RENDER_CFG)
    return root / "manifest.json", manifest


@pytest.fixture(scope="session")
def trained(dataset256):
    """(backbone, adapter, log) for the 256-pair regressor training run.

    Uses its own backbone instance so the adapter wrapping never leaks into
    tests that expect pristine attention modules.
    """
    manifest_path, _ = dataset256
    bb = build_backbone("tiny")
    cfg = TrainingConfig(
        manifest_path=str(manifest_path),
        rank=8,
        alpha=32.0,
        lr=3e-3,
        batch_size=16,
        steps=2000,
        t_max=250,
        grad_clip=1.0,
        cosine_lr=True,
        seed=0,
    )
    adapter, log = train_regressor(bb, cfg)
    adapter.set_enabled(False)
    return bb, adapter, log


@pytest.fixture(scope="session")
def eval_entries(trained, tmp_path_factory):
    """Three source/condition eval entries generated on the trained backbone."""
    bb, adapter, _ = trained
    adapter.set_enabled(False)
    out = tmp_path_factory.mktemp("evalset")
    prompts = [
        ("a warm portrait by candlelight", 11, CATEGORIES[0]),
        ("a cat sitting on a sunny windowsill", 23, CATEGORIES[3]),
        ("a cozy reading room at dusk", 37, CATEGORIES[5]),
    ]
    entries = []
    rng = np.random.default_rng(7)
    for k, (prompt, seed, cat) in enumerate(prompts):
        img, _ = sample_source(bb, prompt, seed, GuidanceConfig(steps=10))
        h, w = img.shape[:2]
        scale = default_depth_scale(w)
        light = LightProbe(
            kind="point",
            position=(float(rng.uniform(0.2, 0.8) * w), float(rng.uniform(0.2, 0.8) * h), 1.5 * scale),
            intensity=float(2.0 * scale**2),
        )
        spec = LightSpecFile(lights=[light], roughness=0.5, depth_scale=scale)
        cond, _edge = condition_from_image(img, spec, render_cfg=RenderConfig(resolution=(w, h), samples_per_pixel=4))
        src_path = out / f"source_{k}.png"
        cond_path = out / f"condition_{k}.png"
        save_png8(src_path, img)
        save_png8(cond_path, cond.pixels)
        entries.append(
            EvalEntry(
                prompt=prompt, seed=seed, steps=10, cfg_scale=7.5, category=cat,
                source_image=str(src_path), condition=str(cond_path),
            )
        )
    return entries


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
