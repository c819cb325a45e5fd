"""Evaluation harness: category-stratified eval set construction, the
Control/Identity/Aesthetic metric table, ablation grids, and the
data-scaling experiment.

Embedding metrics go through the pluggable backends in
:mod:`practilight.metrics`; an unavailable backend leaves the metric absent
from the report rather than zero. Reports are deterministic byte-for-byte
for pinned backends.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .control import LightSpecFile, condition_from_image
from .diffusion import DiffusionBackbone
from .imgio import load_png, save_png8, to_gray
from .lora import LoraAdapter, TrainingConfig, load_pair_latents, train_regressor
from .metrics import BACKEND_VERSIONS, BackendUnavailable, distance, resize
from .sampler import GuidanceConfig, relight, sample_source
from .scene import LightProbe
from .synth import DatasetManifest

CATEGORIES = (
    "Portrait",
    "Portrait CG",
    "Anime",
    "Animal",
    "Fantasy Landscape",
    "Indoors",
    "Outdoors",
    "Painting",
    "Sketch/Cartoon",
)

EMBED_METRICS = ("lpips", "clip", "dino")
RESAMPLE_POLICY = "condition bilinear-resampled to result resolution"


class InsufficientPrompts(ValueError):
    pass


class DuplicateVariant(ValueError):
    pass


# -- eval set ---------------------------------------------------------------


@dataclass
class PromptSpec:
    prompt: str
    seed: int
    steps: int
    cfg_scale: float
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


@dataclass
class EvalEntry:
    prompt: str
    seed: int
    steps: int
    cfg_scale: float
    category: str
    source_image: str
    condition: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


def save_eval_set(entries: list[EvalEntry], path):
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_eval_set(path) -> list[EvalEntry]:
    entries = []
    with open(path) as f:
        for line in f:
            if line.strip():
                entries.append(EvalEntry(**json.loads(line)))
    return entries


def luminance_entropy_scorer(image: np.ndarray) -> float:
    """Default aesthetic stand-in: entropy of the luminance histogram."""
    hist, _ = np.histogram(to_gray(image), bins=32, range=(0.0, 1.0))
    p = hist / max(hist.sum(), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def random_point_light(rng: np.random.Generator, width: int, height: int,
                       depth_scale: float) -> LightProbe:
    """A point light placed at a random spot above the pseudo-scene."""
    x = float(rng.uniform(0.1, 0.9) * width)
    y = float(rng.uniform(0.1, 0.9) * height)
    z = float(depth_scale * rng.uniform(1.2, 2.0))
    return LightProbe(kind="point", position=(x, y, z),
                      intensity=float(depth_scale**2 * rng.uniform(1.0, 4.0)))


def build_eval_set(
    backbone: DiffusionBackbone,
    prompt_source: list[PromptSpec],
    per_category: int,
    scorer=luminance_entropy_scorer,
    out_dir="eval_set",
    light_seed: int = 0,
    roughness: float = 0.5,
) -> list[EvalEntry]:
    """Top `per_category` prompts per category by aesthetic score.

    Ties break on prompt_source order (stable). Conditions come from the
    control builder with a randomly placed point light.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_cat: dict[str, list[tuple[int, PromptSpec]]] = {}
    for i, spec in enumerate(prompt_source):
        by_cat.setdefault(spec.category, []).append((i, spec))
    entries: list[EvalEntry] = []
    for cat in CATEGORIES:
        cands = by_cat.get(cat, [])
        if len(cands) < per_category:
            raise InsufficientPrompts(f"{cat}: {len(cands)} < {per_category}")
        scored = []
        for i, spec in cands:
            img, _ = sample_source(
                backbone, spec.prompt, spec.seed,
                GuidanceConfig(steps=spec.steps, cfg_scale=spec.cfg_scale),
            )
            scored.append((i, spec, img, scorer(img)))
        scored.sort(key=lambda item: (-item[3], item[0]))
        for i, spec, img, _score in scored[:per_category]:
            h, w = img.shape[:2]
            from .control import default_depth_scale

            scale = default_depth_scale(w)
            rng = np.random.default_rng([light_seed, spec.seed])
            light = random_point_light(rng, w, h, scale)
            lsf = LightSpecFile(lights=[light], roughness=roughness, depth_scale=scale)
            cond, _edge = condition_from_image(img, lsf)
            src_path = out / f"source_{cat.replace('/', '_').replace(' ', '_')}_{spec.seed}.png"
            cond_path = out / f"condition_{cat.replace('/', '_').replace(' ', '_')}_{spec.seed}.png"
            save_png8(src_path, img)
            save_png8(cond_path, cond.pixels)
            entries.append(
                EvalEntry(
                    prompt=spec.prompt, seed=spec.seed, steps=spec.steps,
                    cfg_scale=spec.cfg_scale, category=cat,
                    source_image=str(src_path), condition=str(cond_path),
                )
            )
    return entries


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsReport:
    control: dict[str, float]
    identity: dict[str, float]
    aesthetic: float | None = None
    backend_versions: dict[str, str] = field(default_factory=dict)
    resample_policy: str = RESAMPLE_POLICY

    def flat(self) -> dict[str, float]:
        row = {}
        if self.aesthetic is not None:
            row["aesthetic"] = self.aesthetic
        for group, vals in (("control", self.control), ("identity", self.identity)):
            for k, v in vals.items():
                row[f"{group}_{k}"] = v
        return row


def compute_metrics(
    result: np.ndarray,
    source: np.ndarray,
    condition: np.ndarray,
    prompt: str = "",
    scorer=None,
    backends: tuple[str, ...] = ("l2",) + EMBED_METRICS,
) -> MetricsReport:
    result = np.asarray(result, dtype=np.float64)
    cond = np.asarray(condition, dtype=np.float64)
    if cond.ndim == 2:
        cond = np.stack([cond] * 3, axis=-1)
    if cond.shape[:2] != result.shape[:2]:
        cond = resize(cond, result.shape[:2])
    control, identity, versions = {}, {}, {}
    for name in backends:
        try:
            control[name] = distance(name, result, cond)
            identity[name] = distance(name, result, source)
            versions[name] = BACKEND_VERSIONS.get(name, "unpinned")
        except BackendUnavailable:
            continue  # reported as absent, never zero
    aesthetic = scorer(result) if scorer is not None else None
    return MetricsReport(control=control, identity=identity,
                         aesthetic=aesthetic, backend_versions=versions)


# -- ablation grid ----------------------------------------------------------


@dataclass
class Variant:
    name: str
    guidance: GuidanceConfig
    use_adapter: bool = True
    inject_queries: bool = True


def no_scheduling_config(base: GuidanceConfig | None = None) -> GuidanceConfig:
    """Table-3 "No Scheduling": constant unit gamma, unnormalized gradient."""
    base = base or GuidanceConfig()
    return replace(base, gamma_peak=1.0, gamma_window=(0.0, 1.0), grad_norm_mode="none")


def _evaluate_variant(backbone, adapter, variant, entries, scorer):
    rows, failures = [], 0
    for e in entries:
        try:
            source = load_png(e.source_image)
            cond = to_gray(load_png(e.condition))
            gcfg = replace(variant.guidance, steps=e.steps, cfg_scale=e.cfg_scale)
            _, cache = sample_source(backbone, e.prompt, e.seed, gcfg)
            if not variant.inject_queries:
                cache = dataclasses.replace(
                    cache,
                    queries=[{} for _ in cache.queries],
                    uncond_queries=[{} for _ in cache.uncond_queries],
                )
            result = relight(backbone, cache, cond, adapter, gcfg) if variant.use_adapter else source
            rows.append(compute_metrics(result, source, cond, e.prompt, scorer).flat())
        except Exception:
            failures += 1
    return rows, failures


def run_ablation(
    backbone: DiffusionBackbone,
    adapter: LoraAdapter,
    variants: list[Variant],
    entries: list[EvalEntry],
    out_dir=".",
    scorer=None,
) -> list[dict]:
    names = [v.name for v in variants]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise DuplicateVariant(f"duplicate variant names: {sorted(dupes)}")
    table = []
    for v in variants:
        rows, failures = _evaluate_variant(backbone, adapter, v, entries, scorer)
        agg: dict = {"variant": v.name, "n": len(rows), "failed_entries": failures,
                     "provenance": json.dumps(v.guidance.to_sidecar(), sort_keys=True)}
        if rows:
            for k in rows[0]:
                agg[k] = float(np.mean([r[k] for r in rows]))
        table.append(agg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "ablation.csv", out / "ablation.md", table)
    return table


def _write_table(csv_path, md_path, table):
    keys = []
    for row in table:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(table)
    with open(md_path, "w") as f:
        f.write("| " + " | ".join(keys) + " |\n")
        f.write("|" + "---|" * len(keys) + "\n")
        for row in table:
            f.write("| " + " | ".join(str(row.get(k, "")) for k in keys) + " |\n")


# -- data scaling -----------------------------------------------------------


def holdout_loss(backbone, adapter, z_src, z_tgt, seed=1234, t_values=(10, 50, 100)):
    """Regression MSE on held-out pairs at a fixed spread of noise levels.

    Defaults to low-noise levels, where the source latent still identifies the
    pair and regression quality is measurable; at high noise the optimum
    degenerates to the dataset mean for any regressor.
    """
    gen = torch.Generator().manual_seed(seed)
    context = backbone.embed("")
    losses = []
    adapter.set_enabled(True)
    with torch.no_grad():
        for t in t_values:
            noise = torch.randn(z_src.shape, generator=gen)
            tt = torch.full((z_src.shape[0],), t, dtype=torch.long)
            x_t = backbone.schedule.add_noise(z_src, tt, noise)
            pred = backbone.predict(x_t, tt, context.expand(z_src.shape[0], -1, -1))
            losses.append(float(torch.mean((pred - z_tgt) ** 2)))
    adapter.set_enabled(False)
    return float(np.mean(losses))


def data_scaling_experiment(
    backbone: DiffusionBackbone,
    manifest_path,
    sizes: list[int],
    base_seed: int = 0,
    rank: int = 8,
    train_steps: int = 200,
    holdout: int = 8,
) -> list[dict]:
    """Train one regressor per size on nested prefix subsets; score per size.

    The subset of size s is the first s manifest entries, so smaller subsets
    are prefixes of larger ones. Scores are the per-size held-out losses
    normalized to [0, 1] across the curve (1 = best).
    """
    if sorted(sizes) != list(sizes):
        raise ValueError("sizes must be ascending")
    manifest = DatasetManifest.load(manifest_path)
    root = Path(manifest_path).parent
    if manifest.count < max(sizes) + holdout:
        raise ValueError("dataset too small for requested sizes + holdout")
    hold = DatasetManifest(entries=manifest.entries[-holdout:], count=holdout,
                           generator_seed=manifest.generator_seed)
    zh_src, zh_tgt, _ = load_pair_latents(backbone, hold, root)
    curve = []
    for size in sizes:
        cfg = TrainingConfig(
            manifest_path=str(manifest_path), rank=rank, steps=train_steps,
            seed=base_seed, max_pairs=size,
        )
        adapter, log = train_regressor(backbone, cfg)
        loss = holdout_loss(backbone, adapter, zh_src, zh_tgt)
        curve.append({"size": size, "holdout_loss": loss, "final_train_loss": log.smoothed()[-1]})
    losses = [p["holdout_loss"] for p in curve]
    lo, hi = min(losses), max(losses)
    for p in curve:
        p["score"] = 1.0 if hi - lo < 1e-12 else (hi - p["holdout_loss"]) / (hi - lo)
    return curve
