"""Command-line front end: rendering, condition building, training,
relighting, analysis, evaluation, and a client mirror of the HTTP service."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .control import LightSpecFile, condition_from_image
from .diffusion import build_backbone
from .imgio import load_png, save_png8, save_raw, to_gray
from .lora import LoraAdapter, TrainingConfig, train_regressor
from .render.core import ALL_PASSES, RenderConfig, linear_to_display, render
from .sampler import GuidanceConfig, relight, sample_source
from .scene import SceneSpec


def _parse_window(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    return (float(lo), float(hi))


@click.group()
def main():
    """practilight: image relighting via direct-irradiance guidance."""


# -- render -----------------------------------------------------------------


@main.command("render")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--passes", default=",".join(ALL_PASSES), show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--spp", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--height", default=128, show_default=True)
def render_cmd(scene_path, passes, out_dir, spp, seed, width, height):
    """Render passes of a scene JSON into OUT_DIR (linear .npy + display PNG)."""
    spec = SceneSpec.load(scene_path)
    cfg = RenderConfig(
        resolution=(width, height),
        passes=tuple(p.strip() for p in passes.split(",") if p.strip()),
        samples_per_pixel=spp,
        rng_seed=seed,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in render(spec, cfg=cfg).items():
        save_raw(out / f"{name}.npy", img.pixels)
        save_png8(out / f"{name}.png", linear_to_display(img.pixels))
        click.echo(f"wrote {out / name}.npy / .png")


# -- condition --------------------------------------------------------------


@main.command("condition")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--lights", "lights_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--edge-out", type=click.Path(), default=None)
@click.option("--spp", default=16, show_default=True)
def condition_cmd(image_path, lights_path, out_path, edge_out, spp):
    """Build the grayscale light condition (and optionally the edge map)."""
    from .service import render_condition_bytes  # shared writer: byte-identical to previews

    image = load_png(image_path)
    spec = LightSpecFile.load(lights_path)
    Path(out_path).write_bytes(render_condition_bytes(image, spec, spp))
    click.echo(f"wrote {out_path}")
    if edge_out:
        h, w = image.shape[:2]
        cfg = RenderConfig(resolution=(w, h), samples_per_pixel=spp, rng_seed=0)
        _, edge = condition_from_image(image, spec, render_cfg=cfg)
        save_png8(edge_out, edge.pixels)
        click.echo(f"wrote {edge_out}")


# -- synth ------------------------------------------------------------------


@main.command("synth")
@click.option("--count", required=True, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resolution", default=64, show_default=True)
@click.option("--spp", default=8, show_default=True)
def synth_cmd(count, seed, out_dir, resolution, spp):
    """Generate a synthetic scene/beauty/irradiance training dataset."""
    from .synth import generate_dataset

    cfg = RenderConfig(resolution=(resolution, resolution), samples_per_pixel=spp)
    manifest = generate_dataset(count, seed, out_dir, render_cfg=cfg)
    click.echo(f"wrote {manifest.count} pairs under {out_dir}")


# -- train ------------------------------------------------------------------


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--rank", default=8, show_default=True)
@click.option("--steps", default=2000, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--backbone", default="tiny", show_default=True)
def train_cmd(manifest_path, rank, steps, out_path, lr, seed, backbone):
    """Train the direct-irradiance LoRA regressor."""
    bb = build_backbone(backbone)
    cfg = TrainingConfig(manifest_path=manifest_path, rank=rank, steps=steps, lr=lr, seed=seed)
    adapter, log = train_regressor(bb, cfg)
    adapter.save(out_path, extra_meta={"training": {"rank": rank, "steps": steps, "seed": seed}})
    if log.losses:
        click.echo(f"final loss {log.losses[-1]:.6f} (initial {log.losses[0]:.6f})")
    click.echo(f"wrote {out_path}")


# -- relight ----------------------------------------------------------------


@main.command("relight")
@click.option("--prompt", default=None)
@click.option("--prompt-file", type=click.Path(exists=True), default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--condition", "condition_path", required=True, type=click.Path(exists=True))
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--gamma", default=2.2, show_default=True)
@click.option("--window", default="0.05:0.5", show_default=True, help="gamma window lo:hi")
@click.option("--injection-window", default="0.0:0.7", show_default=True)
@click.option("--controlnet-window", default="0.0:0.6", show_default=True)
@click.option("--cfg", "cfg_scale", default=7.5, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--backbone", default="tiny", show_default=True)
def relight_cmd(
    prompt, prompt_file, seed, condition_path, adapter_path, out_path,
    gamma, window, injection_window, controlnet_window, cfg_scale, steps, backbone,
):
    """Relight the (prompt, seed) source under a new light condition."""
    if prompt is None and prompt_file is None:
        raise click.UsageError("one of --prompt / --prompt-file is required")
    if prompt is None:
        prompt = Path(prompt_file).read_text().strip()
    gcfg = GuidanceConfig(
        cfg_scale=cfg_scale,
        gamma_peak=gamma,
        gamma_window=_parse_window(window),
        injection_window=_parse_window(injection_window),
        controlnet_window=_parse_window(controlnet_window),
        steps=steps,
    )
    bb = build_backbone(backbone)
    adapter = LoraAdapter.load_into(adapter_path, bb)
    cond = to_gray(load_png(condition_path))
    _, cache = sample_source(bb, prompt, seed, gcfg)
    result = relight(bb, cache, cond, adapter, gcfg)
    save_png8(out_path, result)
    sidecar = {
        "prompt": prompt,
        "seed": seed,
        "condition": str(condition_path),
        "adapter": str(adapter_path),
        "guidance": gcfg.to_sidecar(),
        "backbone": backbone,
    }
    sidecar_path = Path(out_path).with_suffix(".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    click.echo(f"wrote {out_path} + {sidecar_path}")


# -- analyze ----------------------------------------------------------------


def _invert_from_cfg(bb, d, steps):
    from .analysis import ddim_invert

    return ddim_invert(bb, load_png(d["image"]), d.get("prompt", ""), steps=steps)


@main.command("analyze")
@click.argument("mode", type=click.Choice(["layers", "timesteps", "heads"]))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def analyze_cmd(mode, config_path, out_dir):
    """Diagnostic experiments; emits CSV curves and PNG grids into OUT_DIR."""
    from . import analysis

    cfg = json.loads(Path(config_path).read_text())
    bb = build_backbone(cfg.get("backbone", "tiny"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = int(cfg.get("steps", 50))

    if mode == "timesteps":
        curve = analysis.attention_to_roi(
            bb,
            cfg.get("prompt", ""),
            int(cfg.get("seed", 0)),
            tuple(cfg["pixel"]),
            tuple(cfg["roi"]),
            layer=cfg.get("layer", analysis.DEFAULT_ROI_LAYER),
            steps=steps,
            per_head=bool(cfg.get("per_head", False)),
        )
        if curve.ndim == 1:
            curves = {"roi_fraction": curve}
        else:
            curves = {f"head_{h}": curve[:, h] for h in range(curve.shape[1])}
        analysis.write_curve_csv(out / "attention_curve.csv", curves)
        strip = np.repeat(np.stack(list(curves.values())), 16, axis=0)
        save_png8(out / "attention_curve.png", np.clip(strip, 0, 1))
        click.echo(f"wrote {out / 'attention_curve.csv'}")
        return

    original = _invert_from_cfg(bb, cfg["original"], steps)
    target = _invert_from_cfg(bb, cfg["target"], steps)

    if mode == "layers":
        rows = []
        for selector in ("self_attention", "cross_attention", "conv_residual"):
            spec = analysis.InjectionSpec(layer_selector=selector)
            img, report = analysis.inject_and_generate(bb, original, target, spec)
            save_png8(out / f"{selector}.png", img)
            rows.append({"selector": selector, **report.distances})
        with open(out / "layers.csv", "w") as f:
            keys = list(rows[0])
            f.write(",".join(keys) + "\n")
            for r in rows:
                f.write(",".join(str(r[k]) for k in keys) + "\n")
        click.echo(f"wrote {out / 'layers.csv'}")
        return

    adapter = LoraAdapter.load_into(cfg["adapter"], bb)
    res = analysis.best_worst_head_injection(bb, original, target, adapter)
    save_png8(out / "best_heads.png", res.best_image)
    save_png8(out / "worst_heads.png", res.worst_image)
    summary = {"best": res.best_report.distances, "worst": res.worst_report.distances}
    (out / "heads.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    click.echo(f"wrote {out / 'heads.json'}")


# -- eval -------------------------------------------------------------------


@main.group("eval")
def eval_group():
    """Evaluation set construction and ablation runs."""


@eval_group.command("build")
@click.option("--prompts", "prompts_path", required=True, type=click.Path(exists=True))
@click.option("--per-category", default=1, show_default=True)
@click.option("--out-dir", default="eval_set", show_default=True)
@click.option("--light-seed", default=0, show_default=True)
@click.option("--backbone", default="tiny", show_default=True)
def eval_build_cmd(prompts_path, per_category, out_dir, light_seed, backbone):
    """Build the category-stratified eval set from a prompt-spec JSON list."""
    from .evalsuite import PromptSpec, build_eval_set, save_eval_set

    specs = [PromptSpec(**d) for d in json.loads(Path(prompts_path).read_text())]
    bb = build_backbone(backbone)
    entries = build_eval_set(bb, specs, per_category, out_dir=out_dir, light_seed=light_seed)
    path = Path(out_dir) / "eval.jsonl"
    save_eval_set(entries, path)
    click.echo(f"wrote {len(entries)} entries to {path}")


def _variant_from_name(name: str):
    from .evalsuite import Variant, no_scheduling_config

    base = GuidanceConfig()
    if name == "full":
        return Variant("full", base)
    if name == "no_scheduling":
        return Variant("no_scheduling", no_scheduling_config(base))
    if name == "no_injection":
        return Variant("no_injection", base, inject_queries=False)
    if name.startswith("gamma="):
        return Variant(name, replace(base, gamma_peak=float(name.split("=", 1)[1])))
    raise click.UsageError(f"unknown variant {name!r}")


@eval_group.command("run")
@click.option("--set", "set_path", required=True, type=click.Path(exists=True))
@click.option("--variant", "variant_names", default="full", show_default=True,
              help="comma-separated: full, no_scheduling, no_injection, gamma=X")
@click.option("--out", "out_path", default="report.csv", show_default=True)
@click.option("--adapter", "adapter_path", default=None, type=click.Path(exists=True))
@click.option("--backbone", default="tiny", show_default=True)
def eval_run_cmd(set_path, variant_names, out_path, adapter_path, backbone):
    """Run one or more variants over an eval set; writes a CSV report."""
    from .evalsuite import load_eval_set, run_ablation
    from .lora import attach_lora

    bb = build_backbone(backbone)
    adapter = (
        LoraAdapter.load_into(adapter_path, bb) if adapter_path else attach_lora(bb, rank=8)
    )
    variants = [_variant_from_name(n.strip()) for n in variant_names.split(",")]
    entries = load_eval_set(set_path)
    out = Path(out_path)
    table = run_ablation(bb, adapter, variants, entries, out_dir=out.parent or Path("."))
    produced = (out.parent or Path(".")) / "ablation.csv"
    if produced != out:
        out.write_bytes(produced.read_bytes())
    click.echo(f"wrote {out} ({len(table)} variant rows)")


# -- serve + service client -------------------------------------------------


@main.command("serve")
@click.option("--port", default=None, type=int)
@click.option("--store", "store_dir", default="practilight_store", show_default=True)
@click.option("--adapter", "adapter_path", default=None, type=click.Path())
@click.option("--backbone", default=None)
def serve_cmd(port, store_dir, adapter_path, backbone):
    """Run the HTTP relighting service."""
    from .service import ServiceConfig, main as serve_main

    cfg = ServiceConfig.from_env(store_dir=store_dir)
    if port is not None:
        cfg.port = port
    if adapter_path is not None:
        cfg.adapter_path = adapter_path
    if backbone is not None:
        cfg.backbone = backbone
    serve_main(cfg)


def _client(url):
    import httpx

    return httpx.Client(base_url=url, timeout=300.0)


@main.group("service")
def service_group():
    """Headless client mirroring every HTTP endpoint."""


@service_group.command("create-project")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--prompt", default="")
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--cfg", default=7.5, show_default=True)
def svc_create(url, image_path, prompt, seed, steps, cfg):
    with _client(url) as c:
        r = c.post(
            "/projects",
            files={"image": Path(image_path).read_bytes()},
            params={"prompt": prompt, "seed": seed, "steps": steps, "cfg": cfg},
        )
        r.raise_for_status()
        click.echo(json.dumps(r.json(), indent=2, sort_keys=True))


@service_group.command("project")
@click.argument("project_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
def svc_project(project_id, url):
    with _client(url) as c:
        r = c.get(f"/projects/{project_id}")
        r.raise_for_status()
        click.echo(json.dumps(r.json(), indent=2, sort_keys=True))


@service_group.command("depth")
@click.argument("project_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
def svc_depth(project_id, url):
    with _client(url) as c:
        r = c.post(f"/projects/{project_id}/depth")
        r.raise_for_status()
        click.echo(json.dumps(r.json(), indent=2, sort_keys=True))


@service_group.command("preview")
@click.argument("project_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
@click.option("--lights", "lights_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def svc_preview(project_id, url, lights_path, out_path):
    body = {"light_spec": json.loads(Path(lights_path).read_text())}
    with _client(url) as c:
        r = c.post(f"/projects/{project_id}/preview", json=body)
        r.raise_for_status()
        Path(out_path).write_bytes(r.content)
        click.echo(f"wrote {out_path}")


@service_group.command("relight")
@click.argument("project_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
@click.option("--lights", "lights_path", required=True, type=click.Path(exists=True))
@click.option("--guidance", "guidance_json", default="{}", show_default=True)
def svc_relight(project_id, url, lights_path, guidance_json):
    body = {
        "light_spec": json.loads(Path(lights_path).read_text()),
        "guidance": json.loads(guidance_json),
    }
    with _client(url) as c:
        r = c.post(f"/projects/{project_id}/relight", json=body)
        r.raise_for_status()
        click.echo(json.dumps(r.json(), indent=2, sort_keys=True))


@service_group.command("job")
@click.argument("job_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
def svc_job(job_id, url):
    with _client(url) as c:
        r = c.get(f"/jobs/{job_id}")
        r.raise_for_status()
        click.echo(json.dumps(r.json(), indent=2, sort_keys=True))


@service_group.command("result")
@click.argument("result_id")
@click.option("--url", default="http://127.0.0.1:8321", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--sidecar", "sidecar_path", default=None, type=click.Path())
def svc_result(result_id, url, out_path, sidecar_path):
    with _client(url) as c:
        r = c.get(f"/results/{result_id}")
        r.raise_for_status()
        Path(out_path).write_bytes(r.content)
        click.echo(f"wrote {out_path}")
        if sidecar_path:
            s = c.get(f"/results/{result_id}/sidecar")
            s.raise_for_status()
            Path(sidecar_path).write_text(json.dumps(s.json(), indent=2, sort_keys=True))
            click.echo(f"wrote {sidecar_path}")


if __name__ == "__main__":
    main()
