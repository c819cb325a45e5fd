import json
from pathlib import Path

import click
import numpy as np
import pytest
from click.testing import CliRunner

from practilight.cli import _parse_window, _variant_from_name, main
from practilight.diffusion import build_backbone
from practilight.imgio import load_png, save_png8
from practilight.lora import attach_lora
from practilight.scene import CameraSpec, LightProbe, SceneSpec
from practilight.service import render_condition_bytes
from practilight.control import LightSpecFile

LIGHTS = {"lights": [{"kind": "point", "position": [32.0, 32.0, 40.0], "intensity": 3000.0}],
          "roughness": 0.5}


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def scene_file(tmp_path):
    spec = SceneSpec(
        room=((-2, -2, -2), (2, 2, 2)),
        objects=[],
        lights=[LightProbe(kind="point", position=(0, 0, 1))],
        camera=CameraSpec(position=(0, 0, 1.5), look_at=(0, 0, -1)),
    )
    path = tmp_path / "scene.json"
    spec.save(path)
    return path


@pytest.fixture()
def image_file(tmp_path, rng):
    path = tmp_path / "src.png"
    save_png8(path, rng.random((64, 64, 3)))
    return path


@pytest.fixture()
def lights_file(tmp_path):
    path = tmp_path / "lights.json"
    path.write_text(json.dumps(LIGHTS))
    return path


@pytest.fixture()
def adapter_file(tmp_path):
    bb = build_backbone("tiny")
    adapter = attach_lora(bb, rank=8)
    path = tmp_path / "adapter.ckpt"
    adapter.save(path)
    return path


class TestParseHelpers:
    def test_parse_window(self):
        assert _parse_window("0.05:0.5") == (0.05, 0.5)
        assert _parse_window("0:1") == (0.0, 1.0)

    def test_variant_from_name(self):
        assert _variant_from_name("full").name == "full"
        ns = _variant_from_name("no_scheduling")
        assert ns.guidance.gamma_peak == 1.0 and ns.guidance.grad_norm_mode == "none"
        assert _variant_from_name("no_injection").inject_queries is False
        g = _variant_from_name("gamma=4.0")
        assert g.guidance.gamma_peak == 4.0
        with pytest.raises(click.UsageError):
            _variant_from_name("mystery")


class TestRenderCommand:
    def test_writes_passes(self, runner, scene_file, tmp_path):
        out = tmp_path / "render_out"
        result = runner.invoke(main, [
            "render", "--scene", str(scene_file), "--out", str(out),
            "--spp", "1", "--width", "16", "--height", "16",
        ])
        assert result.exit_code == 0, result.output
        for name in ("beauty", "direct_diffuse", "direct_specular"):
            assert (out / f"{name}.npy").exists()
            assert (out / f"{name}.png").exists()
        arr = np.load(out / "direct_diffuse.npy")
        assert arr.shape == (16, 16, 3)

    def test_missing_scene(self, runner, tmp_path):
        result = runner.invoke(main, ["render", "--scene", str(tmp_path / "no.json"),
                                      "--out", str(tmp_path)])
        assert result.exit_code != 0


class TestConditionCommand:
    def test_matches_library_bytes(self, runner, image_file, lights_file, tmp_path):
        out = tmp_path / "cond.png"
        result = runner.invoke(main, [
            "condition", "--image", str(image_file), "--lights", str(lights_file),
            "--out", str(out), "--spp", "4",
        ])
        assert result.exit_code == 0, result.output
        expected = render_condition_bytes(load_png(image_file), LightSpecFile.parse(LIGHTS), spp=4)
        assert out.read_bytes() == expected

    def test_edge_output(self, runner, image_file, lights_file, tmp_path):
        result = runner.invoke(main, [
            "condition", "--image", str(image_file), "--lights", str(lights_file),
            "--out", str(tmp_path / "c.png"), "--edge-out", str(tmp_path / "e.png"),
            "--spp", "2",
        ])
        assert result.exit_code == 0, result.output
        edge = load_png(tmp_path / "e.png")
        assert edge.shape[:2] == (64, 64)


class TestSynthCommand:
    def test_writes_manifest(self, runner, tmp_path):
        out = tmp_path / "data"
        result = runner.invoke(main, [
            "synth", "--count", "2", "--out", str(out), "--resolution", "64", "--spp", "2",
        ])
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["entries"]) == 2


class TestTrainCommand:
    def test_writes_loadable_checkpoint(self, runner, dataset256, tmp_path):
        manifest_path, _ = dataset256
        out = tmp_path / "adapter.ckpt"
        result = runner.invoke(main, [
            "train", "--manifest", str(manifest_path), "--steps", "2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        from practilight.lora import LoraAdapter

        bb = build_backbone("tiny")
        adapter = LoraAdapter.load_into(out, bb)
        assert adapter.rank == 8


class TestRelightCommand:
    def test_requires_prompt(self, runner, image_file, adapter_file, tmp_path):
        result = runner.invoke(main, [
            "relight", "--condition", str(image_file), "--adapter", str(adapter_file),
            "--out", str(tmp_path / "o.png"),
        ])
        assert result.exit_code != 0
        assert "--prompt" in result.output

    def test_full_run_with_sidecar(self, runner, image_file, adapter_file, tmp_path):
        out = tmp_path / "relit.png"
        result = runner.invoke(main, [
            "relight", "--prompt", "a lantern", "--condition", str(image_file),
            "--adapter", str(adapter_file), "--out", str(out), "--steps", "2",
        ])
        assert result.exit_code == 0, result.output
        img = load_png(out)
        assert img.shape == (64, 64, 3)
        sidecar = json.loads(out.with_suffix(".json").read_text())
        assert sidecar["prompt"] == "a lantern"
        assert sidecar["guidance"]["gamma_window"] == [0.05, 0.5]
        assert sidecar["guidance"]["steps"] == 2

    def test_prompt_file(self, runner, image_file, adapter_file, tmp_path):
        pf = tmp_path / "prompt.txt"
        pf.write_text("a candle\n")
        out = tmp_path / "o.png"
        result = runner.invoke(main, [
            "relight", "--prompt-file", str(pf), "--condition", str(image_file),
            "--adapter", str(adapter_file), "--out", str(out), "--steps", "2",
        ])
        assert result.exit_code == 0, result.output
        assert json.loads(out.with_suffix(".json").read_text())["prompt"] == "a candle"


class TestAnalyzeCommand:
    def test_timesteps_writes_curve(self, runner, tmp_path):
        cfg = {"prompt": "p", "seed": 0, "pixel": [0, 0], "roi": [0, 1, 0, 1], "steps": 2}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "analysis"
        result = runner.invoke(main, ["analyze", "timesteps", "--config", str(cfg_path),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        header = (out / "attention_curve.csv").read_text().splitlines()[0]
        assert header == "step,roi_fraction"
        assert (out / "attention_curve.png").exists()

    def test_layers_writes_images_and_csv(self, runner, image_file, tmp_path, rng):
        other = tmp_path / "other.png"
        save_png8(other, rng.random((64, 64, 3)))
        cfg = {
            "steps": 3,
            "original": {"image": str(image_file), "prompt": "a"},
            "target": {"image": str(other), "prompt": "b"},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "layers_out"
        result = runner.invoke(main, ["analyze", "layers", "--config", str(cfg_path),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "layers.csv").exists()
        for sel in ("self_attention", "cross_attention", "conv_residual"):
            assert (out / f"{sel}.png").exists()


class TestEvalCommands:
    def test_build_requires_enough_prompts(self, runner, tmp_path):
        prompts = [{"prompt": "p", "seed": 0, "steps": 2, "cfg_scale": 7.5, "category": "Portrait"}]
        pp = tmp_path / "prompts.json"
        pp.write_text(json.dumps(prompts))
        result = runner.invoke(main, ["eval", "build", "--prompts", str(pp),
                                      "--out-dir", str(tmp_path / "set")])
        assert result.exit_code != 0
