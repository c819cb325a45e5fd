import json

import numpy as np
import pytest

from practilight.control import (
    DepthMap,
    EdgeConfig,
    EmptyMask,
    LightSpecFile,
    ModelUnavailable,
    build_condition,
    build_edge_condition,
    condition_from_image,
    default_depth_scale,
    estimate_depth,
    lift_to_heightfield,
)
from practilight.imgio import save_png8
from practilight.render.core import RenderConfig, ShapeMismatch
from practilight.scene import LightProbe


@pytest.fixture()
def image(rng):
    return rng.random((32, 32, 3))


class TestDepthMap:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            DepthMap(values=np.zeros((4, 4)), valid_mask=np.ones((3, 3), dtype=bool))

    def test_nonfinite_on_valid_mask(self):
        vals = np.zeros((4, 4))
        vals[0, 0] = np.inf
        with pytest.raises(ValueError):
            DepthMap(values=vals, valid_mask=np.ones((4, 4), dtype=bool))
        # non-finite under an invalid pixel is fine
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        DepthMap(values=vals, valid_mask=mask)


class TestEstimateDepth:
    def test_stub_resolution_and_mask(self, image):
        d = estimate_depth(image)
        assert d.values.shape == (32, 32)
        assert d.valid_mask.all()

    def test_unknown_backend(self, image):
        with pytest.raises(ModelUnavailable):
            estimate_depth(image, backend="midas")

    def test_empty_image(self):
        with pytest.raises(ValueError):
            estimate_depth(np.zeros((0, 0, 3)))

    def test_deterministic(self, image):
        a = estimate_depth(image).values
        b = estimate_depth(image).values
        assert np.array_equal(a, b)


class TestLiftToHeightfield:
    def test_normalized_to_depth_scale(self, rng):
        d = DepthMap(values=rng.random((8, 8)) * 10 + 5, valid_mask=np.ones((8, 8), dtype=bool))
        f = lift_to_heightfield(d, depth_scale=3.0)
        assert f.grid.min() == 0.0
        assert f.grid.max() == pytest.approx(3.0)

    def test_invert(self, rng):
        d = DepthMap(values=rng.random((8, 8)), valid_mask=np.ones((8, 8), dtype=bool))
        a = lift_to_heightfield(d, depth_scale=2.0).grid
        b = lift_to_heightfield(d, depth_scale=2.0, invert=True).grid
        np.testing.assert_allclose(a + b, 2.0)

    def test_constant_depth_flat(self):
        d = DepthMap(values=np.full((8, 8), 7.0), valid_mask=np.ones((8, 8), dtype=bool))
        assert np.all(lift_to_heightfield(d, depth_scale=2.0).grid == 0.0)

    def test_empty_mask(self):
        d = DepthMap(values=np.zeros((4, 4)), valid_mask=np.zeros((4, 4), dtype=bool))
        with pytest.raises(EmptyMask):
            lift_to_heightfield(d)

    def test_invalid_filled_from_nearest(self):
        vals = np.zeros((4, 4))
        vals[:, 2:] = 4.0
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        vals[0, 0] = 1e9  # should be ignored and filled from a neighbour
        d = DepthMap(values=vals, valid_mask=mask)
        f = lift_to_heightfield(d, depth_scale=4.0)
        assert f.grid[0, 0] in (0.0, 4.0)
        assert f.grid.max() == pytest.approx(4.0)

    def test_material_roughness(self, rng):
        d = DepthMap(values=rng.random((4, 4)), valid_mask=np.ones((4, 4), dtype=bool))
        assert lift_to_heightfield(d, roughness=0.8).material.roughness == 0.8


def test_default_depth_scale():
    assert default_depth_scale(100) == pytest.approx(35.0)
    assert default_depth_scale(100, cell_size=2.0) == pytest.approx(70.0)


class TestBuildCondition:
    def test_display_state_default(self, rng):
        d = DepthMap(values=rng.random((16, 16)), valid_mask=np.ones((16, 16), dtype=bool))
        f = lift_to_heightfield(d, depth_scale=default_depth_scale(16))
        light = LightProbe(kind="point", position=(8.0, 8.0, 20.0), intensity=800.0)
        cond = build_condition(f, [light])
        assert cond.tonemap_state == "display"
        assert 0.0 <= cond.pixels.min() and cond.pixels.max() <= 1.0
        linear = build_condition(f, [light], display=False)
        assert linear.tonemap_state == "linear"


class TestEdgeCondition:
    def test_range_and_flat_input(self, rng):
        cond = rng.random((32, 32))
        albedo = rng.random((32, 32, 3))
        edge = build_edge_condition(cond, albedo)
        assert edge.pixels.shape == (32, 32)
        assert edge.pixels.min() >= 0.0 and edge.pixels.max() <= 1.0
        flat = build_edge_condition(np.full((32, 32), 0.5), np.full((32, 32, 3), 0.25))
        assert np.all(flat.pixels == 0.0)

    def test_albedo_resampled(self, rng):
        edge = build_edge_condition(rng.random((32, 32)), rng.random((16, 16, 3)))
        assert edge.pixels.shape == (32, 32)

    def test_step_edge_detected(self):
        cond = np.zeros((32, 32))
        cond[:, 16:] = 1.0
        edge = build_edge_condition(cond, np.full((32, 32, 3), 0.5), EdgeConfig(sigma=1.0))
        assert edge.pixels.sum() > 0


class TestLightSpecFile:
    def test_parse_point(self):
        spec = LightSpecFile.parse({"lights": [{"kind": "point", "position": [1, 2, 3]}], "roughness": 0.3})
        assert spec.lights[0].kind == "point"
        assert spec.lights[0].position == (1, 2, 3)
        assert spec.lights[0].intensity == 1.0
        assert spec.roughness == 0.3
        assert spec.depth_scale is None

    def test_parse_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown light kind"):
            LightSpecFile.parse({"lights": [{"kind": "laser", "position": [0, 0, 0]}]})

    def test_parse_environment_with_image(self, tmp_path, rng):
        img_path = tmp_path / "env.png"
        save_png8(img_path, rng.random((8, 16)))
        spec_path = tmp_path / "lights.json"
        spec_path.write_text(json.dumps({"lights": [{"kind": "environment", "intensity": 2.0, "image": "env.png"}]}))
        spec = LightSpecFile.load(spec_path)
        assert spec.lights[0].kind == "environment"
        assert spec.lights[0].env_image.shape == (8, 16)
        assert spec.lights[0].intensity == 2.0


class TestConditionFromImage:
    def test_full_pipeline(self, image):
        spec = LightSpecFile(lights=[LightProbe(kind="point", position=(16.0, 16.0, 20.0), intensity=800.0)])
        cfg = RenderConfig(resolution=(32, 32), samples_per_pixel=1)
        cond, edge = condition_from_image(image, spec, render_cfg=cfg)
        assert cond.pixels.shape == (32, 32)
        assert cond.tonemap_state == "display"
        assert edge.pixels.shape == (32, 32)
        assert 0.0 <= edge.pixels.min() and edge.pixels.max() <= 1.0

    def test_unknown_albedo_backend(self, image):
        spec = LightSpecFile(lights=[LightProbe(kind="point", position=(16.0, 16.0, 20.0), intensity=1.0)])
        with pytest.raises(ModelUnavailable):
            condition_from_image(image, spec, albedo_backend="intrinsics")

    def test_deterministic(self, image):
        spec = LightSpecFile(lights=[LightProbe(kind="point", position=(10.0, 20.0, 15.0), intensity=500.0)])
        a, _ = condition_from_image(image, spec)
        b, _ = condition_from_image(image, spec)
        assert np.array_equal(a.pixels, b.pixels)
