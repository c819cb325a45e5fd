import math

import numpy as np
import pytest

from practilight.render.core import (
    ALL_PASSES,
    F0,
    PASS_BEAUTY,
    PASS_DIFFUSE,
    PASS_SPECULAR,
    CompiledScene,
    DegenerateGeometry,
    IrradianceMap,
    RenderConfig,
    RenderError,
    ShapeMismatch,
    compose_direct_irradiance,
    ggx_brdf,
    linear_to_display,
    render,
)
from practilight.render.heightfield import (
    HeightField,
    HeightFieldError,
    render_heightfield_condition,
)
from practilight.scene import CameraSpec, GGXMaterial, LightProbe, PrimitiveInstance, SceneSpec


def floor_scene(lights, objects=()):
    """Orthographic top-down view of the floor of a 4m room."""
    return SceneSpec(
        room=((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0)),
        objects=list(objects),
        lights=lights,
        camera=CameraSpec(
            kind="orthographic", position=(0.0, 0.0, 1.0), look_at=(0.0, 0.0, -1.0),
            up=(0.0, 1.0, 0.0), ortho_extent=1.0,
        ),
    )


def pixel_centers(width, height, extent=1.0):
    """World (x, y) of each pixel's floor hit for the floor_scene camera."""
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    u = (j + 0.5) / width * 2.0 - 1.0
    v = 1.0 - (i + 0.5) / height * 2.0
    return u * extent, v * extent


DIRECT_CFG = RenderConfig(resolution=(16, 16), passes=(PASS_DIFFUSE, PASS_SPECULAR), samples_per_pixel=1)


class TestRenderConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(RenderError):
            RenderConfig(resolution=(0, 4))
        with pytest.raises(RenderError):
            RenderConfig(samples_per_pixel=0)
        with pytest.raises(RenderError):
            RenderConfig(shadow_epsilon=0.0)
        with pytest.raises(RenderError):
            RenderConfig(passes=("albedo",))


class TestLinearToDisplay:
    def test_p99_maps_to_srgb_095(self):
        img = np.linspace(0.0, 1.0, 10000).reshape(100, 100)
        out = linear_to_display(img)
        p99 = np.percentile(img, 99.0)
        idx = np.unravel_index(np.argmin(np.abs(img - p99)), img.shape)
        expected = 1.055 * 0.95 ** (1 / 2.4) - 0.055
        assert out[idx] == pytest.approx(expected, rel=1e-3)

    def test_range_and_monotone(self):
        img = np.random.default_rng(0).random((32, 32))
        out = linear_to_display(img)
        assert out.min() >= 0.0 and out.max() <= 1.0
        flat_in = np.sort(img.ravel())
        flat_out = np.sort(out.ravel())
        assert np.all(np.diff(linear_to_display(flat_in)) >= -1e-12)
        np.testing.assert_allclose(np.sort(out.ravel()), flat_out)

    def test_black_image(self):
        assert linear_to_display(np.zeros((4, 4))).max() == 0.0


class TestComposeDirectIrradiance:
    def test_pixelwise_sum_exact(self, rng):
        a = IrradianceMap.wrap(rng.random((8, 8, 3)))
        b = IrradianceMap.wrap(rng.random((8, 8, 3)))
        out = compose_direct_irradiance(a, b)
        assert np.array_equal(out.pixels, a.pixels + b.pixels)
        assert out.tonemap_state == "linear"

    def test_shape_mismatch(self, rng):
        a = IrradianceMap.wrap(rng.random((8, 8, 3)))
        b = IrradianceMap.wrap(rng.random((4, 4, 3)))
        with pytest.raises(ShapeMismatch):
            compose_direct_irradiance(a, b)

    def test_requires_linear_state(self, rng):
        a = IrradianceMap.wrap(rng.random((4, 4, 3)))
        b = IrradianceMap.wrap(rng.random((4, 4, 3)), state="display")
        with pytest.raises(RenderError):
            compose_direct_irradiance(a, b)


class TestGGXBrdf:
    def test_diffuse_floor_value(self):
        n = np.array([0.0, 0.0, 1.0])
        w = np.array([0.0, 0.0, 1.0])
        mat = GGXMaterial(roughness=1.0, albedo=(0.6, 0.6, 0.6))
        val = ggx_brdf(n, w, w, mat)
        diffuse = (1.0 - F0) * 0.6 / math.pi
        assert np.all(val >= diffuse)  # specular adds on top

    def test_below_hemisphere_raises(self):
        n = np.array([0.0, 0.0, 1.0])
        up = np.array([0.0, 0.0, 1.0])
        down = np.array([0.0, 0.0, -1.0])
        with pytest.raises(DegenerateGeometry):
            ggx_brdf(n, down, up, GGXMaterial())


class TestDirectLightingOracle:
    def test_lambertian_point_light(self):
        """direct_diffuse matches (1-F0) * albedo/pi * I cos(theta)/d^2 analytically."""
        intensity = 10.0
        scene = floor_scene([LightProbe(kind="point", position=(0.0, 0.0, 1.0), intensity=intensity)])
        out = render(scene, cfg=DIRECT_CFG)
        diff = out[PASS_DIFFUSE].pixels
        x, y = pixel_centers(16, 16)
        dz = 3.0  # light z=1 to floor z=-2
        d2 = x * x + y * y + dz * dz
        cos = dz / np.sqrt(d2)
        e = intensity * cos / d2
        albedo = 0.7  # default room material
        expected = (1.0 - F0) * albedo / math.pi * e
        np.testing.assert_allclose(diff[..., 0], expected, rtol=1e-3)
        np.testing.assert_allclose(diff[..., 1], diff[..., 0])

    def test_superposition(self):
        l1 = LightProbe(kind="point", position=(0.5, 0.3, 1.0), intensity=5.0)
        l2 = LightProbe(kind="point", position=(-0.4, 0.0, 0.5), intensity=2.0)
        both = render(floor_scene([l1, l2]), cfg=DIRECT_CFG)
        a = render(floor_scene([l1]), cfg=DIRECT_CFG)
        b = render(floor_scene([l2]), cfg=DIRECT_CFG)
        for p in (PASS_DIFFUSE, PASS_SPECULAR):
            np.testing.assert_allclose(both[p].pixels, a[p].pixels + b[p].pixels, atol=1e-5)

    def test_intensity_scaling(self):
        base = render(
            floor_scene([LightProbe(kind="point", position=(0.2, 0.1, 0.8), intensity=3.0)]),
            cfg=DIRECT_CFG,
        )
        doubled = render(
            floor_scene([LightProbe(kind="point", position=(0.2, 0.1, 0.8), intensity=6.0)]),
            cfg=DIRECT_CFG,
        )
        for p in (PASS_DIFFUSE, PASS_SPECULAR):
            # power-of-two scaling is exact in floating point
            assert np.array_equal(doubled[p].pixels, 2.0 * base[p].pixels)

    def test_occluded_pixels_exactly_zero(self):
        light = LightProbe(kind="point", position=(0.0, 0.0, 1.5), intensity=10.0)
        sphere = PrimitiveInstance(
            kind="sphere", position=(0.0, 0.0, -1.0), rotation=(0, 0, 0), scale=(0.4, 0.4, 0.4)
        )
        clear = render(floor_scene([light]), cfg=DIRECT_CFG)[PASS_DIFFUSE].pixels
        shadowed = render(floor_scene([light], [sphere]), cfg=DIRECT_CFG)[PASS_DIFFUSE].pixels
        in_shadow = (shadowed[..., 0] == 0.0) & (clear[..., 0] > 0.0)
        assert in_shadow.any()
        assert np.all(shadowed[in_shadow] == 0.0)

    def test_direct_passes_independent_of_spp(self):
        scene = floor_scene([LightProbe(kind="point", position=(0, 0, 1), intensity=4.0)])
        a = render(scene, cfg=RenderConfig(resolution=(8, 8), passes=(PASS_DIFFUSE,), samples_per_pixel=1))
        b = render(scene, cfg=RenderConfig(resolution=(8, 8), passes=(PASS_DIFFUSE,), samples_per_pixel=8))
        assert np.array_equal(a[PASS_DIFFUSE].pixels, b[PASS_DIFFUSE].pixels)


class TestBeautyPass:
    def test_all_passes_rendered_and_finite(self):
        scene = floor_scene([LightProbe(kind="point", position=(0, 0, 1), intensity=4.0)])
        cfg = RenderConfig(resolution=(8, 8), samples_per_pixel=2, max_bounces=2)
        out = render(scene, cfg=cfg)
        assert set(out) == set(ALL_PASSES)
        for img in out.values():
            assert np.isfinite(img.pixels).all()
            assert img.pixels.min() >= 0.0
        # beauty includes at least the direct contribution on average
        assert out[PASS_BEAUTY].pixels.mean() > 0.0

    def test_deterministic_for_seed(self):
        scene = floor_scene([LightProbe(kind="point", position=(0, 0, 1), intensity=4.0)])
        cfg = RenderConfig(resolution=(8, 8), samples_per_pixel=2, rng_seed=3)
        a = render(scene, cfg=cfg)[PASS_BEAUTY].pixels
        b = render(scene, cfg=cfg)[PASS_BEAUTY].pixels
        assert np.array_equal(a, b)

    def test_environment_light(self):
        scene = floor_scene([LightProbe(kind="environment", intensity=1.0)])
        cfg = RenderConfig(resolution=(8, 8), passes=(PASS_DIFFUSE,), samples_per_pixel=1, env_samples=16)
        out = render(scene, cfg=cfg)
        assert out[PASS_DIFFUSE].pixels.mean() > 0.0


class TestCompiledScene:
    def test_validates_on_compile(self):
        bad = floor_scene([LightProbe(kind="point", position=(0, 0, 9.0), intensity=1.0)])
        with pytest.raises(Exception):
            CompiledScene(bad)

    def test_sphere_hit_distance(self):
        scene = floor_scene(
            [LightProbe(kind="point", position=(0, 0, 1), intensity=1.0)],
            [PrimitiveInstance(kind="sphere", position=(0, 0, -1.0), rotation=(0, 0, 0), scale=(0.4,) * 3)],
        )
        comp = CompiledScene(scene)
        o = np.array([[0.0, 0.0, 1.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t, n, pid = comp.intersect(o, d)
        assert pid[0] == 0
        assert t[0] == pytest.approx(1.6, rel=1e-9)  # z=1 down to sphere top z=-0.6
        np.testing.assert_allclose(n[0], [0, 0, 1], atol=1e-9)


class TestHeightField:
    def test_validation(self):
        with pytest.raises(HeightFieldError):
            HeightField(grid=np.array([[0.0, np.nan]]))
        with pytest.raises(HeightFieldError):
            HeightField(grid=np.zeros((2, 2)), cell_size=0.0)

    def test_points_and_normals_flat(self):
        f = HeightField(grid=np.zeros((4, 4)), cell_size=2.0)
        pts = f.points()
        assert pts.shape == (4, 4, 3)
        np.testing.assert_allclose(pts[0, 0], [1.0, 1.0, 0.0])
        np.testing.assert_allclose(f.normals(), np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)))

    def test_normals_slope(self):
        grid = np.tile(np.arange(4, dtype=float), (4, 1))  # z = x
        n = HeightField(grid=grid).normals()
        expected = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0)
        np.testing.assert_allclose(n[1, 1], expected, atol=1e-12)

    def test_sample_height(self):
        f = HeightField(grid=np.array([[0.0, 1.0], [2.0, 3.0]]))
        # cell centers are at 0.5, 1.5; midpoint interpolates all four
        assert f.sample_height(np.array([1.0]), np.array([1.0]))[0] == pytest.approx(1.5)
        assert f.sample_height(np.array([-1.0]), np.array([0.5]))[0] == -np.inf

    def test_point_light_symmetry(self):
        f = HeightField(grid=np.zeros((9, 9)))
        light = LightProbe(kind="point", position=(4.5, 4.5, 10.0), intensity=100.0)
        out = render_heightfield_condition(f, [light]).pixels
        assert out.shape == (9, 9)
        assert out.min() > 0.0
        np.testing.assert_allclose(out, out[::-1, :], rtol=1e-9)
        np.testing.assert_allclose(out, out[:, ::-1], rtol=1e-9)
        assert out[4, 4] == out.max()

    def test_ridge_casts_shadow(self):
        grid = np.zeros((8, 16))
        grid[:, 8] = 50.0  # tall wall
        f = HeightField(grid=grid)
        light = LightProbe(kind="point", position=(1.0, 4.0, 3.0), intensity=50.0)
        out = render_heightfield_condition(f, [light]).pixels
        assert out[:, :7].min() > 0.0  # lit side
        assert np.all(out[:, 10:] == 0.0)  # behind the wall

    def test_environment_light_flat(self):
        f = HeightField(grid=np.zeros((6, 6)))
        out = render_heightfield_condition(
            f, [LightProbe(kind="environment", intensity=1.0)],
            cfg=RenderConfig(resolution=(6, 6), env_samples=32),
        ).pixels
        assert out.min() > 0.0
        # uniform sky over a flat plane is uniform
        np.testing.assert_allclose(out, out[0, 0], rtol=1e-9)
