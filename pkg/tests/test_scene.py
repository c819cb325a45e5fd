import math

import numpy as np
import pytest

from practilight.scene import (
    ROUGHNESS_MIN,
    CameraSpec,
    GGXMaterial,
    LightProbe,
    PrimitiveInstance,
    SceneError,
    SceneSpec,
    rotation_matrix,
    volume_contains_point,
    volumes_overlap,
)


def _simple_scene(objects=(), lights=None, room=((-2, -2, -2), (2, 2, 2))):
    return SceneSpec(
        room=room,
        objects=list(objects),
        lights=lights if lights is not None else [LightProbe(kind="point", position=(0, 0, 1))],
        camera=CameraSpec(position=(0, 0, 1.5), look_at=(0, 0, -1)),
    )


class TestGGXMaterial:
    def test_roughness_clamped_to_min(self):
        assert GGXMaterial(roughness=0.0).roughness == ROUGHNESS_MIN
        assert GGXMaterial(roughness=5.0).roughness == 1.0

    def test_albedo_clamped(self):
        m = GGXMaterial(albedo=(-1.0, 0.5, 2.0))
        assert m.albedo == (0.0, 0.5, 1.0)


class TestRotationMatrix:
    def test_identity(self):
        np.testing.assert_allclose(rotation_matrix((0, 0, 0)), np.eye(3), atol=1e-15)

    def test_orthonormal(self):
        R = rotation_matrix((0.3, -1.1, 2.4))
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)

    def test_single_axis(self):
        # rotation about z by 90 degrees maps x to y
        R = rotation_matrix((0, 0, math.pi / 2))
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_composition_order_zyx(self):
        e = (0.4, 0.7, 1.2)
        Rx = rotation_matrix((e[0], 0, 0))
        Ry = rotation_matrix((0, e[1], 0))
        Rz = rotation_matrix((0, 0, e[2]))
        np.testing.assert_allclose(rotation_matrix(e), Rz @ Ry @ Rx, atol=1e-12)


class TestPrimitiveInstance:
    def test_unknown_kind(self):
        with pytest.raises(SceneError):
            PrimitiveInstance(kind="torus", position=(0, 0, 0), rotation=(0, 0, 0), scale=(1, 1, 1))

    def test_nonpositive_scale(self):
        with pytest.raises(SceneError):
            PrimitiveInstance(kind="sphere", position=(0, 0, 0), rotation=(0, 0, 0), scale=(0, 1, 1))

    def test_sphere_and_cube_uniform_scale(self):
        s = PrimitiveInstance(kind="sphere", position=(0, 0, 0), rotation=(0, 0, 0), scale=(0.5, 9, 9))
        assert s.scale == (0.5, 0.5, 0.5)
        c = PrimitiveInstance(kind="cube", position=(0, 0, 0), rotation=(0, 0, 0), scale=(0.3, 9, 9))
        assert c.scale == (0.3, 0.3, 0.3)

    def test_bounding_volume_sphere(self):
        s = PrimitiveInstance(kind="sphere", position=(1, 2, 3), rotation=(0, 0, 0), scale=(0.5, 0.5, 0.5))
        kind, c, r = s.bounding_volume()
        assert kind == "sphere"
        np.testing.assert_allclose(c, [1, 2, 3])
        assert r == 0.5

    def test_bounding_volume_contains_rotated_corners(self):
        o = PrimitiveInstance(kind="cuboid", position=(0, 0, 0), rotation=(0.5, 0.9, 0.1), scale=(0.4, 0.2, 0.7))
        kind, lo, hi = o.bounding_volume()
        assert kind == "aabb"
        R = rotation_matrix(o.rotation)
        for sx in (-1, 1):
            for sy in (-1, 1):
                for sz in (-1, 1):
                    corner = R @ (np.array([sx, sy, sz]) * o.scale)
                    assert np.all(corner >= lo - 1e-12) and np.all(corner <= hi + 1e-12)


class TestVolumes:
    def test_sphere_sphere(self):
        a = ("sphere", np.zeros(3), 1.0)
        b = ("sphere", np.array([1.5, 0, 0]), 1.0)
        c = ("sphere", np.array([3.0, 0, 0]), 1.0)
        assert volumes_overlap(a, b)
        assert not volumes_overlap(a, c)

    def test_sphere_aabb(self):
        box = ("aabb", np.array([1.0, -1, -1]), np.array([2.0, 1, 1]))
        assert volumes_overlap(("sphere", np.zeros(3), 1.5), box)
        assert not volumes_overlap(("sphere", np.zeros(3), 0.5), box)

    def test_aabb_aabb(self):
        a = ("aabb", np.zeros(3), np.ones(3))
        b = ("aabb", np.full(3, 0.5), np.full(3, 1.5))
        c = ("aabb", np.full(3, 2.0), np.full(3, 3.0))
        assert volumes_overlap(a, b)
        assert not volumes_overlap(a, c)

    def test_contains_point(self):
        assert volume_contains_point(("sphere", np.zeros(3), 1.0), np.array([0.5, 0, 0]))
        assert not volume_contains_point(("sphere", np.zeros(3), 1.0), np.array([1.5, 0, 0]))
        box = ("aabb", np.zeros(3), np.ones(3))
        assert volume_contains_point(box, np.full(3, 0.5))
        assert not volume_contains_point(box, np.full(3, 1.5))


class TestLightProbe:
    def test_unknown_kind(self):
        with pytest.raises(SceneError):
            LightProbe(kind="area")

    def test_negative_intensity(self):
        with pytest.raises(SceneError):
            LightProbe(intensity=-1.0)


class TestCameraSpec:
    def test_validation(self):
        with pytest.raises(SceneError):
            CameraSpec(kind="fisheye")
        with pytest.raises(SceneError):
            CameraSpec(fov=0.0)
        with pytest.raises(SceneError):
            CameraSpec(kind="orthographic", ortho_extent=0.0)

    def test_basis_orthonormal(self):
        pos, right, up, fwd = CameraSpec(position=(1, 2, 3), look_at=(0, 0, 0)).basis()
        for v in (right, up, fwd):
            assert np.linalg.norm(v) == pytest.approx(1.0)
        assert abs(np.dot(right, fwd)) < 1e-12
        assert abs(np.dot(up, fwd)) < 1e-12


class TestSceneSpecValidation:
    def test_valid_scene_passes(self):
        obj = PrimitiveInstance(kind="sphere", position=(0, 0, 0), rotation=(0, 0, 0), scale=(0.5, 0.5, 0.5))
        _simple_scene([obj]).validate()

    def test_degenerate_room(self):
        with pytest.raises(SceneError):
            _simple_scene(room=((0, 0, 0), (0, 1, 1))).validate()

    def test_requires_light(self):
        with pytest.raises(SceneError):
            _simple_scene(lights=[]).validate()

    def test_object_outside_room(self):
        obj = PrimitiveInstance(kind="sphere", position=(1.9, 0, 0), rotation=(0, 0, 0), scale=(0.5, 0.5, 0.5))
        with pytest.raises(SceneError, match="inside room"):
            _simple_scene([obj]).validate()

    def test_overlapping_objects(self):
        a = PrimitiveInstance(kind="sphere", position=(0, 0, 0), rotation=(0, 0, 0), scale=(0.5,) * 3)
        b = PrimitiveInstance(kind="sphere", position=(0.4, 0, 0), rotation=(0, 0, 0), scale=(0.5,) * 3)
        with pytest.raises(SceneError, match="intersect"):
            _simple_scene([a, b]).validate()

    def test_light_outside_room(self):
        with pytest.raises(SceneError, match="outside room"):
            _simple_scene(lights=[LightProbe(kind="point", position=(0, 0, 5))]).validate()

    def test_light_inside_object(self):
        obj = PrimitiveInstance(kind="sphere", position=(0, 0, 1), rotation=(0, 0, 0), scale=(0.5,) * 3)
        with pytest.raises(SceneError, match="inside an object"):
            _simple_scene([obj]).validate()


class TestSerialization:
    def test_round_trip(self, tmp_path):
        obj = PrimitiveInstance(
            kind="cuboid", position=(0.1, -0.2, 0.3), rotation=(0.4, 0.5, 0.6),
            scale=(0.3, 0.2, 0.5), material=GGXMaterial(roughness=0.7, albedo=(0.1, 0.2, 0.3)),
        )
        spec = _simple_scene([obj])
        spec.seed = 42
        path = tmp_path / "scene.json"
        spec.save(path)
        loaded = SceneSpec.load(path)
        assert loaded.to_dict() == spec.to_dict()
        assert loaded.seed == 42
        assert loaded.objects[0].material.roughness == 0.7

    def test_unsupported_schema_version(self):
        d = _simple_scene().to_dict()
        d["schema_version"] = 99
        with pytest.raises(SceneError, match="schema_version"):
            SceneSpec.from_dict(d)
