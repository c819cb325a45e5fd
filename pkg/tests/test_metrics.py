import numpy as np
import pytest

from practilight.metrics import (
    BACKEND_VERSIONS,
    DISTANCE_BACKENDS,
    BackendUnavailable,
    distance,
    l2_distance,
)

ALL_BACKENDS = tuple(DISTANCE_BACKENDS)


@pytest.fixture()
def pair(rng):
    return rng.random((48, 48, 3)), rng.random((48, 48, 3))


class TestRegistry:
    def test_expected_backends(self):
        assert set(ALL_BACKENDS) == {"l2", "lpips", "dreamsim_proxy", "dino", "clip"}

    def test_every_backend_has_pinned_version(self):
        assert set(BACKEND_VERSIONS) == set(ALL_BACKENDS)
        assert all(isinstance(v, str) and v for v in BACKEND_VERSIONS.values())

    def test_unknown_backend(self, pair):
        with pytest.raises(BackendUnavailable):
            distance("vgg", *pair)


class TestDistanceProperties:
    @pytest.mark.parametrize("name", ALL_BACKENDS)
    def test_self_distance_zero(self, name, pair):
        a, _ = pair
        assert distance(name, a, a) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("name", ALL_BACKENDS)
    def test_nonnegative_and_finite(self, name, pair):
        d = distance(name, *pair)
        assert np.isfinite(d) and d >= 0.0

    @pytest.mark.parametrize("name", ALL_BACKENDS)
    def test_deterministic(self, name, pair):
        assert distance(name, *pair) == distance(name, *pair)

    @pytest.mark.parametrize("name", ALL_BACKENDS)
    def test_grayscale_inputs_accepted(self, name, rng):
        a = rng.random((32, 32))
        b = rng.random((32, 32))
        assert np.isfinite(distance(name, a, b))

    @pytest.mark.parametrize("name", ALL_BACKENDS)
    def test_mixed_resolutions_accepted(self, name, rng):
        a = rng.random((64, 64, 3))
        b = rng.random((32, 32, 3))
        assert np.isfinite(distance(name, a, b))


class TestL2:
    def test_black_vs_white(self):
        assert l2_distance(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == pytest.approx(1.0)

    def test_monotone_in_perturbation(self, rng):
        a = np.full((16, 16, 3), 0.5)
        d_small = l2_distance(a, a + 0.1)
        d_large = l2_distance(a, a + 0.3)
        assert d_small < d_large
        assert d_small == pytest.approx(0.1)

    def test_values_clipped(self):
        # out-of-range inputs are clipped before comparison
        assert l2_distance(np.full((4, 4, 3), 2.0), np.ones((4, 4, 3))) == 0.0


class TestSensitivity:
    @pytest.mark.parametrize("name", ("lpips", "dreamsim_proxy", "dino"))
    def test_sensitive_to_luminance_structure(self, name):
        flat = np.full((64, 64, 3), 0.5)
        split = flat.copy()
        split[:, 32:] = 0.9
        assert distance(name, flat, split) > 0.0

    def test_clip_sensitive_to_color_shift(self):
        a = np.full((64, 64, 3), 0.4)
        b = a.copy()
        b[..., 0] = 0.8  # strong red shift
        assert distance("clip", a, b) > 0.0
