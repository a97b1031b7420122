import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochsr.errors import DomainError, ShapeError
from stochsr.transforms import (
    TransformSpec,
    canonicalize,
    downsample_coarse,
    forward_transform,
    gaussian_smooth,
    inverse_transform,
)

SPEC = TransformSpec(theta=0.17, x_min=math.log(0.1), x_max=math.log(100.0))


class TestForwardTransform:
    def test_empty_maps_to_zero(self):
        out = forward_transform(np.array([0.0, 0.0]), SPEC)
        assert np.all(out == 0.0)

    def test_endpoints(self):
        out = forward_transform(np.array([0.1, 100.0]), SPEC)
        assert out[0] == pytest.approx(SPEC.theta, abs=1e-12)
        assert out[1] == pytest.approx(1.0, abs=1e-12)

    def test_geometric_mean_maps_to_midpoint(self):
        out = forward_transform(np.array([math.sqrt(10.0)]), SPEC)
        assert out[0] == pytest.approx((SPEC.theta + 1.0) / 2.0, abs=1e-12)
        assert out[0] == pytest.approx(0.585, abs=1e-12)

    def test_clamping_beyond_range(self):
        out = forward_transform(np.array([1e-6, 1e6]), SPEC)
        assert out[0] == pytest.approx(SPEC.theta)
        assert out[1] == pytest.approx(1.0)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            forward_transform(np.array([-0.5]), SPEC)


class TestInverseTransform:
    def test_zero_is_empty(self):
        assert inverse_transform(np.array([0.0]), SPEC)[0] == 0.0

    def test_below_theta_is_empty(self):
        out = inverse_transform(np.array([0.01, 0.1699]), SPEC)
        assert np.all(out == 0.0)

    def test_theta_maps_to_lower_bound(self):
        out = inverse_transform(np.array([SPEC.theta]), SPEC)
        assert out[0] == pytest.approx(0.1, rel=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            inverse_transform(np.array([1.2]), SPEC)
        with pytest.raises(DomainError):
            inverse_transform(np.array([-0.1]), SPEC)

    @given(st.floats(min_value=0.1, max_value=100.0, allow_nan=False))
    def test_round_trip_on_detectable_range(self, r):
        back = inverse_transform(forward_transform(np.array([r]), SPEC), SPEC)
        assert back[0] == pytest.approx(r, rel=1e-6)


class TestDownsampleCoarse:
    def test_uniform_tile(self):
        hr = np.full((16, 16), 5.0)
        out = downsample_coarse(hr, 16, SPEC)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(forward_transform(np.array([5.0]), SPEC)[0])

    def test_subthreshold_mean_truncates_to_zero(self):
        # pick a tile mean whose unclamped transform lands at 0.1 < theta
        slope = (1.0 - SPEC.theta) / (SPEC.x_max - SPEC.x_min)
        x = SPEC.x_min + (0.1 - SPEC.theta) / slope
        mean = math.exp(x)
        hr = np.full((16, 16), mean)
        out = downsample_coarse(hr, 16, SPEC)
        assert out[0, 0] == 0.0

    def test_single_hot_pixel_reaches_theta(self):
        r_min = math.exp(SPEC.x_min)
        hr = np.zeros((16, 16))
        hr[3, 7] = 256.0 * r_min
        out = downsample_coarse(hr, 16, SPEC)
        assert out[0, 0] == pytest.approx(SPEC.theta, abs=1e-12)

    def test_non_divisible_dims_error_names_factor(self):
        with pytest.raises(ShapeError, match="16"):
            downsample_coarse(np.zeros((15, 16)), 16, SPEC)

    def test_4d_layout(self):
        hr = np.random.default_rng(0).uniform(0.0, 50.0, size=(3, 32, 32, 2))
        out = downsample_coarse(hr, 16, SPEC)
        assert out.shape == (3, 2, 2, 2)

    def test_rotation_commutes(self):
        rng = np.random.default_rng(1)
        hr = rng.uniform(0.0, 40.0, size=(32, 32))
        a = downsample_coarse(np.rot90(hr), 16, SPEC)
        b = np.rot90(downsample_coarse(hr, 16, SPEC))
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestGaussianSmooth:
    def test_sigma_zero_identity(self):
        field = np.random.default_rng(2).uniform(size=(4, 8, 8, 1))
        out = gaussian_smooth(field, 0.0)
        np.testing.assert_array_equal(out, field)

    def test_constant_preserved(self):
        out = gaussian_smooth(np.full((12, 12), 0.4), 1.5)
        np.testing.assert_allclose(out, 0.4, rtol=1e-12)

    def test_impulse_response_matches_kernel(self):
        # oracle: sampled Gaussian, radius = truncate * sigma with truncate 4
        sigma, radius = 1.0, 4
        xs = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * xs**2 / sigma**2)
        kernel /= kernel.sum()
        expected = np.outer(kernel, kernel)

        field = np.zeros((33, 33))
        field[16, 16] = 1.0
        out = gaussian_smooth(field, sigma)
        np.testing.assert_allclose(
            out[16 - radius : 16 + radius + 1, 16 - radius : 16 + radius + 1],
            expected,
            atol=1e-12,
        )
        assert out.sum() == pytest.approx(1.0, abs=1e-9)

    def test_negative_sigma_rejected(self):
        with pytest.raises(DomainError):
            gaussian_smooth(np.zeros((4, 4)), -1.0)


class TestCanonicalize:
    def test_truncates_below_theta(self):
        vals = np.array([0.0, 0.05, 0.1699, 0.17, 0.9], dtype=np.float32)
        out = canonicalize(vals, SPEC)
        np.testing.assert_array_equal(
            out, np.array([0.0, 0.0, 0.0, 0.17, 0.9], dtype=np.float32)
        )


@settings(max_examples=25, deadline=None)
@given(
    theta=st.floats(min_value=0.05, max_value=0.6),
    span=st.floats(min_value=0.5, max_value=8.0),
    lo=st.floats(min_value=-4.0, max_value=2.0),
)
def test_round_trip_property_for_arbitrary_specs(theta, span, lo):
    spec = TransformSpec(theta=theta, x_min=lo, x_max=lo + span)
    rng = np.random.default_rng(0)
    x = rng.uniform(lo, lo + span, size=64)
    r = np.exp(x)
    back = inverse_transform(forward_transform(r, spec), spec)
    np.testing.assert_allclose(back, r, rtol=1e-6)
