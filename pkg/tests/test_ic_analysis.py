import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icsoh.dataset_io import ChargeSegment
from icsoh.errors import DegenerateVoltageRange, GridDoesNotCoverWindow, KernelTooLong, WindowTooLarge
from icsoh.ic_analysis import (
    FilterConfig,
    ICCurve,
    compute_ic,
    extract_features,
    feature_voltages,
    gaussian_kernel,
    gaussian_smooth,
    moving_average,
    moving_average_weights,
    resample_capacity_on_voltage,
    smooth_curve,
)

RAMP_SLOPE = 1e-4
I_CC = 1.5


def ramp_segment(t_end=6000.0, dt=1.0, current=I_CC, v0=3.5, slope=RAMP_SLOPE):
    t = np.arange(0.0, t_end + dt / 2, dt)
    return ChargeSegment(1, t, v0 + slope * t, np.full(t.size, current), current)


def piecewise_segment(knot_V=3.9, s1=1e-4, s2=2e-4, dt=1.0):
    t = np.arange(0.0, 6000.0, dt)
    t_knot = (knot_V - 3.5) / s1
    v = np.where(t <= t_knot, 3.5 + s1 * t, knot_V + s2 * (t - t_knot))
    keep = v <= 4.2
    return ChargeSegment(1, t[keep], v[keep], np.full(keep.sum(), I_CC), I_CC)


class TestResample:
    def test_ramp_matches_closed_form(self):
        grid, q = resample_capacity_on_voltage(ramp_segment(), 1e-3)
        t_of_v = (grid - 3.5) / RAMP_SLOPE
        np.testing.assert_allclose(q, I_CC * t_of_v / 3600.0, rtol=0, atol=1e-12)
        steps = np.diff(grid)
        assert np.ptp(steps) < 1e-9 and steps[0] == pytest.approx(1e-3, abs=1e-12)
        assert grid[0] == pytest.approx(3.5) and grid[-1] == pytest.approx(4.1)

    def test_grid_rounds_inward(self):
        seg = ramp_segment(v0=3.50037, t_end=5000)
        grid, _ = resample_capacity_on_voltage(seg, 1e-3)
        assert grid[0] == pytest.approx(3.501) and grid[-1] == pytest.approx(4.000, abs=1e-9)

    def test_constant_voltage(self):
        t = np.arange(100.0)
        seg = ChargeSegment(1, t, np.full(100, 3.7), np.full(100, 1.5), 1.5)
        with pytest.raises(DegenerateVoltageRange):
            resample_capacity_on_voltage(seg)

    def test_dip_is_rectified(self):
        clean = ramp_segment()
        v = clean.voltage_V.copy()
        v[2500] -= 0.004  # a 4 mV dip at one sample
        dipped = ChargeSegment(1, clean.time_s, v, clean.current_A, I_CC)
        g_clean, q_clean = resample_capacity_on_voltage(clean)
        g_dip, q_dip = resample_capacity_on_voltage(dipped)
        np.testing.assert_array_equal(g_dip, g_clean)
        # away from the dip the charge curve is untouched
        far = np.abs(g_clean - v[2499]) > 2e-3
        np.testing.assert_allclose(q_dip[far], q_clean[far], atol=1e-12)


class TestComputeIC:
    def test_ramp_plateau(self):
        curve = compute_ic(ramp_segment(), 1e-3)
        expected = I_CC / (RAMP_SLOPE * 3600.0)
        assert expected == pytest.approx(4.1666666666666667)
        assert np.max(np.abs(curve.dq_dv_AhPerV[1:-1] - expected)) < 1e-9
        assert curve.filter is None and not curve.smoothed

    def test_linear_in_current(self):
        a = compute_ic(ramp_segment(current=1.5))
        b = compute_ic(ramp_segment(current=3.0))
        np.testing.assert_array_equal(b.voltage_grid_V, a.voltage_grid_V)
        np.testing.assert_allclose(b.dq_dv_AhPerV, 2 * a.dq_dv_AhPerV, rtol=1e-12)

    def test_piecewise_plateaus(self):
        curve = compute_ic(piecewise_segment())
        v, g = curve.voltage_grid_V, curve.dq_dv_AhPerV
        below = (v < 3.9 - 1.5e-3) & (v > v[0] + 1e-4)
        above = (v > 3.9 + 1.5e-3) & (v < v[-1] - 1e-4)
        np.testing.assert_allclose(g[below], I_CC / (1e-4 * 3600), atol=1e-9)
        np.testing.assert_allclose(g[above], I_CC / (2e-4 * 3600), atol=1e-9)

    @given(st.integers(0, 2**31 - 1), st.floats(1e-4, 3e-3))
    @settings(max_examples=30, deadline=None)
    def test_charge_conservation(self, seed, noise):
        rng = np.random.default_rng(seed)
        seg = ramp_segment(t_end=3000.0)
        v = seg.voltage_V + rng.normal(0, noise, seg.voltage_V.size)
        seg = ChargeSegment(1, seg.time_s, v, seg.current_A, I_CC)
        grid, q = resample_capacity_on_voltage(seg)
        curve = compute_ic(seg)
        area = np.trapezoid(curve.dq_dv_AhPerV, curve.voltage_grid_V)
        assert abs(area - (q[-1] - q[0])) < 1e-6


class TestMovingAverage:
    def test_identity(self):
        x = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
        np.testing.assert_array_equal(moving_average(x, 1), x)

    def test_pairs(self):
        np.testing.assert_allclose(moving_average([1, 3, 5, 7], 2), [2, 4, 6])

    @pytest.mark.parametrize("n", [1, 3, 7, 10])
    def test_constant(self, n):
        out = moving_average(np.full(10, 2.5), n)
        assert out.size == 10 - n + 1
        np.testing.assert_allclose(out, 2.5, rtol=1e-15)

    def test_window_too_large(self):
        with pytest.raises(WindowTooLarge):
            moving_average([1.0, 2.0], 3)


def handwritten_kernel(length, sigma):
    half = (length - 1) // 2
    raw = [math.exp(-(j * j) / (2 * sigma * sigma)) for j in range(-half, half + 1)]
    total = math.fsum(raw)
    return [w / total for w in raw]


class TestGaussian:
    def test_weights_sum_to_one(self):
        assert abs(gaussian_kernel(17, 5.0).sum() - 1.0) < 1e-12

    def test_constant_preserved(self):
        x = np.full(50, 0.731)
        np.testing.assert_array_equal(gaussian_smooth(x, FilterConfig(kernel_len=17, sigma_samples=5)), x)

    def test_impulse_response(self):
        x = np.zeros(101)
        x[50] = 1.0
        out = gaussian_smooth(x, FilterConfig(kernel_len=17, sigma_samples=5.0))
        expected = np.zeros(101)
        expected[42:59] = handwritten_kernel(17, 5.0)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)

    def test_tiny_sigma_is_identity(self):
        x = np.random.default_rng(0).normal(size=80)
        out = gaussian_smooth(x, FilterConfig(kernel_len=17, sigma_samples=1e-6))
        assert np.max(np.abs(out - x)) < 1e-9

    def test_edges_renormalized(self):
        x = np.arange(30, dtype=float)
        out = gaussian_smooth(x, FilterConfig(kernel_len=5, sigma_samples=1.0))
        w = np.array(handwritten_kernel(5, 1.0))
        assert out[0] == pytest.approx((w[2] * 0 + w[3] * 1 + w[4] * 2) / w[2:].sum(), rel=1e-14)

    def test_kernel_too_long(self):
        with pytest.raises(KernelTooLong):
            gaussian_smooth(np.ones(10), FilterConfig(kernel_len=17))

    @given(arrays(float, st.integers(17, 200), elements=st.floats(-1e3, 1e3)))
    def test_range_bounded(self, x):
        out = gaussian_smooth(x)
        tol = 1e-9 * max(1.0, np.max(np.abs(x)))
        assert np.all(out >= x.min() - tol) and np.all(out <= x.max() + tol)

    @given(st.integers(0, 2**31 - 1), st.integers(1, 20))
    def test_shift_equivariant_in_interior(self, seed, shift):
        x = np.random.default_rng(seed).normal(size=120)
        a = gaussian_smooth(np.roll(x, shift))
        b = np.roll(gaussian_smooth(x), shift)
        interior = slice(8 + shift, 120 - 8)
        np.testing.assert_allclose(a[interior], b[interior], atol=1e-12)

    def test_wide_sigma_matches_uniform_weights(self):
        for n in (3, 9, 17):
            np.testing.assert_allclose(gaussian_kernel(n, 1e8), moving_average_weights(n), rtol=1e-12)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            FilterConfig(kernel_len=16)
        with pytest.raises(ValueError):
            FilterConfig(sigma_samples=0.0)
        with pytest.raises(ValueError):
            FilterConfig(window_N=0)


def flat_curve(value, lo=3.5, hi=4.2, dv=1e-3):
    n = int(round((hi - lo) / dv)) + 1
    v = lo + dv * np.arange(n)
    return ICCurve(1, v, np.full(n, value), FilterConfig())


class TestFeatures:
    def test_voltages(self):
        np.testing.assert_allclose(feature_voltages(), 3.80 + 0.03 * np.arange(11), atol=1e-12)

    def test_flat(self):
        hpi = extract_features(flat_curve(2.75)).hpi
        assert hpi.shape == (11,)
        np.testing.assert_allclose(hpi, 2.75, rtol=1e-15)

    def test_linear_is_exact(self):
        base = flat_curve(0.0)
        v = base.voltage_grid_V
        curve = ICCurve(1, v, 3.0 * v - 7.0, base.filter)
        np.testing.assert_allclose(extract_features(curve).hpi, 3.0 * feature_voltages() - 7.0, atol=1e-12)

    def test_short_grid(self):
        with pytest.raises(GridDoesNotCoverWindow) as err:
            extract_features(flat_curve(1.0, hi=4.05))
        assert err.value.covered[1] == pytest.approx(4.05)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**31 - 1))
    def test_affine_commutes(self, a, b, seed):
        base = flat_curve(0.0)
        g = np.random.default_rng(seed).uniform(0, 5, base.voltage_grid_V.size)
        f1 = extract_features(ICCurve(1, base.voltage_grid_V, g)).hpi
        f2 = extract_features(ICCurve(1, base.voltage_grid_V, a * g + b)).hpi
        np.testing.assert_allclose(f2, a * f1 + b, atol=1e-9)


def test_smooth_curve_moving_average_truncates_grid():
    curve = compute_ic(ramp_segment())
    ma = smooth_curve(curve, FilterConfig(method="moving_average", window_N=10))
    assert ma.voltage_grid_V.size == curve.voltage_grid_V.size - 9
    gs = smooth_curve(curve)
    assert gs.smoothed and gs.voltage_grid_V.size == curve.voltage_grid_V.size
