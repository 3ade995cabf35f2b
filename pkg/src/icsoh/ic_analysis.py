"""Incremental-capacity curves and the fixed-voltage health indicators.

A constant-current charge segment is mapped to cumulative charge on a uniform
voltage grid, differentiated to dQ/dV, smoothed, and sampled at eleven fixed
voltages between 3.80 V and 4.10 V.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .dataset_io import ChargeSegment
from .errors import (
    DegenerateVoltageRange,
    GridDoesNotCoverWindow,
    InvalidSample,
    KernelTooLong,
    WindowTooLarge,
)

DEFAULT_DV_V = 1e-3
FEATURE_WINDOW = (3.80, 4.10, 0.03)
N_FEATURES = 11
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class FilterConfig:
    method: Literal["gaussian", "moving_average"] = "gaussian"
    window_N: int = 10
    kernel_len: int = 17
    sigma_samples: float = 5.0

    def __post_init__(self):
        if self.method not in ("gaussian", "moving_average"):
            raise ValueError(f"unknown filter method {self.method!r}")
        if int(self.window_N) != self.window_N or self.window_N < 1:
            raise ValueError("window_N must be a positive integer")
        if int(self.kernel_len) != self.kernel_len or self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise ValueError("kernel_len must be an odd positive integer")
        if not self.sigma_samples > 0:
            raise ValueError("sigma_samples must be > 0")


@dataclass(frozen=True, eq=False)
class ICCurve:
    cycle_index: int
    voltage_grid_V: np.ndarray
    dq_dv_AhPerV: np.ndarray
    filter: Optional[FilterConfig] = None

    def __post_init__(self):
        v = np.array(self.voltage_grid_V, dtype=float)
        g = np.array(self.dq_dv_AhPerV, dtype=float)
        if v.shape != g.shape or v.ndim != 1:
            raise InvalidSample("voltage grid and dQ/dV must be 1-D and equally long")
        if v.size >= 2:
            steps = np.diff(v)
            if np.any(steps <= 0) or np.ptp(steps) > _GRID_EPS:
                raise InvalidSample("voltage grid must be strictly increasing with a uniform step")
        if not np.all(np.isfinite(g)):
            raise InvalidSample(f"cycle {self.cycle_index}: non-finite dQ/dV values")
        v.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "voltage_grid_V", v)
        object.__setattr__(self, "dq_dv_AhPerV", g)

    @property
    def smoothed(self) -> bool:
        return self.filter is not None

    @property
    def dv_V(self) -> float:
        return float(self.voltage_grid_V[1] - self.voltage_grid_V[0])


@dataclass(frozen=True, eq=False)
class HealthFeatureVector:
    cycle_index: int
    hpi: np.ndarray

    def __post_init__(self):
        h = np.array(self.hpi, dtype=float)
        if h.shape != (N_FEATURES,):
            raise InvalidSample(f"expected {N_FEATURES} health indicators, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise InvalidSample(f"cycle {self.cycle_index}: non-finite health indicator")
        h.setflags(write=False)
        object.__setattr__(self, "hpi", h)


def resample_capacity_on_voltage(seg: ChargeSegment, dv_V: float = DEFAULT_DV_V):
    """Cumulative charge on a uniform voltage grid.

    Charge is ``I * t / 3600`` with ``I`` the segment's setpoint. Voltage is
    rectified with a running maximum; samples that share a rectified voltage
    are merged by averaging their charge so that the interpolant is a function.

    Returns
    -------
    grid : ndarray
        Multiples of ``dv_V`` inside the rectified voltage span.
    q : ndarray
        Charge in Ah at each grid node.
    """
    if not dv_V > 0:
        raise ValueError("dv_V must be > 0")
    q = seg.cc_current_A * np.asarray(seg.time_s, dtype=float) / 3600.0
    v = np.maximum.accumulate(np.asarray(seg.voltage_V, dtype=float))
    span = v[-1] - v[0]
    if span < 10 * dv_V:
        raise DegenerateVoltageRange(span, 10 * dv_V)

    v_u, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    q_u = np.bincount(inverse, weights=q) / counts

    k0 = int(np.ceil(v_u[0] / dv_V - _GRID_EPS))
    k1 = int(np.floor(v_u[-1] / dv_V + _GRID_EPS))
    grid = np.arange(k0, k1 + 1) * dv_V
    return grid, np.interp(grid, v_u, q_u)


def compute_ic(seg: ChargeSegment, dv_V: float = DEFAULT_DV_V) -> ICCurve:
    """Raw dQ/dV by central differences (one-sided at the two ends)."""
    grid, q = resample_capacity_on_voltage(seg, dv_V)
    return ICCurve(seg.cycle_index, grid, np.gradient(q, dv_V))


def moving_average(values, window_N: int) -> np.ndarray:
    """Trailing-window mean: ``out[i] = mean(values[i:i + N])``, length ``len - N + 1``."""
    x = np.asarray(values, dtype=float)
    if window_N < 1:
        raise ValueError("window_N must be >= 1")
    if window_N > x.size:
        raise WindowTooLarge(f"window {window_N} exceeds signal length {x.size}")
    return np.convolve(x, moving_average_weights(window_N), mode="valid")


def moving_average_weights(window_N: int) -> np.ndarray:
    return np.full(window_N, 1.0 / window_N)


def gaussian_kernel(kernel_len: int = 17, sigma_samples: float = 5.0) -> np.ndarray:
    """Normalized Gaussian taps at integer offsets ``-(L-1)/2 .. (L-1)/2``."""
    if kernel_len < 1 or kernel_len % 2 == 0:
        raise ValueError("kernel_len must be an odd positive integer")
    if not sigma_samples > 0:
        raise ValueError("sigma_samples must be > 0")
    half = (kernel_len - 1) // 2
    j = np.arange(-half, half + 1, dtype=float)
    w = np.exp(-(j**2) / (2.0 * sigma_samples**2))
    return w / w.sum()


def gaussian_smooth(values, cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Gaussian-weighted average of each sample's neighbours.

    Near the ends the kernel is truncated to the available samples and
    renormalized, so the output has the input's length and constants pass
    through unchanged.
    """
    x = np.asarray(values, dtype=float)
    if cfg.kernel_len > x.size:
        raise KernelTooLong(f"kernel of {cfg.kernel_len} taps exceeds signal length {x.size}")
    w = gaussian_kernel(cfg.kernel_len, cfg.sigma_samples)
    half = (cfg.kernel_len - 1) // 2
    n = x.size
    # x[i] + sum_j w_j (x[i+j] - x[i]) / sum_j w_j: same weights, but constants come out bit-exact
    acc = np.zeros(n)
    den = np.zeros(n)
    for j in range(-half, half + 1):
        lo, hi = max(0, -j), min(n, n - j)
        acc[lo:hi] += w[j + half] * (x[lo + j : hi + j] - x[lo:hi])
        den[lo:hi] += w[j + half]
    return x + acc / den


def smooth_curve(curve: ICCurve, cfg: FilterConfig = FilterConfig()) -> ICCurve:
    """Apply ``cfg`` to a curve. Moving average drops the last ``N - 1`` grid nodes."""
    if cfg.method == "gaussian":
        return ICCurve(curve.cycle_index, curve.voltage_grid_V, gaussian_smooth(curve.dq_dv_AhPerV, cfg), cfg)
    smoothed = moving_average(curve.dq_dv_AhPerV, cfg.window_N)
    return ICCurve(curve.cycle_index, curve.voltage_grid_V[: smoothed.size], smoothed, cfg)


def feature_voltages(window=FEATURE_WINDOW) -> np.ndarray:
    start, stop, step = window
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def extract_features(curve: ICCurve, window=FEATURE_WINDOW) -> HealthFeatureVector:
    """Linearly interpolate dQ/dV at the eleven window voltages."""
    volts = feature_voltages(window)
    v = curve.voltage_grid_V
    if v.size < 2 or v[0] > volts[0] + _GRID_EPS or v[-1] < volts[-1] - _GRID_EPS:
        covered = (float(v[0]), float(v[-1])) if v.size else (float("nan"), float("nan"))
        raise GridDoesNotCoverWindow(covered, (float(volts[0]), float(volts[-1])))
    return HealthFeatureVector(curve.cycle_index, np.interp(volts, v, curve.dq_dv_AhPerV))


def cycle_features(
    seg: ChargeSegment,
    cfg: FilterConfig = FilterConfig(),
    dv_V: float = DEFAULT_DV_V,
    window=FEATURE_WINDOW,
) -> HealthFeatureVector:
    """Segment -> raw IC -> smoothed IC -> health indicators."""
    return extract_features(smooth_curve(compute_ic(seg, dv_V), cfg), window)
