"""Synthetic CC-CV aging data with a known SOH trajectory.

The generator builds each cycle's charge curve from an incremental-capacity
profile rather than from a voltage model, so the ground truth of the IC
pipeline is explicit:

* SOH follows ``1 - 0.30 * (c / (n - 1)) ** 0.85`` from 1.00 to 0.70, plus five
  capacity-regeneration bumps (``+bump * exp(-(c - c_k) / 4)`` for ``c >= c_k``).
* The IC profile on [3.45, 4.20] V is a logistic step at 3.8 V plus two
  Gaussian peaks (3.87 V and 4.00 V). Everything above the step is scaled by
  ``1 - 1.9 * (1 - SOH)`` while the part below it does not age, so the IC mass
  inside 3.8-4.1 V shrinks monotonically with SOH and the CC charge gets
  shorter as the cell ages.
* Charge ``Q(V)`` is the running integral of the profile; a 1.5 A CC phase
  maps it to ``t(V) = 3600 Q(V) / I``. Voltage is sampled every ``dt_s``
  seconds (1 s by default) and perturbed with Gaussian noise (0.5 mV std).
* Each cycle also logs a short rest, a CV taper at 4.2 V, and a 2 A discharge
  whose capacity is ``rated * SOH``, optionally with relative noise.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dataset_io import BatteryDataset, CycleRecord

V_START = 3.45
V_CUTOFF = 4.2
DEFAULT_BUMPS = (22, 48, 79, 113, 141)


def soh_trajectory(
    n_cycles: int = 170, bumps=DEFAULT_BUMPS, bump_height: float = 0.02, shape: float = 0.85
) -> np.ndarray:
    c = np.arange(n_cycles, dtype=float)
    soh = 1.0 - 0.30 * (c / (n_cycles - 1)) ** shape
    for ck in bumps:
        after = c >= ck
        soh[after] += bump_height * np.exp(-(c[after] - ck) / 4.0)
    return soh


def ic_profile(v: np.ndarray, soh: float, window_gain: float = 1.9) -> np.ndarray:
    """Incremental capacity in Ah/V of a cell at the given SOH.

    Below 3.8 V the profile does not age; above it every component is scaled by
    ``1 - window_gain * (1 - soh)``.
    """
    g = 1.0 - window_gain * (1.0 - soh)
    low = 0.55 / (1.0 + np.exp((v - 3.80) / 0.01))
    high = 0.9 / (1.0 + np.exp(-(v - 3.80) / 0.01))
    peak1 = 3.0 * np.exp(-0.5 * ((v - 3.87) / 0.035) ** 2)
    peak2 = 2.0 * np.exp(-0.5 * ((v - 4.00) / 0.05) ** 2)
    return low + g * (high + peak1 + peak2)


def charge_curve(soh: float, cc_current_A: float = 1.5, dt_s: float = 1.0, resolution_V: float = 1e-5):
    """Noise-free CC charge from ``V_START`` to the cutoff: returns ``(time_s, voltage_V)``."""
    v = np.arange(V_START, V_CUTOFF + resolution_V / 2, resolution_V)
    ic = ic_profile(v, soh)
    q = np.concatenate(([0.0], np.cumsum(0.5 * (ic[1:] + ic[:-1]) * np.diff(v))))
    t_end = 3600.0 * q[-1] / cc_current_A
    t = np.arange(0.0, t_end, dt_s)
    return t, np.interp(t * cc_current_A / 3600.0, q, v)


def synthetic_cycle(
    cycle_index: int,
    soh: float,
    rng: np.random.Generator,
    rated_capacity_Ah: float = 2.0,
    cc_current_A: float = 1.5,
    noise_V: float = 5e-4,
    dt_s: float = 1.0,
) -> CycleRecord:
    rest_t = np.arange(0.0, 10.0, dt_s)
    t_cc, v_cc = charge_curve(soh, cc_current_A, dt_s)
    t_cc = t_cc + rest_t[-1] + dt_s
    t_cv = t_cc[-1] + dt_s * np.arange(1, 41)
    i_cv = cc_current_A * np.exp(-np.arange(1, 41) / 8.0)

    t_dis = t_cv[-1] + 60.0 + 30.0 * np.arange(20)
    v_dis = np.linspace(4.15, 2.8, 20)

    time_s = np.concatenate((rest_t, t_cc, t_cv, t_dis))
    voltage = np.concatenate((np.full(rest_t.size, V_START - 0.02), v_cc, np.full(t_cv.size, V_CUTOFF), v_dis))
    n_charge = rest_t.size + t_cc.size + t_cv.size
    voltage[:n_charge] += rng.normal(0.0, noise_V, n_charge)
    current = np.concatenate((np.zeros(rest_t.size), np.full(t_cc.size, cc_current_A), i_cv, np.full(20, -2.0)))
    phase = np.array(["charge"] * n_charge + ["discharge"] * 20, dtype=object)
    return CycleRecord(
        cycle_index=cycle_index,
        time_s=time_s,
        voltage_V=voltage,
        current_A=current,
        phase=phase,
        discharge_capacity_Ah=rated_capacity_Ah * float(soh),
    )


def synthetic_dataset(
    n_cycles: int = 170,
    seed: int = 0,
    noise_V: float = 5e-4,
    capacity_noise: float = 0.0,
    dt_s: float = 1.0,
    rated_capacity_Ah: float = 2.0,
    battery_id: str = "SYN01",
) -> BatteryDataset:
    """Build a synthetic battery.

    ``capacity_noise`` is the relative std of the logged discharge capacity
    around ``rated * SOH``; the charge curves always follow the true SOH.
    """
    rng = np.random.default_rng(seed)
    soh = soh_trajectory(n_cycles)
    cycles = []
    for k, s in enumerate(soh):
        cycle = synthetic_cycle(k + 1, s, rng, rated_capacity_Ah=rated_capacity_Ah, noise_V=noise_V, dt_s=dt_s)
        if capacity_noise:
            cycle = replace(cycle, discharge_capacity_Ah=cycle.discharge_capacity_Ah * (1.0 + rng.normal(0.0, capacity_noise)))
        cycles.append(cycle)
    return BatteryDataset(battery_id, rated_capacity_Ah, 1.5, V_CUTOFF, tuple(cycles))
