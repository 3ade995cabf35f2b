import numpy as np
import pandas as pd
import pytest

from icsoh.dataset_io import CycleRecord


def make_cycle(cycle_index=1, n_cc=200, dt=10.0, v0=3.5, slope=1e-4, current=1.5, n_cv=30, capacity=2.0):
    """A CC ramp followed by a CV taper at 4.2 V and a short discharge."""
    t_cc = dt * np.arange(n_cc)
    v_cc = np.minimum(v0 + slope * t_cc, 4.2)
    t_cv = t_cc[-1] + dt * np.arange(1, n_cv + 1)
    t_dis = t_cv[-1] + dt * np.arange(1, 6)
    return CycleRecord(
        cycle_index=cycle_index,
        time_s=np.concatenate((t_cc, t_cv, t_dis)),
        voltage_V=np.concatenate((v_cc, np.full(n_cv, 4.2), np.linspace(4.0, 3.0, 5))),
        current_A=np.concatenate(
            (np.full(n_cc, current), current * np.exp(-np.arange(1, n_cv + 1) / 5.0), np.full(5, -2.0))
        ),
        phase=np.array(["charge"] * (n_cc + n_cv) + ["discharge"] * 5, dtype=object),
        discharge_capacity_Ah=capacity,
    )


def cycles_frame(n_cycles=3, battery_id="B1", **kw):
    rows = []
    for k in range(1, n_cycles + 1):
        c = make_cycle(k, capacity=2.0 - 0.05 * k, **kw)
        for t, v, i, p in zip(c.time_s, c.voltage_V, c.current_A, c.phase):
            rows.append((battery_id, k, p, t, v, i, c.discharge_capacity_Ah))
    return pd.DataFrame(
        rows,
        columns=["battery_id", "cycle_index", "phase", "time_s", "voltage_V", "current_A", "discharge_capacity_Ah"],
    )


@pytest.fixture
def three_cycle_csv(tmp_path):
    path = tmp_path / "b1.csv"
    cycles_frame(3).to_csv(path, index=False)
    return path


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion; ``ok=None`` marks it skipped."""

    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES.append((number, f"{status}  criterion {number}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
