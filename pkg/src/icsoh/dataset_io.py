"""Loading, validation and segmentation of per-cycle battery test logs.

The on-disk contract is a long-format CSV with one row per logged sample::

    battery_id, cycle_index, phase, time_s, voltage_V, current_A, discharge_capacity_Ah

``phase`` is one of ``charge``, ``discharge`` or ``impedance``. The discharge
capacity is repeated on every row of a cycle, or supplied through a sidecar
CSV with columns ``cycle_index, discharge_capacity_Ah``. A JSON schema file
can rename columns and carry the battery metadata (see :class:`CsvSchema`).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from .errors import (
    EmptyDataset,
    InvalidSample,
    MissingColumn,
    NegativeCapacity,
    NonMonotonicTime,
    NonPositiveReference,
    SegmentTooShort,
    UnknownCycle,
)

logger = logging.getLogger(__name__)

STANDARD_COLUMNS = (
    "battery_id",
    "cycle_index",
    "phase",
    "time_s",
    "voltage_V",
    "current_A",
    "discharge_capacity_Ah",
)
PHASES = ("charge", "discharge", "impedance")
MIN_SEGMENT_SAMPLES = 20
VOLTAGE_WINDOW_V = (0.0, 10.0)


@dataclass(frozen=True)
class SamplePoint:
    time_s: float
    voltage_V: float
    current_A: float


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """All samples logged for one cycle, in file order.

    Samples are stored column-wise; ``phase`` tags each sample so that the
    charge portion can be segmented without discarding the rest of the log.
    """

    cycle_index: int
    time_s: np.ndarray
    voltage_V: np.ndarray
    current_A: np.ndarray
    phase: np.ndarray
    discharge_capacity_Ah: float

    def __post_init__(self):
        object.__setattr__(self, "time_s", _frozen(self.time_s))
        object.__setattr__(self, "voltage_V", _frozen(self.voltage_V))
        object.__setattr__(self, "current_A", _frozen(self.current_A))
        object.__setattr__(self, "phase", _frozen(self.phase, dtype=object))
        n = len(self.time_s)
        if not (len(self.voltage_V) == len(self.current_A) == len(self.phase) == n):
            raise InvalidSample(f"cycle {self.cycle_index}: sample columns differ in length")
        if not self.discharge_capacity_Ah > 0:
            raise NegativeCapacity(self.cycle_index)

    def __len__(self):
        return len(self.time_s)

    @property
    def samples(self) -> list[SamplePoint]:
        return [
            SamplePoint(float(t), float(v), float(i))
            for t, v, i in zip(self.time_s, self.voltage_V, self.current_A)
        ]

    def phase_mask(self, phase: str) -> np.ndarray:
        return self.phase == phase

    def __eq__(self, other):
        if not isinstance(other, CycleRecord):
            return NotImplemented
        return (
            self.cycle_index == other.cycle_index
            and self.discharge_capacity_Ah == other.discharge_capacity_Ah
            and np.array_equal(self.time_s, other.time_s)
            and np.array_equal(self.voltage_V, other.voltage_V)
            and np.array_equal(self.current_A, other.current_A)
            and list(self.phase) == list(other.phase)
        )


@dataclass(frozen=True)
class BatteryDataset:
    battery_id: str
    rated_capacity_Ah: float
    cc_current_A: float
    charge_cutoff_V: float
    cycles: tuple[CycleRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if not self.cycles:
            raise EmptyDataset()
        idx = [c.cycle_index for c in self.cycles]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidSample("cycle_index must be strictly increasing across the dataset")
        if not self.rated_capacity_Ah > 0:
            raise InvalidSample("rated_capacity_Ah must be > 0")

    def __iter__(self) -> Iterator[CycleRecord]:
        return iter(self.cycles)

    def __len__(self):
        return len(self.cycles)

    @property
    def n_samples(self) -> int:
        return sum(len(c) for c in self.cycles)

    def cycle(self, cycle_index: int) -> CycleRecord:
        for c in self.cycles:
            if c.cycle_index == cycle_index:
                return c
        raise UnknownCycle(cycle_index)


@dataclass(frozen=True, eq=False)
class ChargeSegment:
    """Contiguous constant-current portion of a cycle's charge phase."""

    cycle_index: int
    time_s: np.ndarray
    voltage_V: np.ndarray
    current_A: np.ndarray
    cc_current_A: float

    def __post_init__(self):
        object.__setattr__(self, "time_s", _frozen(self.time_s))
        object.__setattr__(self, "voltage_V", _frozen(self.voltage_V))
        object.__setattr__(self, "current_A", _frozen(self.current_A))
        if len(self.time_s) < MIN_SEGMENT_SAMPLES:
            raise SegmentTooShort(self.cycle_index, len(self.time_s), MIN_SEGMENT_SAMPLES)

    def __len__(self):
        return len(self.time_s)

    @property
    def samples(self) -> list[SamplePoint]:
        return [
            SamplePoint(float(t), float(v), float(i))
            for t, v, i in zip(self.time_s, self.voltage_V, self.current_A)
        ]


@dataclass
class CsvSchema:
    """Column mapping and battery metadata for :func:`load_dataset`.

    ``columns`` maps standard column names to the names used in the file.
    ``charge_sign`` is -1 for loggers that record charging current as negative.
    """

    columns: dict[str, str] = field(default_factory=dict)
    charge_sign: float = 1.0
    battery_id: Optional[str] = None
    rated_capacity_Ah: float = 2.0
    cc_current_A: float = 1.5
    charge_cutoff_V: float = 4.2
    capacity_sidecar: Optional[str] = None

    @classmethod
    def from_json(cls, path) -> "CsvSchema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSample(f"unknown schema keys: {sorted(unknown)}")
        schema = cls(**raw)
        if schema.charge_sign not in (1, -1, 1.0, -1.0):
            raise InvalidSample("charge_sign must be 1 or -1")
        return schema

    def source(self, name: str) -> str:
        return self.columns.get(name, name)


def load_dataset(path, schema: Optional[CsvSchema] = None) -> BatteryDataset:
    """Read and validate a battery log CSV.

    Raises
    ------
    MissingColumn, NonMonotonicTime, NegativeCapacity, EmptyDataset, InvalidSample
    """
    schema = schema or CsvSchema()
    path = Path(path)
    try:
        df = pd.read_csv(
            path,
            encoding="utf-8",
            float_precision="round_trip",
            dtype={schema.source("battery_id"): str, schema.source("phase"): str},
        )
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} is empty") from None

    required = [c for c in STANDARD_COLUMNS if c != "discharge_capacity_Ah"]
    if schema.capacity_sidecar is None:
        required.append("discharge_capacity_Ah")
    for name in required:
        if schema.source(name) not in df.columns:
            raise MissingColumn(schema.source(name))
    if df.empty:
        raise EmptyDataset(f"{path} has a header but no rows")
    df = df.rename(columns={schema.source(c): c for c in STANDARD_COLUMNS})

    if schema.capacity_sidecar is not None:
        sidecar = Path(schema.capacity_sidecar)
        if not sidecar.is_absolute():
            sidecar = path.parent / sidecar
        caps = pd.read_csv(sidecar, float_precision="round_trip")
        for name in ("cycle_index", "discharge_capacity_Ah"):
            if name not in caps.columns:
                raise MissingColumn(name)
        capacity_of = dict(zip(caps["cycle_index"].astype(int), caps["discharge_capacity_Ah"].astype(float)))
    else:
        capacity_of = None

    for name in ("time_s", "voltage_V", "current_A"):
        values = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=float)
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise InvalidSample(f"non-numeric or non-finite {name} at data row {bad + 1}")
        df[name] = values
    df["current_A"] = df["current_A"] * schema.charge_sign
    phases = df["phase"].astype(str).str.strip().str.lower()
    unknown = sorted(set(phases) - set(PHASES))
    if unknown:
        raise InvalidSample(f"unknown phase labels: {unknown}")
    df["phase"] = phases

    lo, hi = VOLTAGE_WINDOW_V
    bad_v = ~((df["voltage_V"] > lo) & (df["voltage_V"] < hi))
    if bad_v.any():
        row = int(np.flatnonzero(bad_v.to_numpy())[0])
        raise InvalidSample(f"voltage {df['voltage_V'].iloc[row]!r} outside {VOLTAGE_WINDOW_V} at data row {row + 1}")
    if (df["time_s"] < 0).any():
        raise InvalidSample("time_s must be non-negative")

    ids = df["battery_id"].dropna().unique()
    if len(ids) > 1:
        raise InvalidSample(f"file mixes several batteries: {sorted(map(str, ids))}")
    battery_id = schema.battery_id or (str(ids[0]) if len(ids) else path.stem)

    cycles = []
    for cycle_index, block in df.groupby("cycle_index", sort=True):
        cycle_index = int(cycle_index)
        for phase, sub in block.groupby("phase", sort=False):
            if np.any(np.diff(sub["time_s"].to_numpy()) <= 0):
                raise NonMonotonicTime(cycle_index, phase)
        if capacity_of is not None:
            if cycle_index not in capacity_of:
                raise MissingColumn(f"discharge_capacity_Ah (cycle {cycle_index} absent from sidecar)")
            capacity = capacity_of[cycle_index]
        else:
            caps = pd.to_numeric(block["discharge_capacity_Ah"], errors="coerce").to_numpy(dtype=float)
            if not np.all(caps == caps[0]):
                raise InvalidSample(f"cycle {cycle_index}: discharge_capacity_Ah differs between rows")
            capacity = float(caps[0])
        if not capacity > 0:
            raise NegativeCapacity(cycle_index)
        cycles.append(
            CycleRecord(
                cycle_index=cycle_index,
                time_s=block["time_s"].to_numpy(),
                voltage_V=block["voltage_V"].to_numpy(),
                current_A=block["current_A"].to_numpy(),
                phase=block["phase"].to_numpy(),
                discharge_capacity_Ah=capacity,
            )
        )

    return BatteryDataset(
        battery_id=battery_id,
        rated_capacity_Ah=float(schema.rated_capacity_Ah),
        cc_current_A=float(schema.cc_current_A),
        charge_cutoff_V=float(schema.charge_cutoff_V),
        cycles=tuple(cycles),
    )


def dataset_to_frame(ds: BatteryDataset) -> pd.DataFrame:
    frames = []
    for c in ds.cycles:
        n = len(c)
        frames.append(
            pd.DataFrame(
                {
                    "battery_id": [ds.battery_id] * n,
                    "cycle_index": np.full(n, c.cycle_index, dtype=int),
                    "phase": list(c.phase),
                    "time_s": c.time_s,
                    "voltage_V": c.voltage_V,
                    "current_A": c.current_A,
                    "discharge_capacity_Ah": np.full(n, c.discharge_capacity_Ah),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def write_dataset(ds: BatteryDataset, path) -> None:
    """Write ``ds`` in the standard CSV layout (charge-positive current)."""
    dataset_to_frame(ds).to_csv(path, index=False, encoding="utf-8")


def extract_cc_segment(
    cycle: CycleRecord,
    cc_current_A: float = 1.5,
    tolerance_A: float = 0.05,
    charge_cutoff_V: float = 4.2,
) -> ChargeSegment:
    """Longest contiguous run of charge samples within ``tolerance_A`` of the setpoint.

    The run is cut at the first sample whose voltage reaches ``charge_cutoff_V``;
    that sample is kept only if it does not overshoot the cutoff by more than 1 mV.
    """
    in_band = np.abs(cycle.current_A - cc_current_A) <= tolerance_A
    if np.any(cycle.phase != "charge"):
        in_band &= cycle.phase_mask("charge")

    best_start, best_len = 0, 0
    start = None
    for i, ok in enumerate(np.append(in_band, False)):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if i - start > best_len:
                best_start, best_len = start, i - start
            start = None
    stop = best_start + best_len

    v = cycle.voltage_V[best_start:stop]
    reached = np.flatnonzero(v >= charge_cutoff_V)
    if reached.size:
        k = int(reached[0])
        stop = best_start + k + (1 if v[k] <= charge_cutoff_V + 1e-3 else 0)

    if stop - best_start < MIN_SEGMENT_SAMPLES:
        raise SegmentTooShort(cycle.cycle_index, stop - best_start, MIN_SEGMENT_SAMPLES)
    sl = slice(best_start, stop)
    return ChargeSegment(
        cycle_index=cycle.cycle_index,
        time_s=cycle.time_s[sl],
        voltage_V=cycle.voltage_V[sl],
        current_A=cycle.current_A[sl],
        cc_current_A=cc_current_A,
    )


def compute_soh(cycle: CycleRecord, q_ref_Ah: float) -> float:
    """Discharge capacity over the reference capacity. Not clamped: regeneration can exceed 1."""
    if not q_ref_Ah > 0:
        raise NonPositiveReference(q_ref_Ah)
    return cycle.discharge_capacity_Ah / q_ref_Ah
