"""End-to-end experiment: features per cycle, split, GP fit, prediction, metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional, Sequence, Union

import numpy as np

from . import gpr
from .dataset_io import BatteryDataset, compute_soh, extract_cc_segment
from .errors import Empty, InputError, LengthMismatch, NotEnoughCycles
from .ic_analysis import DEFAULT_DV_V, FEATURE_WINDOW, FilterConfig, HealthFeatureVector, cycle_features

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "cycle_index",
    "true_soh",
    "predicted_soh",
    "variance",
    "ci_low",
    "ci_high",
    "in_training",
    "relative_error_pct",
)


@dataclass(frozen=True)
class FractionSplit:
    """First ``ceil(train_fraction * N)`` cycles train, the rest test."""

    train_fraction: float = 0.55

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class OffsetSplit:
    """Skip the first ``skip_cycles`` cycles, train on the next ``train_count``, test on the rest."""

    skip_cycles: int = 30
    train_count: int = 60

    def __post_init__(self):
        if self.skip_cycles < 0:
            raise ValueError("skip_cycles must be >= 0")
        if self.train_count < 2:
            raise ValueError("train_count must be >= 2")


Split = Union[FractionSplit, OffsetSplit]


@dataclass
class ExperimentConfig:
    split: Split = field(default_factory=FractionSplit)
    filter: FilterConfig = field(default_factory=FilterConfig)
    dv_V: float = DEFAULT_DV_V
    feature_window: tuple[float, float, float] = FEATURE_WINDOW
    q_ref_policy: Literal["first_train_cycle", "rated"] = "first_train_cycle"
    cc_tolerance_A: float = 0.05
    fit_config: gpr.FitConfig = field(default_factory=gpr.FitConfig)

    def __post_init__(self):
        if self.q_ref_policy not in ("first_train_cycle", "rated"):
            raise ValueError(f"unknown q_ref_policy {self.q_ref_policy!r}")

    def echo(self) -> dict:
        split = asdict(self.split)
        split["mode"] = "fraction" if isinstance(self.split, FractionSplit) else "offset"
        fc = self.fit_config
        return {
            "split": split,
            "filter": asdict(self.filter),
            "dv_V": self.dv_V,
            "feature_window": list(self.feature_window),
            "q_ref_policy": self.q_ref_policy,
            "cc_tolerance_A": self.cc_tolerance_A,
            "fit": {
                "restarts": fc.restarts,
                "seed": fc.seed,
                "max_iter": fc.max_iter,
                "ftol": fc.ftol,
                "gtol": fc.gtol,
            },
        }


def split_dataset(items: Sequence, cfg: Union[ExperimentConfig, Split]):
    """Order-preserving train/test partition of the retained per-cycle items."""
    split = cfg.split if isinstance(cfg, ExperimentConfig) else cfg
    items = list(items)
    n = len(items)
    if isinstance(split, FractionSplit):
        n_train = math.ceil(split.train_fraction * n - 1e-9)
        if n_train < 2 or n_train >= n:
            raise NotEnoughCycles(f"{n} cycles cannot be split at fraction {split.train_fraction}")
        return items[:n_train], items[n_train:]
    kept = items[split.skip_cycles :]
    if len(kept) <= split.train_count:
        raise NotEnoughCycles(
            f"{n} cycles: skipping {split.skip_cycles} leaves {len(kept)}, "
            f"need more than {split.train_count} for training plus testing"
        )
    return kept[: split.train_count], kept[split.train_count :]


def _paired(y_true, y_pred):
    a = np.asarray(y_true, dtype=float).reshape(-1)
    b = np.asarray(y_pred, dtype=float).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"{a.size} true values vs {b.size} predictions")
    if a.size == 0:
        raise Empty("no values to score")
    return a, b


def mae(y_true, y_pred) -> float:
    a, b = _paired(y_true, y_pred)
    return float(np.mean(np.abs(a - b)))


def rmse(y_true, y_pred) -> float:
    a, b = _paired(y_true, y_pred)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class ReportRow:
    cycle_index: int
    true_soh: float
    predicted_soh: float
    variance: float
    ci_low: float
    ci_high: float
    in_training: bool
    relative_error_pct: float


def ci_coverage(rows: Sequence[ReportRow]) -> float:
    """Fraction of rows whose true SOH lies inside [ci_low, ci_high]."""
    if not rows:
        raise Empty("no rows to score")
    inside = sum(1 for r in rows if r.ci_low <= r.true_soh <= r.ci_high)
    return inside / len(rows)


@dataclass(frozen=True)
class EvaluationReport:
    battery_id: str
    rows: tuple[ReportRow, ...]
    mae: float
    rmse: float
    ci_coverage_95: float
    train_mae: float
    train_rmse: float
    n_train: int
    n_test: int
    q_ref_Ah: float
    dropped: tuple[tuple[int, str], ...]
    hyperparameters: dict
    config: dict

    def __post_init__(self):
        if self.mae > self.rmse + 1e-12 or self.train_mae > self.train_rmse + 1e-12:
            raise AssertionError("mae exceeds rmse")
        if not 0.0 <= self.ci_coverage_95 <= 1.0:
            raise AssertionError("coverage outside [0, 1]")

    @property
    def test_rows(self):
        return [r for r in self.rows if not r.in_training]

    @property
    def train_rows(self):
        return [r for r in self.rows if r.in_training]

    def summary(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "ci_coverage_95": self.ci_coverage_95,
            "train_mae": self.train_mae,
            "train_rmse": self.train_rmse,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "dropped": [{"cycle_index": c, "reason": r} for c, r in self.dropped],
        }

    def to_dict(self) -> dict:
        return {
            "battery_id": self.battery_id,
            "summary": self.summary(),
            "q_ref_Ah": self.q_ref_Ah,
            "hyperparameters": self.hyperparameters,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [
                    r.cycle_index,
                    repr(r.true_soh),
                    repr(r.predicted_soh),
                    repr(r.variance),
                    repr(r.ci_low),
                    repr(r.ci_high),
                    int(r.in_training),
                    repr(r.relative_error_pct),
                ]
            )
        return buf.getvalue()


def extract_dataset_features(ds: BatteryDataset, cfg: ExperimentConfig):
    """Health indicators for every usable cycle plus ``(cycle_index, reason)`` for the rest."""
    features: list[HealthFeatureVector] = []
    dropped: list[tuple[int, str]] = []
    for cycle in ds.cycles:
        try:
            seg = extract_cc_segment(cycle, ds.cc_current_A, cfg.cc_tolerance_A, ds.charge_cutoff_V)
            features.append(cycle_features(seg, cfg.filter, cfg.dv_V, cfg.feature_window))
        except InputError as exc:
            logger.warning("dropping cycle %d: %s", cycle.cycle_index, exc)
            dropped.append((cycle.cycle_index, f"{type(exc).__name__}: {exc}"))
    return features, dropped


def run_experiment(ds: BatteryDataset, cfg: Optional[ExperimentConfig] = None, return_model: bool = False):
    """Full pipeline for one battery; metrics are computed on test cycles only.

    With ``return_model=True`` returns ``(report, model)``.
    """
    cfg = cfg or ExperimentConfig()
    features, dropped = extract_dataset_features(ds, cfg)
    train, test = split_dataset(features, cfg)

    if cfg.q_ref_policy == "rated":
        q_ref = ds.rated_capacity_Ah
    else:
        q_ref = ds.cycle(train[0].cycle_index).discharge_capacity_Ah
    retained = train + test
    soh = np.array([compute_soh(ds.cycle(f.cycle_index), q_ref) for f in retained])
    X = np.vstack([f.hpi for f in retained])
    n_train = len(train)

    model = gpr.fit(X[:n_train], soh[:n_train], cfg.fit_config)
    mean, var = gpr.predict_many(model, X)
    half = gpr.CI_Z * np.sqrt(var)

    rows = tuple(
        ReportRow(
            cycle_index=f.cycle_index,
            true_soh=float(soh[i]),
            predicted_soh=float(mean[i]),
            variance=float(var[i]),
            ci_low=float(mean[i] - half[i]),
            ci_high=float(mean[i] + half[i]),
            in_training=i < n_train,
            relative_error_pct=float((mean[i] - soh[i]) / soh[i] * 100.0),
        )
        for i, f in enumerate(retained)
    )
    test_rows = rows[n_train:]
    h = model.hyper
    report = EvaluationReport(
        battery_id=ds.battery_id,
        rows=rows,
        mae=mae(soh[n_train:], mean[n_train:]),
        rmse=rmse(soh[n_train:], mean[n_train:]),
        ci_coverage_95=ci_coverage(test_rows),
        train_mae=mae(soh[:n_train], mean[:n_train]),
        train_rmse=rmse(soh[:n_train], mean[:n_train]),
        n_train=n_train,
        n_test=len(test_rows),
        q_ref_Ah=float(q_ref),
        dropped=tuple(dropped),
        hyperparameters={
            "sigma_f": h.sigma_f,
            "lengthscale": h.lengthscale.tolist(),
            "sigma_n": h.sigma_n,
            "lml": model.lml,
        },
        config=cfg.echo(),
    )
    return (report, model) if return_model else report


def feature_table(ds: BatteryDataset, cfg: ExperimentConfig, q_ref_Ah: Optional[float] = None):
    """Rows ``(cycle_index, hpi_1..hpi_11, soh)`` for every usable cycle, plus the dropped list.

    Without an explicit reference the first usable cycle's capacity (or the
    rated capacity, per ``cfg.q_ref_policy``) is used.
    """
    features, dropped = extract_dataset_features(ds, cfg)
    if not features:
        raise NotEnoughCycles("no cycle produced health indicators")
    if q_ref_Ah is None:
        q_ref_Ah = (
            ds.rated_capacity_Ah
            if cfg.q_ref_policy == "rated"
            else ds.cycle(features[0].cycle_index).discharge_capacity_Ah
        )
    rows = [
        (f.cycle_index, *f.hpi.tolist(), compute_soh(ds.cycle(f.cycle_index), q_ref_Ah)) for f in features
    ]
    return rows, dropped


