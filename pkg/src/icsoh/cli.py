"""Command-line entry point: ``icsoh {validate,ic,features,train,evaluate}``.

Settings resolve in three layers: built-in defaults, then a ``--config`` JSON
file, then flags given on the command line. Output files are staged in a
temporary directory inside ``--out-dir`` and renamed into place only after the
whole command succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from . import gpr
from .dataset_io import CsvSchema, compute_soh, extract_cc_segment, load_dataset
from .errors import ComputationError, InputError, UnknownCycle
from .evaluation import (
    ExperimentConfig,
    FractionSplit,
    OffsetSplit,
    extract_dataset_features,
    feature_table,
    run_experiment,
    split_dataset,
)
from .ic_analysis import FilterConfig, compute_ic, smooth_curve

logger = logging.getLogger("icsoh")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPUTATION = 3
USABLE_FRACTION = 0.8

DEFAULTS = {
    "filter_kernel_len": 17,
    "filter_sigma": 5.0,
    "dv_mv": 1.0,
    "split_fraction": None,
    "skip_cycles": None,
    "train_count": None,
    "restarts": 10,
    "seed": 42,
    "q_ref": "first",
    "cc_tolerance": 0.05,
    "cycles": None,
    "ma_window": None,
}
_TYPES = {
    "filter_kernel_len": int,
    "filter_sigma": float,
    "dv_mv": float,
    "split_fraction": float,
    "skip_cycles": int,
    "train_count": int,
    "restarts": int,
    "seed": int,
    "q_ref": str,
    "cc_tolerance": float,
    "cycles": str,
    "ma_window": int,
}


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, experiment: bool):
    p.add_argument("--input", required=True, type=Path, help="dataset CSV")
    p.add_argument("--schema", type=Path, help="JSON column mapping and battery metadata")
    p.add_argument("--config", type=Path, help="JSON file with defaults for any of the flags below")
    p.add_argument("--cc-tolerance", type=float, default=None, help="CC band half-width in A (0.05)")
    if not experiment:
        return
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (created if missing)")
    p.add_argument("--filter-kernel-len", type=int, default=None, help="Gaussian kernel taps (17)")
    p.add_argument("--filter-sigma", type=float, default=None, help="Gaussian sigma in samples (5)")
    p.add_argument("--dv-mv", type=float, default=None, help="voltage grid step in mV (1)")
    p.add_argument("--q-ref", choices=("first", "rated"), default=None, help="SOH reference capacity (first)")


def _add_split(p: argparse.ArgumentParser):
    p.add_argument("--split-fraction", type=float, default=None, help="train on the first fraction of cycles (0.55)")
    p.add_argument("--skip-cycles", type=int, default=None, help="offset split: cycles to skip")
    p.add_argument("--train-count", type=int, default=None, help="offset split: training cycles after the skip")
    p.add_argument("--restarts", type=int, default=None, help="random optimizer restarts (10)")
    p.add_argument("--seed", type=int, default=None, help="restart RNG seed (42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icsoh", description="Battery SOH from incremental-capacity features")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check that a dataset loads and has usable CC segments")
    _add_common(p, experiment=False)

    p = sub.add_parser("ic", help="write raw and smoothed IC curves per cycle")
    _add_common(p, experiment=True)
    p.add_argument("--cycles", default=None, help="comma-separated cycle indices (default: all)")
    p.add_argument("--ma-window", type=int, default=None, help="also write a moving-average column of this window")

    p = sub.add_parser("features", help="write the health-indicator table")
    _add_common(p, experiment=True)

    p = sub.add_parser("train", help="fit the GP on the training split and save it")
    _add_common(p, experiment=True)
    _add_split(p)

    p = sub.add_parser("evaluate", help="run the full experiment and write the report")
    _add_common(p, experiment=True)
    _add_split(p)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file, and explicit flags."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None) is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in doc.items():
            norm = key.replace("-", "_")
            if norm not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            settings[norm] = None if value is None else _TYPES[norm](value)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    offset = settings["skip_cycles"] is not None or settings["train_count"] is not None
    if offset and settings["split_fraction"] is not None:
        raise UsageError("--split-fraction cannot be combined with --skip-cycles/--train-count")
    return settings


def experiment_config(settings: dict) -> ExperimentConfig:
    if settings["skip_cycles"] is not None or settings["train_count"] is not None:
        split = OffsetSplit(
            settings["skip_cycles"] if settings["skip_cycles"] is not None else OffsetSplit.skip_cycles,
            settings["train_count"] if settings["train_count"] is not None else OffsetSplit.train_count,
        )
    else:
        split = FractionSplit(settings["split_fraction"] if settings["split_fraction"] is not None else 0.55)
    return ExperimentConfig(
        split=split,
        filter=FilterConfig(kernel_len=settings["filter_kernel_len"], sigma_samples=settings["filter_sigma"]),
        dv_V=settings["dv_mv"] * 1e-3,
        q_ref_policy="rated" if settings["q_ref"] == "rated" else "first_train_cycle",
        cc_tolerance_A=settings["cc_tolerance"],
        fit_config=gpr.FitConfig(restarts=settings["restarts"], seed=settings["seed"]),
    )


@contextmanager
def staged_output(out_dir: Path):
    """Yield a scratch directory whose files move into ``out_dir`` only if the block succeeds."""
    out_dir.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".icsoh-", dir=out_dir))
    try:
        yield scratch
        for path in sorted(scratch.iterdir()):
            os.replace(path, out_dir / path.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load(args, settings):
    schema = CsvSchema.from_json(args.schema) if args.schema else CsvSchema()
    return load_dataset(args.input, schema)


def cmd_validate(args, settings) -> int:
    ds = _load(args, settings)
    unusable = []
    for cycle in ds.cycles:
        try:
            extract_cc_segment(cycle, ds.cc_current_A, settings["cc_tolerance"], ds.charge_cutoff_V)
        except InputError as exc:
            unusable.append({"cycle_index": cycle.cycle_index, "error": type(exc).__name__, "message": str(exc)})
    n = len(ds.cycles)
    usable = n - len(unusable)
    print(f"cycles: {n}, usable: {usable}")
    if usable < USABLE_FRACTION * n:
        _diagnose("InsufficientSegments", f"only {usable} of {n} cycles have a usable CC segment", unusable=unusable)
        return EXIT_INPUT
    for item in unusable:
        print(f"cycle {item['cycle_index']}: {item['error']}: {item['message']}")
    return EXIT_OK


def _parse_cycles(text: Optional[str]):
    if text is None:
        return None
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"--cycles expects comma-separated integers, got {text!r}") from exc


def ic_csv(raw, smoothed, ma=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["voltage_V", "dq_dv_raw", "dq_dv_smoothed"] + (["dq_dv_ma"] if ma is not None else [])
    writer.writerow(header)
    for i, v in enumerate(raw.voltage_grid_V):
        line = [repr(float(v)), repr(float(raw.dq_dv_AhPerV[i])), repr(float(smoothed.dq_dv_AhPerV[i]))]
        if ma is not None:
            # the trailing window needs N samples, so the last N - 1 nodes have no average
            line.append(repr(float(ma.dq_dv_AhPerV[i])) if i < ma.dq_dv_AhPerV.size else "")
        writer.writerow(line)
    return buf.getvalue()


def cmd_ic(args, settings) -> int:
    ds = _load(args, settings)
    cfg = experiment_config(settings)
    wanted = _parse_cycles(settings["cycles"])
    known = {c.cycle_index for c in ds.cycles}
    if wanted is None:
        wanted = sorted(known)
    for idx in wanted:
        if idx not in known:
            raise UnknownCycle(idx)
    ma_cfg = None
    if settings["ma_window"] is not None:
        ma_cfg = FilterConfig(method="moving_average", window_N=settings["ma_window"])
    with staged_output(args.out_dir) as scratch:
        for idx in wanted:
            seg = extract_cc_segment(ds.cycle(idx), ds.cc_current_A, cfg.cc_tolerance_A, ds.charge_cutoff_V)
            raw = compute_ic(seg, cfg.dv_V)
            smoothed = smooth_curve(raw, cfg.filter)
            ma = smooth_curve(raw, ma_cfg) if ma_cfg else None
            _write(scratch / f"ic_cycle_{idx:04d}.csv", ic_csv(raw, smoothed, ma))
    print(f"wrote {len(wanted)} IC curve file(s) to {args.out_dir}")
    return EXIT_OK


def cmd_features(args, settings) -> int:
    ds = _load(args, settings)
    cfg = experiment_config(settings)
    rows, dropped = feature_table(ds, cfg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cycle_index", *[f"hpi_{k}" for k in range(1, 12)], "soh"])
    for r in rows:
        writer.writerow([r[0], *[repr(float(x)) for x in r[1:]]])
    with staged_output(args.out_dir) as scratch:
        _write(scratch / "features.csv", buf.getvalue())
    print(f"features: {len(rows)} cycles, dropped: {len(dropped)}")
    return EXIT_OK


def cmd_train(args, settings) -> int:
    ds = _load(args, settings)
    cfg = experiment_config(settings)
    features, _ = extract_dataset_features(ds, cfg)
    train, _ = split_dataset(features, cfg)
    if cfg.q_ref_policy == "rated":
        q_ref = ds.rated_capacity_Ah
    else:
        q_ref = ds.cycle(train[0].cycle_index).discharge_capacity_Ah
    X = np.vstack([f.hpi for f in train])
    y = [compute_soh(ds.cycle(f.cycle_index), q_ref) for f in train]
    model = gpr.fit(X, y, cfg.fit_config)
    with staged_output(args.out_dir) as scratch:
        _write(scratch / "model.json", gpr.dumps_model(model))
    print(f"trained on {len(train)} cycles, lml: {model.lml!r}")
    return EXIT_OK


def cmd_evaluate(args, settings) -> int:
    ds = _load(args, settings)
    report = run_experiment(ds, experiment_config(settings))
    with staged_output(args.out_dir) as scratch:
        _write(scratch / "report.json", report.to_json())
        _write(scratch / "report.csv", report.rows_csv())
    print(f"mae: {report.mae:.6f}, rmse: {report.rmse:.6f}, ci_coverage_95: {report.ci_coverage_95:.3f}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "ic": cmd_ic,
    "features": cmd_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def _diagnose(kind: str, message: str, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _diagnose("UsageError", str(exc))
        return EXIT_INPUT
    except InputError as exc:
        extra = {"column": exc.column} if hasattr(exc, "column") else {}
        _diagnose(type(exc).__name__, str(exc), **extra)
        return EXIT_INPUT
    except ComputationError as exc:
        _diagnose(type(exc).__name__, str(exc))
        return EXIT_COMPUTATION
    except (OSError, ValueError) as exc:
        _diagnose(type(exc).__name__, str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
