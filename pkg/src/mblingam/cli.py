"""Command line entry point: ``mblingam analyze | simulate | fit``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from mblingam.lingam import IcaConfig
from mblingam.model import DataMatrix
from mblingam.msboot import BpCountTable, CountTableFormatError, ScalePlanError, build_scale_plan, count_events
from mblingam.parallel import default_threads
from mblingam.psifit import compute_report
from mblingam.simulate import PRESETS, SimConfig, preset, run_experiment

log = logging.getLogger("mblingam")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_PIPELINE = 3


class InputError(Exception):
    pass


def read_data_csv(path) -> DataMatrix:
    """Header row of variable names, then one numeric sample per row."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise InputError(f"{path}: line 1: missing header row")
        names = [h.strip() for h in header]
        if len(names) < 2:
            raise InputError(f"{path}: line 1: need at least 2 columns, got {len(names)}")
        if len(set(names)) != len(names) or any(not h for h in names):
            raise InputError(f"{path}: line 1: column names must be non-empty and unique")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(names):
                raise InputError(f"{path}: line {lineno}: expected {len(names)} fields, got {len(rec)}")
            try:
                vals = [float(c) for c in rec]
            except ValueError as exc:
                raise InputError(f"{path}: line {lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    try:
        return DataMatrix.from_samples(rows, names)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def read_count_table(path) -> BpCountTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    try:
        if str(path).endswith(".json"):
            return BpCountTable.from_json(text)
        return BpCountTable.from_csv(text)
    except CountTableFormatError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write(outdir: Path, name: str, text: str):
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / name).write_text(text, encoding="utf-8")


def _write_report(report, outdir: Path, fmt: str):
    if fmt in ("csv", "both"):
        _write(outdir, "report.csv", report.to_csv())
    if fmt in ("json", "both"):
        _write(outdir, "report.json", report.to_json())


def _ica_config(args) -> IcaConfig:
    return IcaConfig(restarts=args.restarts, seed=args.seed)


def cmd_analyze(args) -> int:
    data = read_data_csv(args.data)
    try:
        plan = build_scale_plan(data.n, args.scales_min, args.scales_max, args.num_scales, args.replicates)
    except ScalePlanError as exc:
        raise InputError(str(exc)) from exc
    print(f"analyze: m={data.m} n={data.n} scales={plan.D} Q={plan.Q}", file=sys.stderr)
    table = count_events(data, plan, _ica_config(args), args.seed, threads=args.threads)
    report = compute_report(table, args.order)
    outdir = Path(args.output_dir)
    _write(outdir, "counts.csv", table.to_csv())
    _write(outdir, "counts.json", table.to_json())
    _write_report(report, outdir, args.format)
    return EXIT_OK


def cmd_fit(args) -> int:
    table = read_count_table(args.counts)
    report = compute_report(table, args.order)
    for e in report.entries:
        if "saturated" in e.flags:
            print(f"warning: {e.hypothesis.label} has a saturated count table", file=sys.stderr)
    _write_report(report, Path(args.output_dir), args.format)
    return EXIT_OK


def _sim_config(args) -> SimConfig:
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
            cfg = SimConfig.from_dict(obj)
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise InputError(f"{args.config}: invalid config: {exc}") from exc
    elif args.preset:
        try:
            cfg = preset(args.preset)
        except KeyError as exc:
            raise InputError(str(exc.args[0])) from exc
    else:
        raise InputError("simulate needs --preset or --config")
    overrides = {"master_seed": args.seed}
    for key, attr in (
        ("replicates", "replicates"),
        ("num_scales", "num_scales"),
        ("scales_min", "sigma_sq_min"),
        ("scales_max", "sigma_sq_max"),
        ("order", "h"),
        ("datasets", "datasets"),
    ):
        val = getattr(args, key)
        if val is not None:
            overrides[attr] = val
    if args.restarts is not None:
        overrides["ica"] = replace(cfg.ica, restarts=args.restarts)
    try:
        cfg = replace(cfg, **overrides)
        cfg.plan()
    except (ValueError, ScalePlanError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    return cfg


def cmd_simulate(args) -> int:
    if args.list_presets:
        for name, cfg in PRESETS.items():
            print(f"{name}\tm={cfg.m} datasets={cfg.datasets} Q={cfg.replicates} focus={cfg.focus}")
        return EXIT_OK
    cfg = _sim_config(args)

    def progress(done, total):
        print(f"simulate {cfg.name}: {done}/{total} datasets", file=sys.stderr)

    report = run_experiment(cfg, threads=args.threads, progress=progress)
    outdir = Path(args.output_dir)
    if args.format in ("csv", "both"):
        _write(outdir, "pvalues.csv", report.raw_csv())
        _write(outdir, "rejection_curves.csv", report.curves_csv())
    if args.format in ("json", "both"):
        _write(outdir, "calibration.json", report.to_json())
    s = report.summary()
    print(
        f"{s['hypothesis']}: KS(bp)={s['ks_bp']:.4f} KS(mb)={s['ks_mb']:.4f} "
        f"P(bp<.05)={s['reject_bp_0.05']:.3f} P(mb<.05)={s['reject_mb_0.05']:.3f}",
        file=sys.stderr,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    common.add_argument("--format", choices=("csv", "json", "both"), default="both")
    common.add_argument("--order", type=int, default=None, help="Taylor order h of the p-value (default 3)")
    common.add_argument("-o", "--output-dir", default=".", help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true")

    scales = argparse.ArgumentParser(add_help=False)
    scales.add_argument("--scales-min", type=float, default=None, help="smallest sigma^2 (default 1/9)")
    scales.add_argument("--scales-max", type=float, default=None, help="largest sigma^2 (default 9)")
    scales.add_argument("--num-scales", type=int, default=None, help="number of scales D (default 13)")
    scales.add_argument("--replicates", type=int, default=None, help="bootstrap replicates Q per scale (default 1000)")
    scales.add_argument("--restarts", type=int, default=None, help="FastICA restarts (default 8)")

    parser = argparse.ArgumentParser(prog="mblingam", description="Multiscale bootstrap p-values for LiNGAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common, scales], help="count bootstrap events and fit p-values")
    p.add_argument("data", help="CSV with a header row and one sample per row")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common, scales], help="run a calibration experiment")
    p.add_argument("--preset", help="named configuration, see --list-presets")
    p.add_argument("--config", help="JSON SimConfig file")
    p.add_argument("--datasets", type=int, default=None)
    p.add_argument("--list-presets", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit p-values from a count table")
    p.add_argument("counts", help="count table (.csv or .json)")
    p.set_defaults(func=cmd_fit)
    return parser


_ANALYZE_DEFAULTS = {"scales_min": 1 / 9, "scales_max": 9.0, "num_scales": 13, "replicates": 1000, "restarts": 8, "order": 3}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.command != "simulate":
        for key, val in _ANALYZE_DEFAULTS.items():
            if getattr(args, key, val) is None:
                setattr(args, key, val)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"error: pipeline failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
