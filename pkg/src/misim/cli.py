"""Command line: ``misim simulate`` and ``misim plot``.

Exit codes: 0 success, 1 I/O failure, 2 configuration or usage error,
3 numerical failure of a replicate.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, dump_config, parse_config, validate
from .mcengine import ReplicateFailure, RunManifest, ScenarioSummary, run_scenario
from .output import (
    OutputError,
    RecordDumper,
    emit_config,
    emit_csv,
    emit_manifest,
    emit_replicates_json,
    emit_summary_json,
    load_json,
)
from .plots import PlotError, emit_plots

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="misim", description="Multiple-imputation Monte Carlo study runner.")
    p.add_argument("--version", action="version", version=f"misim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the scenarios in a config file")
    sim.add_argument("--config", required=True, metavar="FILE")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--keep-replicates", action="store_true", help="store per-replicate CV-MSE for plotting")
    sim.add_argument("--dump-data", action="store_true", help="write every masked dataset as CSV")
    sim.add_argument("--dump-fits", action="store_true", help="write per-completion fits as JSONL")
    sim.add_argument("--allow-custom", action="store_true", help="accept factor levels outside the design table")
    sim.add_argument("--out", metavar="DIR")
    sim.add_argument("--quiet", action="store_true", help="suppress progress on stderr")

    pl = sub.add_parser("plot", help="render SVG figures from a finished run")
    pl.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    pl.add_argument("--out", metavar="DIR", help="default: DIR/plots")
    return p


def resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config, allow_custom=args.allow_custom or None)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["out"] = args.out
    for flag in ("keep_replicates", "dump_data", "dump_fits"):
        if getattr(args, flag):
            overrides[flag] = True
    cfg = replace(cfg, **overrides)
    validate(cfg)
    if not cfg.out:
        raise ConfigError("no output directory: pass --out DIR or set out in the config")
    return cfg


def simulate(cfg: RunConfig, *, progress: bool = True) -> list[ScenarioSummary]:
    out = Path(cfg.out)
    scenarios = cfg.scenarios()
    keep_trace = cfg.keep_replicates or cfg.emit_svg
    summaries = []
    for i, sc in enumerate(scenarios):
        dumper = None
        if cfg.dump_data or cfg.dump_fits:
            dumper = RecordDumper(out, i, cfg.dump_data, cfg.dump_fits)
        summaries.append(
            run_scenario(
                sc, cfg.seed, cfg.settings, cfg.workers,
                keep_replicates=keep_trace, on_record=dumper, progress=progress,
            )
        )
        if dumper is not None:
            dumper.close()
    if cfg.emit_csv:
        emit_csv(summaries, out)
    emit_summary_json(summaries, out)
    if keep_trace:
        emit_replicates_json(summaries, out)
    emit_config(dump_config(cfg), out)
    manifest = RunManifest(
        seed=cfg.seed,
        scenarios=scenarios,
        settings=cfg.settings.to_dict(),
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    ).to_dict()
    manifest["config"] = dump_config(cfg)
    emit_manifest(manifest, out)
    if cfg.emit_svg:
        emit_plots(load_json(out / "summary.json"), load_json(out / "replicates.json"), out / "plots")
    return summaries


def plot(in_dir: Path, out_dir: Path | None) -> list[Path]:
    summary = in_dir / "summary.json"
    if not summary.exists():
        raise PlotError(f"{summary} not found; run simulate first")
    reps = in_dir / "replicates.json"
    replicates = load_json(reps) if reps.exists() else None
    return emit_plots(load_json(summary), replicates, out_dir or in_dir / "plots")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "simulate":
            cfg = resolve_config(args)
            simulate(cfg, progress=not args.quiet)
            print(f"wrote results to {cfg.out}")
        else:
            paths = plot(Path(args.in_dir), Path(args.out) if args.out else None)
            print(f"wrote {len(paths)} figures")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplicateFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OutputError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
