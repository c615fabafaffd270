"""Command-line entry point: ``nvfringe {simulate,track,reconstruct,evaluate,sweep}``.

Exit codes: 0 success, 1 usage or input error, 2 tracking loss, 3 fit failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from nvfringe import io, pipeline, tps
from nvfringe.tracker import NONE, ScanParams, ScanRecord, TrackingLoss, post_process

EXIT_OK, EXIT_USAGE, EXIT_TRACKING, EXIT_FIT = 0, 1, 2, 3
SIM_STAGES = ("track", "fit", "evaluate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _counts_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("counts must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvfringe", description="Fringe-tracking ODMR simulation and TPS field reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config JSON (default: built-in dipole experiment)")
            sp.add_argument("--seed", type=int, help="override the config seed")
            sp.add_argument("--lambda", dest="lam", type=float, help="override the smoothing weight")
            sp.add_argument("--counts", type=_counts_list, help="mean photon count(s), comma separated")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="run the full synthetic experiment")
    common(sp)
    sp.add_argument("--stage", choices=SIM_STAGES, default="evaluate", help="stop after this stage")

    sp = sub.add_parser("track", help="synthesize the field and run the tracked scan only")
    common(sp)

    sp = sub.add_parser("reconstruct", help="fit a TPS surface to a saved or external scan record")
    common(sp)
    sp.add_argument("--record", required=True, help="directory with c0/c_minus/c_plus/f0 CSV grids")

    sp = sub.add_parser("evaluate", help="compare a fitted model against a true field map")
    common(sp)
    sp.add_argument("--model", required=True, help="model JSON from 'reconstruct'")
    sp.add_argument("--truth", required=True, help="true field CSV (mT, bias excluded)")

    sp = sub.add_parser("sweep", help="repeat the experiment over several photon counts")
    common(sp)
    return p


def resolve_config(args) -> pipeline.ExperimentConfig:
    cfg = io.load_config(args.config) if args.config else pipeline.flagship_config()
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    if args.lam is not None:
        cfg = replace(cfg, fit=replace(cfg.fit, lam=args.lam))
    if args.counts is not None and args.command != "sweep":
        if len(args.counts) != 1:
            raise UsageError("--counts takes a single value for this command")
        cfg = replace(cfg, shape=replace(cfg.shape, baseline=args.counts[0]))
    return cfg


def _write_fit(out: Path, s_map, model) -> None:
    io.save_grid(s_map, out / "s_map.csv")
    io.save_pgm(s_map, out / "s_map.pgm")
    io.save_model(model, out / "model.json")


def _fit_exit(model: tps.TpsModel) -> int:
    if model.info is not None and model.info.status == "failed":
        print(f"fit failed: {model.info.message}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def _report_line(report) -> str:
    return (
        f"max_all={report.max_all:.4f} mT  max_interior={report.max_interior:.4f} mT  "
        f"rms_interior={report.rms_interior:.4f} mT  frac<=0.03={report.frac_interior_below:.3f}"
    )


def cmd_simulate(args, out: Path) -> int:
    cfg = resolve_config(args)
    io.save_config(cfg, out / "config.json")
    true = pipeline.true_field_map(cfg)
    io.save_grid(true, out / "true_field.csv")
    f_init, rec = pipeline.scan_stage(cfg, true, pipeline.stage_rng(cfg.seed))
    processed = post_process(rec)
    io.save_record(rec, out / "record")
    io.save_record(processed, out / "processed")
    if args.command == "track" or args.stage == "track":
        return EXIT_OK
    s_map, model = pipeline.fit_stage(processed, cfg)
    _write_fit(out, s_map, model)
    if args.stage == "fit":
        return _fit_exit(model)
    recon = tps.reconstruct_field(model, cfg.nx, cfg.ny, cfg.frame, subtract_bias=True)
    io.save_grid(recon, out / "reconstructed.csv")
    report = pipeline.deviation_report(recon, true, cfg.corner_margin)
    io.save_report(report, out / "report")
    io.save_pgm(report.deviation, out / "report" / "deviation.pgm")
    print(_report_line(report))
    return _fit_exit(model)


def _external_record(directory: Path) -> ScanRecord:
    """Record from bare CSV grids; without ``scan.json`` the counts are taken as already post-processed."""
    if (directory / "scan.json").exists():
        return io.load_record(directory)
    grids = {name: io.load_grid(directory / f"{name}.csv") for name in io.RECORD_GRIDS}
    log = np.full(grids["c0"].shape, NONE)
    return ScanRecord(**grids, params=ScanParams(), shift_log=log, processed=True)


def cmd_reconstruct(args, out: Path) -> int:
    cfg = resolve_config(args)
    rec = _external_record(Path(args.record))
    if not rec.processed:
        rec = post_process(rec)
    s_map, model = pipeline.fit_stage(rec, cfg)
    _write_fit(out, s_map, model)
    recon = tps.reconstruct_field(model, rec.shape[1], rec.shape[0], cfg.frame, subtract_bias=True)
    io.save_grid(recon, out / "reconstructed.csv")
    return _fit_exit(model)


def cmd_evaluate(args, out: Path) -> int:
    cfg = resolve_config(args)
    model = io.load_model(args.model)
    true = io.load_grid(args.truth)
    recon = tps.reconstruct_field(model, true.nx, true.ny, cfg.frame, subtract_bias=True)
    report = pipeline.deviation_report(recon, true, cfg.corner_margin)
    io.save_grid(recon, out / "reconstructed.csv")
    io.save_report(report, out / "report")
    print(_report_line(report))
    return EXIT_OK


def cmd_sweep(args, out: Path) -> int:
    cfg = resolve_config(args)
    counts = args.counts or [5000.0, 3000.0, 1000.0, 500.0]
    reports = pipeline.noise_sweep(cfg, counts)
    rows = []
    for n, rep in zip(counts, reports):
        io.save_report(rep, out / f"counts_{n:g}")
        rows.append(dict(counts=n, **io.report_to_dict(rep)))
        print(f"N0={n:g}  {_report_line(rep)}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = dict(simulate=cmd_simulate, track=cmd_simulate, reconstruct=cmd_reconstruct, evaluate=cmd_evaluate, sweep=cmd_sweep)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except TrackingLoss as exc:
        print(f"tracking loss: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (UsageError, io.ParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT if exc.stage == "fit" else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
