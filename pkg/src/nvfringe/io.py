"""File formats: CSV grids, 16-bit PGM renders, JSON configs/models, scan-record folders.

Grid CSV layout::

    # nx: 64
    # ny: 64
    # width: 1.0
    # height: 1.0
    # unit: mT
    v00,v01,...      (row j = 0, columns i = 0..nx-1)
    ...

Values are written with 17 significant digits so they load back bit-for-bit.
Masked pixels are written as ``nan``.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from nvfringe import __version__
from nvfringe.field import DipoleSource, NvFrame
from nvfringe.grid import ScalarGrid
from nvfringe.odmr import LineShape
from nvfringe.pipeline import DeviationReport, ExperimentConfig, RampSource, UniformSource
from nvfringe.tps import FitConfig, FitInfo, TpsModel
from nvfringe.tracker import ScanParams, ScanRecord

HEADER_KEYS = ("nx", "ny", "width", "height", "unit")


class ParseError(ValueError):
    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


# -- grids ---------------------------------------------------------------------


def grid_to_csv(grid: ScalarGrid) -> str:
    lines = [
        f"# nx: {grid.nx}",
        f"# ny: {grid.ny}",
        f"# width: {grid.width!r}",
        f"# height: {grid.height!r}",
        f"# unit: {grid.unit}",
    ]
    vals = np.where(grid.valid, grid.values, np.nan)
    for row in vals:
        lines.append(",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def save_grid(grid: ScalarGrid, path) -> None:
    Path(path).write_text(grid_to_csv(grid))


def parse_grid(text: str, source="<string>") -> ScalarGrid:
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if rows:
                raise ParseError(source, "header line after data rows", lineno)
            key, sep, value = line[1:].partition(":")
            if not sep:
                raise ParseError(source, f"malformed header line {line!r}", lineno)
            header[key.strip()] = value.strip()
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise ParseError(source, f"non-numeric value in data row {len(rows)}", lineno) from None
        expected = _header_int(header, "nx", source)
        if len(rows[-1]) != expected:
            raise ParseError(source, f"row {len(rows) - 1} has {len(rows[-1])} values, expected nx={expected}", lineno)

    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ParseError(source, f"missing header key(s): {', '.join(missing)}")
    nx, ny = _header_int(header, "nx", source), _header_int(header, "ny", source)
    if len(rows) < ny:
        raise ParseError(source, f"missing row {len(rows)} (expected {ny} rows, found {len(rows)})")
    if len(rows) > ny:
        raise ParseError(source, f"found {len(rows)} data rows, expected ny={ny}")
    try:
        width, height = float(header["width"]), float(header["height"])
    except ValueError:
        raise ParseError(source, "width and height must be numbers") from None
    vals = np.array(rows, dtype=float).reshape(ny, nx)
    valid = ~np.isnan(vals)
    mask = None if valid.all() else valid
    try:
        return ScalarGrid(np.where(valid, vals, 0.0), header["unit"], width, height, mask)
    except ValueError as exc:
        raise ParseError(source, str(exc)) from None


def _header_int(header, key, source) -> int:
    if key not in header:
        raise ParseError(source, f"missing header key: {key}")
    try:
        return int(header[key])
    except ValueError:
        raise ParseError(source, f"header {key} must be an integer, got {header[key]!r}") from None


def load_grid(path) -> ScalarGrid:
    return parse_grid(Path(path).read_text(), source=path)


def grid_to_pgm(grid: ScalarGrid) -> bytes:
    """16-bit binary PGM; valid values map linearly from [min, max] to [0, 65535].

    A constant grid renders as all zeros, as do masked pixels.
    """
    valid = grid.valid
    vals = grid.values
    out = np.zeros(grid.shape, dtype=">u2")
    if valid.any():
        lo, hi = vals[valid].min(), vals[valid].max()
        if hi > lo:
            scaled = np.rint((vals - lo) / (hi - lo) * 65535.0)
            out = np.where(valid, np.clip(scaled, 0, 65535), 0).astype(">u2")
    return f"P5\n{grid.nx} {grid.ny}\n65535\n".encode("ascii") + out.tobytes()


def save_pgm(grid: ScalarGrid, path) -> None:
    Path(path).write_bytes(grid_to_pgm(grid))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"65535":
        raise ParseError(path, "not a 16-bit binary PGM")
    nx, ny = int(parts[1]), int(parts[2])
    pixels = parts[4]
    if len(pixels) != 2 * nx * ny:
        raise ParseError(path, f"expected {2 * nx * ny} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=">u2").reshape(ny, nx)


# -- JSON helpers -------------------------------------------------------------------


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"invalid JSON: {exc.msg}", exc.lineno) from None


def _build(cls, d, path, what):
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, f"bad {what}: {exc}") from None


# -- experiment config ---------------------------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    src = cfg.source
    if isinstance(src, DipoleSource):
        source = dict(kind="dipole", moment=list(src.moment), position=list(src.position), standoff=src.standoff)
    elif isinstance(src, RampSource):
        source = dict(kind="ramp", gradient=src.gradient, direction=src.direction, offset=src.offset)
    else:
        source = dict(kind="uniform", value=src.value)
    frame = asdict(cfg.frame)
    frame["nv_axis"] = list(frame["nv_axis"])
    return dict(
        source=source,
        seed=cfg.seed,
        nx=cfg.nx,
        ny=cfg.ny,
        scan_size=cfg.scan_size,
        frame=frame,
        shape=asdict(cfg.shape),
        scan=asdict(cfg.scan),
        fit=asdict(cfg.fit),
        corner_margin=cfg.corner_margin,
        sweep_points=cfg.sweep_points,
        sweep_span=cfg.sweep_span,
    )


def config_from_dict(d: dict, path="<dict>") -> ExperimentConfig:
    d = dict(d)
    try:
        src = dict(d.pop("source"))
        kind = src.pop("kind")
    except (KeyError, TypeError):
        raise ParseError(path, "config needs a 'source' object with a 'kind' field") from None
    kinds = {"dipole": DipoleSource, "ramp": RampSource, "uniform": UniformSource}
    if kind not in kinds:
        raise ParseError(path, f"unknown source kind {kind!r}; expected one of {sorted(kinds)}")
    if kind == "dipole":
        src = {k: tuple(v) if isinstance(v, list) else v for k, v in src.items()}
    source = _build(kinds[kind], src, path, "source")
    parts = {}
    for key, cls in (("frame", NvFrame), ("shape", LineShape), ("scan", ScanParams), ("fit", FitConfig)):
        if key in d:
            sub = dict(d.pop(key))
            if key == "frame" and "nv_axis" in sub:
                sub["nv_axis"] = tuple(sub["nv_axis"])
            parts[key] = _build(cls, sub, path, key)
    if "seed" not in d:
        raise ParseError(path, "config needs an explicit integer 'seed'")
    return _build(ExperimentConfig, dict(source=source, **parts, **d), path, "config")


def save_config(cfg: ExperimentConfig, path) -> None:
    _dump(config_to_dict(cfg), path)


def load_config(path) -> ExperimentConfig:
    return config_from_dict(_load(path), path)


# -- TPS model ------------------------------------------------------------------


def model_to_dict(model: TpsModel) -> dict:
    return dict(
        version=__version__,
        a=model.a.tolist(),
        b=model.b.tolist(),
        centers=model.centers.tolist(),
        config=None if model.config is None else asdict(model.config),
        info=None if model.info is None else asdict(model.info),
    )


def model_from_dict(d: dict, path="<dict>") -> TpsModel:
    for key in ("a", "b", "centers"):
        if key not in d:
            raise ParseError(path, f"model is missing field {key!r}")
    info = None if d.get("info") is None else _build(FitInfo, d["info"], path, "fit info")
    config = None if d.get("config") is None else _build(FitConfig, d["config"], path, "fit config")
    try:
        return TpsModel(np.array(d["a"], float), np.array(d["b"], float), np.array(d["centers"], float), info, config)
    except ValueError as exc:
        raise ParseError(path, f"bad model arrays: {exc}") from None


def save_model(model: TpsModel, path) -> None:
    _dump(model_to_dict(model), path)


def load_model(path) -> TpsModel:
    return model_from_dict(_load(path), path)


# -- scan records -------------------------------------------------------------


RECORD_GRIDS = ("c0", "c_minus", "c_plus", "f0")


def save_record(rec: ScanRecord, directory) -> None:
    """Write a record as four grid CSVs plus ``scan.json`` (parameters and shift log)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in RECORD_GRIDS:
        save_grid(getattr(rec, name), d / f"{name}.csv")
    meta = dict(params=asdict(rec.params), processed=rec.processed, shift_log=rec.shift_log.tolist())
    _dump(meta, d / "scan.json")


def load_record(directory) -> ScanRecord:
    d = Path(directory)
    grids = {name: load_grid(d / f"{name}.csv") for name in RECORD_GRIDS}
    meta = _load(d / "scan.json")
    try:
        params = _build(ScanParams, meta["params"], d / "scan.json", "scan params")
        return ScanRecord(**grids, params=params, shift_log=np.array(meta["shift_log"]), processed=meta["processed"])
    except KeyError as exc:
        raise ParseError(d / "scan.json", f"missing field {exc}") from None
    except ValueError as exc:
        raise ParseError(d / "scan.json", str(exc)) from None


# -- deviation reports --------------------------------------------------------------


def report_to_dict(report: DeviationReport) -> dict:
    d = asdict(report)
    d.pop("deviation")
    return d


def save_report(report: DeviationReport, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_grid(report.deviation, d / "deviation.csv")
    _dump(report_to_dict(report), d / "report.json")


def load_report(directory) -> DeviationReport:
    d = Path(directory)
    meta = _load(d / "report.json")
    return _build(DeviationReport, dict(deviation=load_grid(d / "deviation.csv"), **meta), d / "report.json", "report")
