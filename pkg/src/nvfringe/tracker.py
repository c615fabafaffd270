"""Three-frequency resonance tracking during a pixel scan.

Each pixel is probed at ``f0``, ``f0 - delta`` and ``f0 + delta``. When the
weaker side channel falls below ``k * C0`` all three frequencies move one
step towards it for the next pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from scipy.optimize import brentq

from nvfringe.field import NvFrame
from nvfringe.grid import ScalarGrid
from nvfringe.odmr import LineShape, lineshape_value

NONE, DOWN, UP = 0, -1, 1

PlSource = Callable[[tuple[int, int], float], float]


class TrackingLoss(RuntimeError):
    def __init__(self, message: str, pixel=None, detuning=None):
        super().__init__(message)
        self.pixel = pixel
        self.detuning = detuning


class ScanError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScanParams:
    delta: float = 12.0  # MHz
    threshold: float = 0.96
    scan_order: str = "serpentine"
    f_init: float = 0.0  # MHz

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"threshold k must lie in (0, 1], got {self.threshold}")
        if self.scan_order not in ("raster", "serpentine"):
            raise ValueError(f"unknown scan order {self.scan_order!r}")


@dataclass(frozen=True)
class ScanRecord:
    c0: ScalarGrid
    c_minus: ScalarGrid
    c_plus: ScalarGrid
    f0: ScalarGrid
    params: ScanParams
    shift_log: np.ndarray  # int grid: -1 down, 0 none, +1 up
    processed: bool = False

    def __post_init__(self):
        shapes = {g.shape for g in (self.c0, self.c_minus, self.c_plus, self.f0)}
        log = np.array(self.shift_log, dtype=np.int8)
        shapes.add(log.shape)
        if len(shapes) != 1:
            raise ValueError(f"scan record grids disagree in shape: {sorted(shapes)}")
        if not np.all(np.isin(log, (NONE, DOWN, UP))):
            raise ValueError("shift_log entries must be -1, 0 or +1")
        log.setflags(write=False)
        object.__setattr__(self, "shift_log", log)

    @property
    def shape(self) -> tuple[int, int]:
        return self.c0.shape

    def path(self) -> list[tuple[int, int]]:
        ny, nx = self.shape
        return scan_path(nx, ny, self.params.scan_order)

    def __eq__(self, other):
        if not isinstance(other, ScanRecord):
            return NotImplemented
        return (
            self.c0 == other.c0
            and self.c_minus == other.c_minus
            and self.c_plus == other.c_plus
            and self.f0 == other.f0
            and self.params == other.params
            and np.array_equal(self.shift_log, other.shift_log)
            and self.processed == other.processed
        )


def scan_path(nx: int, ny: int, order: str = "serpentine") -> list[tuple[int, int]]:
    """Pixel visiting order as ``(i, j)`` = (column, row) pairs."""
    path = []
    for j in range(ny):
        cols = range(nx)
        if order == "serpentine" and j % 2 == 1:
            cols = reversed(cols)
        path.extend((i, j) for i in cols)
    return path


def decide_shift(c0: float, c_minus: float, c_plus: float, k: float) -> int:
    """Flowchart decision for the next pixel: DOWN, UP or NONE."""
    if c_minus < c_plus:
        return DOWN if k * c0 > c_minus else NONE
    return UP if k * c0 > c_plus else NONE


def track_scan(pl_source: PlSource, nx: int, ny: int, params: ScanParams) -> ScanRecord:
    """Run the tracking protocol over an ``nx`` x ``ny`` scan.

    ``pl_source((i, j), f_mw)`` returns the photon count at pixel ``(i, j)``
    for microwave frequency ``f_mw``. It is called in path order, three times
    per pixel (``f0``, ``f0 - delta``, ``f0 + delta``).
    """
    delta, k = params.delta, params.threshold
    c0 = np.zeros((ny, nx))
    cm = np.zeros((ny, nx))
    cp = np.zeros((ny, nx))
    f0 = np.zeros((ny, nx))
    log = np.zeros((ny, nx), dtype=np.int8)

    f = params.f_init
    for i, j in scan_path(nx, ny, params.scan_order):
        try:
            a = pl_source((i, j), f)
            b = pl_source((i, j), f - delta)
            c = pl_source((i, j), f + delta)
        except Exception as exc:
            raise ScanError(f"PL source failed at pixel (i={i}, j={j}), f0={f} MHz: {exc}") from exc
        c0[j, i], cm[j, i], cp[j, i], f0[j, i] = a, b, c, f
        step = decide_shift(a, b, c, k)
        log[j, i] = step
        f = f + step * delta

    return ScanRecord(
        ScalarGrid(c0, "counts"),
        ScalarGrid(cm, "counts"),
        ScalarGrid(cp, "counts"),
        ScalarGrid(f0, "MHz"),
        params,
        log,
    )


def post_process(rec: ScanRecord) -> ScanRecord:
    """Swap ``C0`` with the side channel that triggered a shift, moving ``f0`` with it.

    Pixels logged DOWN take ``C-`` as their centre count and ``f0 - delta`` as
    their frequency; UP pixels likewise with ``C+``. The result is flagged
    ``processed``; swapping is not repeated on an already processed record.
    """
    if rec.processed:
        raise ValueError("scan record has already been post-processed")
    down = rec.shift_log == DOWN
    up = rec.shift_log == UP
    c0, cm, cp = rec.c0.values, rec.c_minus.values, rec.c_plus.values
    new_c0 = np.where(down, cm, np.where(up, cp, c0))
    new_cm = np.where(down, c0, cm)
    new_cp = np.where(up, c0, cp)
    new_f0 = rec.f0.values + rec.params.delta * rec.shift_log
    return replace(
        rec,
        c0=rec.c0.with_values(new_c0),
        c_minus=rec.c_minus.with_values(new_cm),
        c_plus=rec.c_plus.with_values(new_cp),
        f0=rec.f0.with_values(new_f0),
        processed=True,
    )


def normalized_pl(rec: ScanRecord) -> ScalarGrid:
    """``S = C0 / max(C-, C+)`` per pixel; pixels with a zero reference are masked."""
    ref = np.maximum(rec.c_minus.values, rec.c_plus.values)
    valid = ref > 0
    s = np.divide(rec.c0.values, ref, out=np.zeros_like(ref), where=valid)
    return rec.c0.with_values(s, unit="dimensionless", mask=valid)


def max_trackable_gradient(delta, frame: NvFrame) -> float:
    """Largest on-axis field change per pixel (mT) the protocol can follow: ``2 delta / gamma``."""
    if isinstance(delta, ScanParams):
        delta = delta.delta
    return 2.0 * delta / frame.gyromagnetic_ratio


def _shift_margin(shape: LineShape, delta: float, k: float):
    # positive where a noise-free pixel at detuning d (resonance above f0) triggers an up-shift
    return lambda d: k * lineshape_value(shape, d) - lineshape_value(shape, d - delta)


def trigger_detuning(shape: LineShape, delta: float, k: float) -> float:
    """Smallest noise-free detuning (MHz) at which a shift is triggered."""
    h = _shift_margin(shape, delta, k)
    if h(delta) <= 0:
        raise ValueError("threshold too strict: no shift is ever triggered")
    if h(0.0) > 0:
        return 0.0
    return brentq(h, 0.0, delta, xtol=1e-12)


def capture_range(shape: LineShape, delta: float, k: float) -> float:
    """Largest noise-free detuning (MHz) from which the tracker still steps towards the resonance."""
    h = _shift_margin(shape, delta, k)
    if h(delta) <= 0:
        raise ValueError("threshold too strict: no shift is ever triggered")
    hi = delta
    while h(hi) > 0:
        hi += shape.fwhm
    return brentq(h, delta, hi, xtol=1e-12)


def lock_detuning(rec: ScanRecord, f_true: np.ndarray) -> np.ndarray:
    """Excitation frequency minus true resonance at every pixel (MHz)."""
    return rec.f0.values - np.asarray(f_true)


def check_lock(rec: ScanRecord, f_true: np.ndarray, limit: float | None = None) -> None:
    """Raise :class:`TrackingLoss` when ``|f0 - f_true|`` exceeds ``limit`` (default ``3 delta``)."""
    if limit is None:
        limit = 3.0 * rec.params.delta
    det = np.abs(lock_detuning(rec, f_true))
    if np.any(det > limit):
        j, i = np.unravel_index(int(np.argmax(det)), det.shape)
        raise TrackingLoss(
            f"tracking lost: |f0 - f_true| = {det[j, i]:.2f} MHz > {limit:.2f} MHz at pixel (i={i}, j={j})",
            pixel=(int(i), int(j)),
            detuning=float(det[j, i]),
        )
