"""Point-dipole stray field and the NV Zeeman frequency/field conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nvfringe.grid import ScalarGrid

MU0_OVER_4PI = 1e-7  # T m / A
TESLA_TO_MT = 1e3

ZERO_FIELD_SPLITTING = 2870.0  # MHz
GYROMAGNETIC_RATIO = 28.03  # MHz / mT


@dataclass(frozen=True)
class DipoleSource:
    """Point dipole below the sample surface (z = 0).

    The NV sensor scans the plane ``z = standoff``.
    """

    moment: tuple[float, float, float]
    position: tuple[float, float, float]
    standoff: float

    def __post_init__(self):
        m = np.asarray(self.moment, dtype=float)
        p = np.asarray(self.position, dtype=float)
        if m.shape != (3,) or p.shape != (3,):
            raise ValueError("moment and position must be 3-vectors")
        if not self.standoff > 0:
            raise ValueError(f"standoff must be positive, got {self.standoff}")
        if not np.linalg.norm(m) > 0:
            raise ValueError("dipole moment must be non-zero")
        object.__setattr__(self, "moment", tuple(float(v) for v in m))
        object.__setattr__(self, "position", tuple(float(v) for v in p))


@dataclass(frozen=True)
class NvFrame:
    nv_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    bias_field: float = 5.5  # mT, along nv_axis
    zero_field_splitting: float = ZERO_FIELD_SPLITTING
    gyromagnetic_ratio: float = GYROMAGNETIC_RATIO
    branch: str = "upper"

    def __post_init__(self):
        axis = np.asarray(self.nv_axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError(f"nv_axis must be a unit 3-vector, got {self.nv_axis}")
        if not (self.gyromagnetic_ratio > 0 and self.zero_field_splitting > 0):
            raise ValueError("gyromagnetic ratio and zero-field splitting must be positive")
        if self.branch not in ("upper", "lower"):
            raise ValueError(f"branch must be 'upper' or 'lower', got {self.branch!r}")
        object.__setattr__(self, "nv_axis", tuple(float(v) for v in axis))

    @property
    def sign(self) -> float:
        return 1.0 if self.branch == "upper" else -1.0


def dipole_field_at(src: DipoleSource, points) -> np.ndarray:
    """Dipole flux density in mT at ``points`` (shape ``(3,)`` or ``(N, 3)``, metres)."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    r = pts - np.asarray(src.position)
    dist = np.linalg.norm(r, axis=1)
    if np.any(dist == 0):
        raise ValueError("dipole field is singular at the source position")
    rhat = r / dist[:, None]
    m = np.asarray(src.moment)
    b = (3.0 * rhat * (rhat @ m)[:, None] - m) / dist[:, None] ** 3
    b *= MU0_OVER_4PI * TESLA_TO_MT
    return b[0] if single else b


def project_on_axis(b, frame: NvFrame):
    """On-axis component ``B . n`` (works on a single vector or an ``(N, 3)`` stack)."""
    return np.asarray(b, dtype=float) @ np.asarray(frame.nv_axis)


def field_to_frequency(b_on_axis, frame: NvFrame):
    """Resonance frequency in MHz of the tracked transition for an on-axis field in mT.

    The bias field is added before conversion.
    """
    total = frame.bias_field + np.asarray(b_on_axis, dtype=float)
    return frame.zero_field_splitting + frame.sign * frame.gyromagnetic_ratio * total


def frequency_to_field(f, frame: NvFrame, subtract_bias: bool = False):
    """Inverse of :func:`field_to_frequency`.

    Returns the total on-axis field unless ``subtract_bias`` is set.
    """
    total = frame.sign * (np.asarray(f, dtype=float) - frame.zero_field_splitting) / frame.gyromagnetic_ratio
    if subtract_bias:
        return total - frame.bias_field
    return total


def scan_points(nx: int, ny: int, scan_size: float, standoff: float, center=(0.0, 0.0)) -> np.ndarray:
    """Physical sensor positions (metres) for every pixel, shape ``(ny, nx, 3)``."""
    x = center[0] + np.linspace(-scan_size / 2, scan_size / 2, nx)
    y = center[1] + np.linspace(-scan_size / 2, scan_size / 2, ny)
    X, Y = np.meshgrid(x, y)
    return np.stack([X, Y, np.full_like(X, standoff)], axis=-1)


def dipole_field_map(src: DipoleSource, frame: NvFrame, nx: int, ny: int, scan_size: float) -> ScalarGrid:
    """On-axis stray field (mT, bias excluded) over a square scan centred above the origin."""
    pts = scan_points(nx, ny, scan_size, src.standoff).reshape(-1, 3)
    b = project_on_axis(dipole_field_at(src, pts), frame)
    return ScalarGrid(b.reshape(ny, nx), unit="mT")
