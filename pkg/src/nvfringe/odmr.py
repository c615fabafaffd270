"""Gaussian ODMR line shape, Poisson photon sampling and single-spectrum fitting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

FOUR_LN2 = 4.0 * np.log(2.0)


class FitError(RuntimeError):
    """Raised when a spectrum cannot be fitted; ``diagnostics`` holds the details."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class LineShape:
    contrast: float = 0.2
    fwhm: float = 12.0  # MHz
    baseline: float = 5000.0  # photons per integration window

    def __post_init__(self):
        if not 0 < self.contrast < 1:
            raise ValueError(f"contrast must lie in (0, 1), got {self.contrast}")
        if not self.fwhm > 0:
            raise ValueError(f"fwhm must be positive, got {self.fwhm}")
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")


@dataclass(frozen=True)
class SpectrumFit:
    resonance: float
    shape: LineShape
    residual_rms: float


def lineshape_value(shape: LineShape, detuning):
    """Normalized PL ``1 - A exp(-4 ln2 x^2 / w^2)`` at the given detuning (MHz)."""
    x = np.asarray(detuning, dtype=float)
    return 1.0 - shape.contrast * np.exp(-FOUR_LN2 * x * x / shape.fwhm**2)


def lineshape_slope(shape: LineShape, detuning):
    """Derivative of :func:`lineshape_value` with respect to detuning."""
    x = np.asarray(detuning, dtype=float)
    k = FOUR_LN2 / shape.fwhm**2
    return 2.0 * k * x * shape.contrast * np.exp(-k * x * x)


def sample_pl(shape: LineShape, f_mw, f_res, rng: np.random.Generator):
    """Poisson photon count(s) for microwave frequency ``f_mw`` and resonance ``f_res``."""
    mean = shape.baseline * lineshape_value(shape, np.asarray(f_mw) - np.asarray(f_res))
    return rng.poisson(mean)


def synthesize_spectrum(shape: LineShape, frequencies, f_res: float, rng: np.random.Generator | None = None):
    """Expected counts over a sweep, or a Poisson realization when ``rng`` is given."""
    freqs = np.asarray(frequencies, dtype=float)
    if rng is None:
        return shape.baseline * lineshape_value(shape, freqs - f_res)
    return sample_pl(shape, freqs, f_res, rng).astype(float)


def fit_spectrum(frequencies, counts) -> SpectrumFit:
    """Least-squares fit of ``N0 * g(f - f_res)`` to a swept ODMR spectrum."""
    f = np.asarray(frequencies, dtype=float)
    c = np.asarray(counts, dtype=float)
    if f.shape != c.shape or f.ndim != 1:
        raise FitError("frequencies and counts must be 1-D arrays of equal length")
    if f.size < 5:
        raise FitError(f"need at least 5 sweep points, got {f.size}", points=f.size)
    order = np.argsort(f)
    f, c = f[order], c[order]
    span = f[-1] - f[0]

    imin = int(np.argmin(c))
    if imin == 0 or imin == f.size - 1:
        raise FitError("dip is not bracketed by the sweep", argmin=imin, f_min=float(f[imin]))
    n0 = float(c.max())
    if not n0 > 0:
        raise FitError("spectrum has no counts")
    p0 = np.array([f[imin], min(max(1 - c[imin] / n0, 1e-3), 0.99), span / 2, n0])

    def residual(p):
        fr, a, w, base = p
        return base * (1 - a * np.exp(-FOUR_LN2 * (f - fr) ** 2 / w**2)) - c

    lower = [f[0], 0.0, span / (10 * f.size), 0.0]
    upper = [f[-1], 1.0, 2 * span, np.inf]
    sol = least_squares(residual, p0, bounds=(lower, upper), x_scale="jac", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    fr, a, w, base = sol.x
    rms = float(np.sqrt(np.mean((sol.fun / base) ** 2)))
    diag = dict(status=int(sol.status), nfev=int(sol.nfev), params=sol.x.tolist(), residual_rms=rms)
    if not sol.success:
        raise FitError(f"spectrum fit did not converge: {sol.message}", **diag)
    if not (0 < a < 1) or not (f[0] < fr < f[-1]):
        raise FitError("fitted dip is degenerate or outside the sweep", **diag)
    return SpectrumFit(float(fr), LineShape(float(a), float(w), float(base)), rms)
