"""Weighted thin-plate-spline reconstruction of the resonance-frequency surface.

The surface ``f(x, y) = a1 + a2 x + a3 y + sum_i b_i phi(|p_i - (x, y)|)`` with
``phi(r) = r^2 log r`` is fitted to a fringe image by minimizing

    E = sum_i w_i^2 (S_i - g(f(x_i, y_i) - f0_i))^2 + lam * b^T K b

under the side conditions ``sum b = sum b x = sum b y = 0``. The side
conditions are removed by writing ``b = Q2 c`` with ``Q2`` an orthonormal basis
of their null space, so every iterate is feasible.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from nvfringe.field import NvFrame, frequency_to_field
from nvfringe.grid import ScalarGrid, pixel_coords
from nvfringe.odmr import LineShape, lineshape_slope, lineshape_value

_CHUNK = 512


class RankError(ValueError):
    """Raised when the data points cannot determine the affine part (collinear)."""


def kernel(r):
    """Thin-plate radial basis ``r^2 log r`` with the continuous value 0 at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    rp = r[pos]
    out[pos] = rp * rp * np.log(rp)
    return out


def kernel_matrix(p, q) -> np.ndarray:
    """Dense ``phi(|p_i - q_j|)`` for point sets of shape ``(n, 2)`` and ``(m, 2)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d2 = (p[:, None, 0] - q[None, :, 0]) ** 2 + (p[:, None, 1] - q[None, :, 1]) ** 2
    # r^2 log r = 0.5 r^2 log r^2
    out = np.zeros_like(d2)
    pos = d2 > 0
    out[pos] = 0.5 * d2[pos] * np.log(d2[pos])
    return out


@dataclass(frozen=True)
class FitInfo:
    iterations: int = 0
    evaluations: int = 0
    gradient_norm: float = float("nan")
    objective: float = float("nan")
    initial_objective: float = float("nan")
    converged: bool = True
    status: str = "converged"
    message: str = ""


@dataclass(frozen=True)
class TpsModel:
    """Fitted surface; frequencies in MHz, coordinates in normalized scan units."""

    a: np.ndarray
    b: np.ndarray
    centers: np.ndarray
    info: FitInfo = field(default_factory=FitInfo, compare=False)
    config: "FitConfig | None" = field(default=None, compare=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(3)
        b = np.array(self.b, dtype=float).reshape(-1)
        c = np.array(self.centers, dtype=float).reshape(-1, 2)
        if b.shape[0] != c.shape[0]:
            raise ValueError(f"{b.shape[0]} coefficients for {c.shape[0]} centers")
        for arr in (a, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "centers", c)

    def constraint_residuals(self) -> np.ndarray:
        """``(sum b, sum b x, sum b y)``; zero for an admissible model."""
        return np.array([self.b.sum(), self.b @ self.centers[:, 0], self.b @ self.centers[:, 1]])

    def __call__(self, x, y):
        return evaluate(self, x, y)

    def __eq__(self, other):
        if not isinstance(other, TpsModel):
            return NotImplemented
        return (
            np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.centers, other.centers)
        )


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``lam`` weights ``b^T K b`` with ``b`` in MHz and coordinates normalized to
    the unit square. ``center_stride`` keeps every n-th pixel (per axis) as an
    RBF centre.
    """

    lam: float = 1e-9
    center_stride: int = 1
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-8
    objective_tolerance: float = 1e-13
    history: int = 20

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if int(self.center_stride) != self.center_stride or self.center_stride < 1:
            raise ValueError(f"center_stride must be a positive integer, got {self.center_stride}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass(frozen=True)
class FitData:
    """Fringe samples prepared for fitting.

    ``grid_shape`` (``(ny, nx)``) is set when the points are the pixel centres
    of a regular scan, in row-major order; the fitter then evaluates kernel
    sums by FFT convolution instead of dense matrices.
    """

    points: np.ndarray
    s: np.ndarray
    f0: np.ndarray
    valid: np.ndarray
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        n = pts.shape[0]
        s = np.array(self.s, dtype=float).reshape(-1)
        f0 = np.array(self.f0, dtype=float).reshape(-1)
        valid = np.array(self.valid, dtype=bool).reshape(-1)
        if not (s.shape[0] == f0.shape[0] == valid.shape[0] == n):
            raise ValueError("points, s, f0 and valid must have the same length")
        if not np.all(np.isfinite(s[valid])) or not np.all(np.isfinite(f0[valid])):
            raise ValueError("valid samples must be finite")
        if self.grid_shape is not None and int(np.prod(self.grid_shape)) != n:
            raise ValueError("grid_shape does not match the number of points")
        for arr in (pts, s, f0, valid):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "valid", valid)

    @property
    def weights(self) -> np.ndarray:
        return fringe_weights(self.s)

    @classmethod
    def from_maps(cls, s_map: ScalarGrid, f0_map: ScalarGrid, valid=None) -> "FitData":
        if s_map.shape != f0_map.shape:
            raise ValueError("fringe and frequency maps differ in shape")
        X, Y = s_map.coords()
        mask = s_map.valid if valid is None else np.asarray(valid, dtype=bool) & s_map.valid
        return cls(
            np.column_stack([X.ravel(), Y.ravel()]),
            s_map.values.ravel(),
            f0_map.values.ravel(),
            mask.ravel(),
            grid_shape=s_map.shape,
        )

    def with_valid(self, valid) -> "FitData":
        return FitData(self.points, self.s, self.f0, np.asarray(valid, dtype=bool).reshape(-1), self.grid_shape)


def fringe_weights(s):
    """Data weights ``3 - 2.5 S``: deep-contrast pixels count twice as much as flat ones."""
    return 3.0 - 2.5 * np.asarray(s, dtype=float)


# ---------------------------------------------------------------------------
# Evaluation and energies in public units (MHz).


def evaluate(model: TpsModel, x, y):
    """Surface value(s) in MHz at normalized coordinates ``x, y`` (broadcastable)."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    pts = np.column_stack([x.ravel(), y.ravel()])
    out = model.a[0] + model.a[1] * pts[:, 0] + model.a[2] * pts[:, 1]
    for start in range(0, pts.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        out[sl] += kernel_matrix(pts[sl], model.centers) @ model.b
    return out.reshape(x.shape) if x.ndim else float(out[0])


def bending_energy(model: TpsModel) -> float:
    """Quadratic smoothness ``b^T K b`` over the model's centres."""
    total = 0.0
    for start in range(0, model.b.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        total += model.b[sl] @ (kernel_matrix(model.centers[sl], model.centers) @ model.b)
    return float(total)


def _model_at_data(model: TpsModel, data: FitData):
    idx = np.flatnonzero(data.valid)
    pts = data.points[idx]
    return idx, evaluate(model, pts[:, 0], pts[:, 1])


def objective(model: TpsModel, data: FitData, shape: LineShape, lam: float, weights=None) -> float:
    """Weighted misfit plus ``lam`` times the bending energy.

    ``weights`` overrides the default ``3 - 2.5 S`` (one value per sample).
    """
    idx, f = _model_at_data(model, data)
    w = fringe_weights(data.s[idx]) if weights is None else np.asarray(weights, dtype=float)[idx]
    r = data.s[idx] - lineshape_value(shape, f - data.f0[idx])
    return float(np.sum(w * w * r * r) + lam * bending_energy(model))


def objective_gradient(model: TpsModel, data: FitData, shape: LineShape, lam: float):
    """Analytic gradient of :func:`objective` as ``(d/da, d/db)``."""
    idx, f = _model_at_data(model, data)
    pts = data.points[idx]
    w = fringe_weights(data.s[idx])
    det = f - data.f0[idx]
    r = data.s[idx] - lineshape_value(shape, det)
    q = -2.0 * w * w * r * lineshape_slope(shape, det)
    grad_a = np.array([q.sum(), q @ pts[:, 0], q @ pts[:, 1]])
    grad_b = np.zeros_like(model.b)
    for start in range(0, pts.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        grad_b += kernel_matrix(pts[sl], model.centers).T @ q[sl]
    kb = np.zeros_like(model.b)
    for start in range(0, model.b.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        kb[sl] = kernel_matrix(model.centers[sl], model.centers) @ model.b
    grad_b += 2.0 * lam * kb
    return grad_a, grad_b


# ---------------------------------------------------------------------------
# Kernel operators used inside the optimizer.


class DenseKernel:
    """Explicit kernel matrices between data points and centres."""

    def __init__(self, data_pts, centers):
        self.k_dc = kernel_matrix(data_pts, centers)
        self.k_cc = kernel_matrix(centers, centers)

    def data_from_centers(self, b):
        return self.k_dc @ b

    def centers_from_data(self, r):
        return self.k_dc.T @ r

    def centers_from_centers(self, b):
        return self.k_cc @ b


class GridKernel:
    """Kernel sums for points on a regular pixel lattice, via zero-padded FFT convolution.

    Data and centres are given as flat (row-major) pixel indices.
    """

    def __init__(self, grid_shape, spacing, data_idx, center_idx):
        ny, nx = grid_shape
        hx, hy = spacing
        self.shape = (ny, nx)
        self.data_idx = np.asarray(data_idx)
        self.center_idx = np.asarray(center_idx)
        self.fft_shape = (2 * ny, 2 * nx)
        dj = np.fft.fftfreq(2 * ny, 1.0 / (2 * ny))
        di = np.fft.fftfreq(2 * nx, 1.0 / (2 * nx))
        r = np.hypot(di[None, :] * hx, dj[:, None] * hy)
        self._kernel_hat = np.fft.rfft2(kernel(r))

    def _convolve(self, idx, values, out_idx):
        ny, nx = self.shape
        u = np.zeros(ny * nx)
        u[idx] = values
        v = np.fft.irfft2(np.fft.rfft2(u.reshape(ny, nx), self.fft_shape) * self._kernel_hat, self.fft_shape)
        return v[:ny, :nx].ravel()[out_idx]

    def data_from_centers(self, b):
        return self._convolve(self.center_idx, b, self.data_idx)

    def centers_from_data(self, r):
        return self._convolve(self.data_idx, r, self.center_idx)

    def centers_from_centers(self, b):
        return self._convolve(self.center_idx, b, self.center_idx)


class AffineNullSpace:
    """Orthonormal basis of ``{b : P^T b = 0}`` with ``P = [1, x, y]``, applied via Householder reflectors."""

    def __init__(self, centers):
        p = np.column_stack([np.ones(len(centers)), centers[:, 0], centers[:, 1]])
        n = p.shape[0]
        if n < 4:
            raise RankError(f"need at least 4 centres, got {n}")
        self.n = n
        self._reflectors = []
        a = p.copy()
        for k in range(3):
            x = a[k:, k]
            norm = np.linalg.norm(x)
            if norm <= 1e-12 * max(1.0, np.abs(p).max()) * np.sqrt(n):
                raise RankError("centres are collinear; the affine part is undetermined")
            v = x.copy()
            v[0] += np.copysign(norm, x[0])
            v /= np.linalg.norm(v)
            a[k:, k:] -= 2.0 * np.outer(v, v @ a[k:, k:])
            self._reflectors.append(v)

    def _apply(self, z, order):
        z = z.copy()
        for k in order:
            v = self._reflectors[k]
            z[k:] -= 2.0 * v * (v @ z[k:])
        return z

    def expand(self, c):
        """``b = Q2 c``."""
        z = np.zeros(self.n)
        z[3:] = c
        return self._apply(z, (2, 1, 0))

    def reduce(self, g):
        """``Q2^T g``."""
        return self._apply(np.asarray(g, dtype=float), (0, 1, 2))[3:]


# ---------------------------------------------------------------------------
# Fitting.


def select_centers(data: FitData, stride: int) -> np.ndarray:
    """Indices (into ``data.points``) of valid samples used as RBF centres."""
    valid = data.valid
    if stride == 1:
        return np.flatnonzero(valid)
    if data.grid_shape is not None:
        ny, nx = data.grid_shape
        jj, ii = np.divmod(np.arange(ny * nx), nx)
        keep = valid & (ii % stride == 0) & (jj % stride == 0)
        return np.flatnonzero(keep)
    return np.flatnonzero(valid)[::stride]


def plane_fit(points, values) -> np.ndarray:
    """Least-squares ``(a1, a2, a3)`` of ``a1 + a2 x + a3 y`` through ``values``."""
    pts = np.asarray(points, dtype=float)
    design = np.column_stack([np.ones(len(pts)), pts[:, 0], pts[:, 1]])
    coef, _, rank, _ = np.linalg.lstsq(design, np.asarray(values, dtype=float), rcond=None)
    if rank < 3:
        raise RankError("points are collinear; plane fit is rank deficient")
    return coef


class _Problem:
    """Objective and gradient in reduced, dimensionless variables.

    Frequencies are measured from ``f_ref`` in units of ``unit`` (MHz); the
    parameter vector is ``(a1, a2, a3, c)`` with ``b = Q2 c``.
    """

    def __init__(self, data: FitData, shape: LineShape, cfg: FitConfig, unit: float):
        idx = np.flatnonzero(data.valid)
        if idx.size < 3:
            raise RankError(f"need at least 3 valid points, got {idx.size}")
        self.idx = idx
        self.pts = data.points[idx]
        center_rows = select_centers(data, cfg.center_stride)
        self.centers = data.points[center_rows]
        self.null = AffineNullSpace(self.centers)
        self.f_ref = float(np.mean(data.f0[idx]))
        self.unit = unit
        self.f0 = (data.f0[idx] - self.f_ref) / unit
        self.s = data.s[idx]
        self.w2 = fringe_weights(self.s) ** 2
        self.shape = shape
        self.contrast = shape.contrast
        self.k = 4.0 * np.log(2.0) * (unit / shape.fwhm) ** 2
        self.lam = cfg.lam * unit**2
        self.design = np.column_stack([np.ones(idx.size), self.pts[:, 0], self.pts[:, 1]])
        if data.grid_shape is not None:
            ny, nx = data.grid_shape
            xs = data.points[:, 0].reshape(ny, nx)
            ys = data.points[:, 1].reshape(ny, nx)
            spacing = (xs[0, 1] - xs[0, 0], ys[1, 0] - ys[0, 0])
            self.kop = GridKernel(data.grid_shape, spacing, idx, center_rows)
        else:
            self.kop = DenseKernel(self.pts, self.centers)

    def split(self, theta):
        return theta[:3], theta[3:]

    def value_and_grad(self, theta):
        a, c = self.split(theta)
        b = self.null.expand(c)
        f = self.design @ a + self.kop.data_from_centers(b)
        x = f - self.f0
        e = self.contrast * np.exp(-self.k * x * x)
        r = self.s - (1.0 - e)
        kb = self.kop.centers_from_centers(b)
        value = np.sum(self.w2 * r * r) + self.lam * (b @ kb)
        # dE/df_i = -2 w^2 r g'(x), g'(x) = 2 k x e
        q = -4.0 * self.k * self.w2 * r * x * e
        grad_a = self.design.T @ q
        grad_c = self.null.reduce(self.kop.centers_from_data(q) + 2.0 * self.lam * kb)
        return value, np.concatenate([grad_a, grad_c])

    def plane_start(self):
        a = plane_fit(self.pts, self.f0)
        return np.concatenate([a, np.zeros(self.centers.shape[0] - 3)])

    def to_model(self, theta, info: FitInfo, config: FitConfig) -> TpsModel:
        a, c = self.split(theta)
        b = self.null.expand(c) * self.unit
        a = a * self.unit + np.array([self.f_ref, 0.0, 0.0])
        return TpsModel(a, b, self.centers, info, config)


def fit(data: FitData, shape: LineShape, config: FitConfig | None = None) -> TpsModel:
    """Minimize the weighted fringe energy and return the fitted surface.

    The affine part starts from a least-squares plane through the excitation
    frequencies with all RBF coefficients zero. Hitting ``max_iterations`` is
    a normal stop; ``info.status`` is ``"failed"`` only when the optimizer made
    no progress or produced a non-finite objective, and the best iterate is
    returned either way.
    """
    cfg = config or FitConfig()
    problem = _Problem(data, shape, cfg, unit=shape.fwhm)
    x0 = problem.plane_start()
    f_init, _ = problem.value_and_grad(x0)
    res = minimize(
        problem.value_and_grad,
        x0,
        jac=True,
        method="L-BFGS-B",
        options=dict(
            maxiter=cfg.max_iterations,
            maxfun=4 * cfg.max_iterations,
            gtol=cfg.gradient_tolerance,
            ftol=cfg.objective_tolerance,
            maxcor=cfg.history,
        ),
    )
    x, fun = res.x, float(res.fun)
    if not np.isfinite(fun) or fun > f_init:
        x, fun = x0, float(f_init)
    if res.success:
        status = "converged"
    elif res.nit >= cfg.max_iterations or res.nfev >= 4 * cfg.max_iterations:
        status = "iteration_limit"
    elif np.isfinite(res.fun) and res.fun < f_init:
        status = "stalled"
    else:
        status = "failed"
    info = FitInfo(
        iterations=int(res.nit),
        evaluations=int(res.nfev),
        gradient_norm=float(np.linalg.norm(res.jac)),
        objective=fun,
        initial_objective=float(f_init),
        converged=bool(res.success),
        status=status,
        message=str(res.message),
    )
    return problem.to_model(x, info, cfg)


def reconstruct_field(
    model: TpsModel, nx: int, ny: int, frame: NvFrame, subtract_bias: bool = True, width: float = 1.0, height: float = 1.0
) -> ScalarGrid:
    """On-axis field map (mT) implied by the fitted frequency surface."""
    X, Y = pixel_coords(nx, ny, width, height)
    return ScalarGrid(frequency_to_field(evaluate(model, X, Y), frame, subtract_bias), "mT", width, height)


def predict_fringes(model: TpsModel, f0: ScalarGrid, shape: LineShape) -> ScalarGrid:
    """Normalized PL the model implies at every pixel: ``g(f(x, y) - f0)``."""
    X, Y = f0.coords()
    return f0.with_values(lineshape_value(shape, evaluate(model, X, Y) - f0.values), "dimensionless")


def fringe_rms(predicted: ScalarGrid, s_map: ScalarGrid) -> float:
    """RMS difference between predicted and measured fringes over valid pixels."""
    valid = s_map.valid
    d = predicted.values[valid] - s_map.values[valid]
    return float(np.sqrt(np.mean(d * d)))


def select_lambda(s_map: ScalarGrid, f0_map: ScalarGrid, shape: LineShape, lambdas, config: FitConfig | None = None):
    """Grid search for the smoothing weight.

    Each candidate is fitted to the full fringe image and scored by how well
    its predicted fringes reproduce the measured ones. Returns
    ``(best_lambda, scores)`` with ``scores`` aligned to ``lambdas``.
    """
    cfg = config or FitConfig()
    data = FitData.from_maps(s_map, f0_map)
    scores = []
    for lam in lambdas:
        model = fit(data, shape, replace(cfg, lam=float(lam)))
        scores.append(fringe_rms(predict_fringes(model, f0_map, shape), s_map))
    best = float(lambdas[int(np.argmin(scores))])
    return best, scores
