import math

import numpy as np
import pytest

from nvfringe import tps
from nvfringe.field import NvFrame
from nvfringe.grid import ScalarGrid

from oracles import SHAPE, bending_quadrature, direct_sum, grid_data, random_model

# -- kernel -----------------------------------------------------------------


def test_kernel_values():
    assert tps.kernel(1.0) == 0.0
    assert tps.kernel(0.0) == 0.0
    assert tps.kernel(math.e) == pytest.approx(math.e**2, rel=1e-15)
    assert np.all(np.isfinite(tps.kernel(np.array([0.0, 1e-300, 1e-5]))))


def test_kernel_matrix_symmetric_zero_diagonal(rng):
    pts = rng.uniform(0, 1, (30, 2))
    k = tps.kernel_matrix(pts, pts)
    assert np.array_equal(k, k.T)
    assert np.all(np.diag(k) == 0)


# -- evaluation -----------------------------------------------------------------


def test_affine_only_model_is_plane(rng):
    model = tps.TpsModel([3000.0, 12.0, -7.0], np.zeros(5), rng.uniform(0, 1, (5, 2)))
    x, y = rng.uniform(0, 1, (2, 50))
    assert np.allclose(tps.evaluate(model, x, y), 3000 + 12 * x - 7 * y, rtol=0, atol=1e-12)


def test_evaluation_at_lone_center():
    centers = np.array([[0.1, 0.2], [0.9, 0.1], [0.5, 0.8], [0.4, 0.4]])
    b = np.array([0.0, 0.0, 0.0, 0.0])
    b[3] = 5.0
    model = tps.TpsModel([1.0, 2.0, 3.0], b, centers)
    assert tps.evaluate(model, 0.4, 0.4) == pytest.approx(1 + 0.8 + 1.2, abs=1e-14)


def test_evaluate_matches_direct_sum(rng):
    worst = 0.0
    for _ in range(100):
        model = random_model(rng, n=int(rng.integers(4, 30)), scale=50)
        x, y = rng.uniform(-0.2, 1.2, (2, 100))
        fast = tps.evaluate(model, x, y)
        slow = np.array([direct_sum(model, xi, yi) for xi, yi in zip(x, y)])
        worst = max(worst, np.max(np.abs(fast - slow) / np.abs(slow)))
    assert worst < 1e-10


# -- bending energy ------------------------------------------------------------------


def test_bending_energy_of_plane_is_zero(rng):
    model = tps.TpsModel([1, 2, 3], np.zeros(6), rng.uniform(0, 1, (6, 2)))
    assert tps.bending_energy(model) == 0.0


def test_bending_energy_nonnegative_on_constraint_space(rng):
    for _ in range(1000):
        model = random_model(rng, n=int(rng.integers(4, 15)))
        assert tps.bending_energy(model) >= -1e-12


@pytest.mark.slow
def test_bending_energy_matches_quadrature_up_to_constant():
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(3):
        model = random_model(rng, n=8)
        integral = bending_quadrature(model)
        ratios.append(integral / tps.bending_energy(model))
    ratios = np.array(ratios)
    assert np.ptp(ratios) / ratios.mean() < 0.02
    assert ratios.mean() == pytest.approx(8 * np.pi, rel=0.02)


# -- objective and gradient -------------------------------------------------------


def test_objective_vanishes_for_perfect_plane(rng):
    data, X, Y = grid_data(8, 7, lambda x, y: 3000 + 10 * x - 4 * y, rng.uniform(-6, 6, (7, 8)))
    model = tps.TpsModel([3000, 10, -4], np.zeros(5), rng.uniform(0, 1, (5, 2)))
    assert tps.objective(model, data, SHAPE, 1e-3) == pytest.approx(0.0, abs=1e-25)
    ga, gb = tps.objective_gradient(model, data, SHAPE, 1e-3)
    assert np.allclose(ga, 0, atol=1e-14) and np.allclose(gb, 0, atol=1e-14)


def test_objective_weight_scaling(rng):
    data, *_ = grid_data(6, 6, lambda x, y: 3000 + 3 * x, rng.uniform(-6, 6, (6, 6)), noise=rng.normal(0, 0.02, (6, 6)))
    model = random_model(rng, n=6)
    w = tps.fringe_weights(data.s)
    base = tps.objective(model, data, SHAPE, 0.0)
    assert tps.objective(model, data, SHAPE, 0.0, weights=w) == pytest.approx(base, rel=1e-15)
    assert tps.objective(model, data, SHAPE, 0.0, weights=2 * w) == pytest.approx(4 * base, rel=1e-13)


def test_objective_single_pixel_hand_value():
    data = tps.FitData([[0.5, 0.5]], [0.85], [3000.0], [True])
    centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b = np.array([1.0, -1.0, -1.0, 1.0])  # satisfies the side conditions
    model = tps.TpsModel([3005.0, 0.0, 0.0], b, centers)
    # f(0.5, 0.5): every centre at r^2 = 0.5, so the RBF terms cancel (sum b = 0)
    f = 3005.0
    g = 1 - 0.2 * math.exp(-4 * math.log(2) * (f - 3000.0) ** 2 / 144.0)
    w = 3 - 2.5 * 0.85
    phi1 = 0.0  # r = 1
    phi2 = 2 * math.log(math.sqrt(2))  # r = sqrt(2): r^2 log r
    # b^T K b over the unit-square corners: adjacent pairs r = 1, diagonal pairs r = sqrt(2)
    btkb = 2 * (b[0] * b[3] + b[1] * b[2]) * phi2 + 2 * (b[0] * b[1] + b[0] * b[2] + b[1] * b[3] + b[2] * b[3]) * phi1
    lam = 0.3
    expected = w * w * (0.85 - g) ** 2 + lam * btkb
    assert tps.objective(model, data, SHAPE, lam) == pytest.approx(expected, abs=1e-12)


def test_objective_gradient_matches_finite_differences(rng):
    for _ in range(20):
        data, *_ = grid_data(5, 5, lambda x, y: 3000 + 8 * x * y, rng.uniform(-8, 8, (5, 5)),
                             noise=rng.normal(0, 0.02, (5, 5)))
        model = random_model(rng, n=7, scale=5)
        model = tps.TpsModel(model.a * [0, 1, 1] + [3000, 0, 0], model.b, model.centers)
        lam = 10 ** rng.uniform(-4, 0)
        ga, gb = tps.objective_gradient(model, data, SHAPE, lam)
        analytic = np.concatenate([ga, gb])
        numeric = np.zeros_like(analytic)
        h = 1e-6
        for k in range(analytic.size):
            da = np.zeros(3)
            db = np.zeros(model.b.size)
            (da if k < 3 else db)[k if k < 3 else k - 3] = h
            up = tps.TpsModel(model.a + da, model.b + db, model.centers)
            dn = tps.TpsModel(model.a - da, model.b - db, model.centers)
            numeric[k] = (tps.objective(up, data, SHAPE, lam) - tps.objective(dn, data, SHAPE, lam)) / (2 * h)
        scale = np.max(np.abs(numeric))
        assert np.max(np.abs(analytic - numeric)) < 1e-5 * scale


def test_smoothing_gradient_is_two_lambda_k_b(rng):
    model = random_model(rng, n=9)
    empty = tps.FitData(np.zeros((1, 2)), [1.0], [0.0], [False])
    ga, gb = tps.objective_gradient(model, empty, SHAPE, 0.7)
    k = tps.kernel_matrix(model.centers, model.centers)
    assert np.array_equal(ga, np.zeros(3))
    assert np.allclose(gb, 2 * 0.7 * k @ model.b, rtol=1e-14, atol=1e-14)


# -- internal machinery -------------------------------------------------------------


def test_grid_kernel_matches_dense(rng):
    ny, nx = 9, 11
    X, Y = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny))
    pts = np.column_stack([X.ravel(), Y.ravel()])
    data_idx = np.flatnonzero(rng.random(ny * nx) < 0.8)
    center_idx = data_idx[::2]
    grid = tps.GridKernel((ny, nx), (1 / (nx - 1), 1 / (ny - 1)), data_idx, center_idx)
    dense = tps.DenseKernel(pts[data_idx], pts[center_idx])
    b = rng.normal(size=center_idx.size)
    r = rng.normal(size=data_idx.size)
    assert np.allclose(grid.data_from_centers(b), dense.data_from_centers(b), atol=1e-12)
    assert np.allclose(grid.centers_from_data(r), dense.centers_from_data(r), atol=1e-12)
    assert np.allclose(grid.centers_from_centers(b), dense.centers_from_centers(b), atol=1e-12)


def test_null_space_basis_is_orthonormal_and_feasible(rng):
    centers = rng.uniform(0, 1, (20, 2))
    ns = tps.AffineNullSpace(centers)
    q2 = np.column_stack([ns.expand(e) for e in np.eye(17)])
    p = np.column_stack([np.ones(20), centers])
    assert np.allclose(q2.T @ q2, np.eye(17), atol=1e-13)
    assert np.allclose(p.T @ q2, 0, atol=1e-13)
    v = rng.normal(size=20)
    assert np.allclose(ns.reduce(v), q2.T @ v, atol=1e-13)


def test_collinear_points_raise_rank_error():
    x = np.linspace(0, 1, 10)
    data = tps.FitData(np.column_stack([x, x]), np.full(10, 0.9), np.full(10, 3000.0), np.ones(10, bool))
    with pytest.raises(tps.RankError):
        tps.fit(data, SHAPE)


def test_internal_gradient_matches_finite_differences(rng):
    data, *_ = grid_data(7, 6, lambda x, y: 3000 + 9 * x - 5 * y * y, rng.uniform(-7, 7, (6, 7)),
                         noise=rng.normal(0, 0.02, (6, 7)))
    prob = tps._Problem(data, SHAPE, tps.FitConfig(lam=1e-2), unit=SHAPE.fwhm)
    theta = np.concatenate([prob.plane_start()[:3], rng.normal(size=prob.centers.shape[0] - 3) * 0.5])
    _, grad = prob.value_and_grad(theta)
    h = 1e-6
    fd = np.array([(prob.value_and_grad(theta + h * e)[0] - prob.value_and_grad(theta - h * e)[0]) / (2 * h)
                   for e in np.eye(theta.size)])
    assert np.max(np.abs(grad - fd)) < 1e-5 * np.max(np.abs(fd))


# -- fitting --------------------------------------------------------------------


@pytest.mark.parametrize("lam", [0.0, 1e-9, 1e-3, 1.0])
def test_fit_reproduces_plane(lam, rng):
    plane = lambda x, y: 3024.0 + 14.0 * x - 9.0 * y
    offsets = rng.choice([-4.0, 4.0], size=(12, 12)) + rng.uniform(-1, 1, (12, 12))
    data, X, Y = grid_data(12, 12, plane, offsets)
    # run to full convergence: with lam = 0 the coefficients are weakly determined
    cfg = tps.FitConfig(lam=lam, gradient_tolerance=1e-15, objective_tolerance=0.0, max_iterations=20000)
    model = tps.fit(data, SHAPE, cfg)
    assert np.max(np.abs(tps.evaluate(model, X, Y) - plane(X, Y))) < 1e-3
    assert np.max(np.abs(model.b)) < 1e-3
    assert np.all(np.abs(model.constraint_residuals()) < 1e-8)
    assert model.info.objective <= model.info.initial_objective


def test_fit_satisfies_constraints_and_improves(rng):
    f_true = lambda x, y: 3000 + 20 * np.sin(2 * x) * np.cos(y)
    data, X, Y = grid_data(16, 16, f_true, rng.uniform(-6, 6, (16, 16)), noise=rng.normal(0, 0.015, (16, 16)))
    for stride in (1, 2):
        model = tps.fit(data, SHAPE, tps.FitConfig(lam=1e-6, center_stride=stride, max_iterations=300))
        assert np.all(np.abs(model.constraint_residuals()) < 1e-8)
        assert model.info.objective <= model.info.initial_objective
        assert tps.objective(model, data, SHAPE, 1e-6) == pytest.approx(model.info.objective, rel=1e-9)
        assert model.centers.shape[0] == (256 if stride == 1 else 64)


def test_bending_energy_non_increasing_in_lambda():
    rng = np.random.default_rng(5)
    f_true = lambda x, y: 3000 + 15 * np.exp(-((x - 0.4) ** 2 + (y - 0.6) ** 2) / 0.1)
    data, *_ = grid_data(12, 12, f_true, rng.uniform(-6, 6, (12, 12)), noise=rng.normal(0, 0.02, (12, 12)))
    energies = []
    for lam in 10.0 ** np.arange(-6, 1):
        model = tps.fit(data, SHAPE, tps.FitConfig(lam=lam, max_iterations=20000))
        energies.append(tps.bending_energy(model))
    assert all(e2 <= e1 * (1 + 1e-6) for e1, e2 in zip(energies, energies[1:])), energies


def test_invalid_pixels_do_not_change_fit(rng):
    f_true = lambda x, y: 3000 + 10 * x * y
    data, X, Y = grid_data(10, 10, f_true, rng.uniform(-6, 6, (10, 10)), noise=rng.normal(0, 0.02, (10, 10)))
    mask = rng.random(100) > 0.15
    cfg = tps.FitConfig(lam=1e-5, max_iterations=200)
    a = tps.fit(data.with_valid(mask), SHAPE, cfg)
    garbage_s = np.where(mask, data.s, rng.uniform(-5, 5, 100))
    garbage_f0 = np.where(mask, data.f0, rng.uniform(0, 1e4, 100))
    b = tps.fit(tps.FitData(data.points, garbage_s, garbage_f0, mask, data.grid_shape), SHAPE, cfg)
    assert a == b
    # scattered (dense) path: appending masked samples changes nothing either
    keep = np.flatnonzero(mask)
    sc = tps.FitData(data.points[keep], data.s[keep], data.f0[keep], np.ones(keep.size, bool))
    extra = rng.uniform(0, 1, (7, 2))
    sc2 = tps.FitData(
        np.vstack([sc.points, extra]), np.append(sc.s, np.full(7, 9.0)), np.append(sc.f0, np.zeros(7)),
        np.append(sc.valid, np.zeros(7, bool)),
    )
    assert tps.fit(sc, SHAPE, cfg) == tps.fit(sc2, SHAPE, cfg)


def test_fitdata_weights():
    data = tps.FitData([[0, 0], [1, 0], [0, 1]], [0.8, 1.0, 0.0], [1, 2, 3], [True, True, True])
    assert np.allclose(data.weights, [1.0, 0.5, 3.0])


# -- field map and fringe prediction ----------------------------------------------


def test_reconstruct_plane_field():
    frame = NvFrame()
    model = tps.TpsModel([3024.165, 28.03, 0.0], np.zeros(4), [[0, 0], [1, 0], [0, 1], [1, 1]])
    field = tps.reconstruct_field(model, 5, 4, frame, subtract_bias=True)
    X, _ = field.coords()
    assert field.unit == "mT"
    assert np.allclose(field.values, X, atol=1e-12)


@pytest.mark.parametrize("branch,sign", [("upper", -1), ("lower", 1)])
def test_reconstruct_zero_model(branch, sign):
    frame = NvFrame(branch=branch)
    model = tps.TpsModel([0, 0, 0], np.zeros(4), [[0, 0], [1, 0], [0, 1], [1, 1]])
    field = tps.reconstruct_field(model, 3, 3, frame, subtract_bias=False)
    assert np.allclose(field.values, sign * frame.zero_field_splitting / frame.gyromagnetic_ratio)


def test_predicted_fringes_of_perfect_model(rng):
    plane = lambda x, y: 3000 + 5 * x + 2 * y
    data, X, Y = grid_data(6, 5, plane, rng.uniform(-8, 8, (5, 6)))
    s_map = ScalarGrid(data.s.reshape(5, 6))
    f0_map = ScalarGrid(data.f0.reshape(5, 6), "MHz")
    model = tps.TpsModel([3000, 5, 2], np.zeros(4), [[0, 0], [1, 0], [0, 1], [1, 1]])
    pred = tps.predict_fringes(model, f0_map, SHAPE)
    assert np.allclose(pred.values, s_map.values, atol=1e-14)
    assert tps.fringe_rms(pred, s_map) < 1e-14
