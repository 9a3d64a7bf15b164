import numpy as np
import pytest

from dhipf.implicit import build_objective
from dhipf.models import doublewell_model
from dhipf.optimize import (
    IndefiniteHessianError,
    NonFiniteObjectiveError,
    ObjectiveHandle,
    UnboundedDirectionError,
    cholesky,
    minimize,
    solve_random_map,
)
from dhipf.particles import resample_indices

from oracles import density_cdf_on_grid, weighted_ks_distance


def quadratic(mu=0.0, s=1.0, c=0.0):
    return ObjectiveHandle(
        value=lambda x: 0.5 * ((x[:, 0] - mu) / s) ** 2 + c,
        gradient=lambda x: (x - mu) / s**2,
        hessian=lambda x: np.full((x.shape[0], 1, 1), 1.0 / s**2),
    )


def quartic():
    # F(x) = x^4/4 + x^2/2 - x: convex, non-quadratic, minimum at the real root of x^3 + x = 1
    return ObjectiveHandle(
        value=lambda x: 0.25 * x[:, 0] ** 4 + 0.5 * x[:, 0] ** 2 - x[:, 0],
        gradient=lambda x: x**3 + x - 1.0,
        hessian=lambda x: (3.0 * x**2 + 1.0)[:, :, None],
    )


def case1_objective(x_prev=0.6, y=0.9, n=1):
    m = doublewell_model(1.0, 1.5, 1.5, 0.01)
    return build_objective(m.drift, m.diffusion_scale, m.dt, m.noise_scaling, np.full((n, 1), x_prev), m, [y])


def grid_argmin(f, lo, hi, n=2_000_001):
    grid = np.linspace(lo, hi, n)
    vals = f(grid[:, None])
    return grid[np.argmin(vals)]


class TestMinimize:
    def test_parabola(self):
        obj = ObjectiveHandle(lambda x: x[:, 0] ** 2, lambda x: 2 * x, lambda x: np.full((x.shape[0], 1, 1), 2.0))
        res = minimize(obj, [3.0])
        assert res.converged and res.iterations <= 2
        assert res.x_min[0] == pytest.approx(0.0, abs=1e-12) and res.f_min == pytest.approx(0.0, abs=1e-20)

    def test_gaussian_product(self):
        obj = ObjectiveHandle(
            lambda x: 0.5 * x[:, 0] ** 2 + 0.5 * (x[:, 0] - 2) ** 2,
            lambda x: 2 * x - 2,
            lambda x: np.full((x.shape[0], 1, 1), 2.0),
        )
        res = minimize(obj, [5.0])
        assert res.x_min[0] == pytest.approx(1.0, abs=1e-12)
        assert res.f_min == pytest.approx(1.0, abs=1e-12)

    def test_case1_objective_from_random_starts(self):
        obj = case1_objective()
        starts = np.random.default_rng(0).uniform(-3, 3, size=(20, 1))
        x_grid = grid_argmin(lambda x: case1_objective().value(x), -3, 3)
        for s in starts:
            res = minimize(obj, s, grad_tol=1e-8)
            assert res.converged
            assert abs(obj.gradient(res.x_min[None])[0, 0]) <= 1e-8
            assert abs(res.x_min[0] - x_grid) < 1e-4

    def test_non_quadratic_batched(self):
        starts = np.linspace(-5, 5, 21)[:, None]
        res = minimize(quartic(), starts)
        root = np.roots([1, 0, 1, -1])
        root = root[np.abs(root.imag) < 1e-12].real[0]
        assert res.converged.all()
        np.testing.assert_allclose(res.x_min[:, 0], root, atol=1e-9)
        assert np.all(res.f_min <= quartic().value(starts))

    def test_indefinite_falls_back_to_descent(self):
        # F = x^4/4 - x^2/2 has negative curvature at 0.1 but a minimum at 1
        obj = ObjectiveHandle(
            lambda x: 0.25 * x[:, 0] ** 4 - 0.5 * x[:, 0] ** 2,
            lambda x: x**3 - x,
            lambda x: (3 * x**2 - 1)[:, :, None],
        )
        res = minimize(obj, [0.1])
        assert res.converged and res.x_min[0] == pytest.approx(1.0, abs=1e-8)

    def test_monotone_line_search(self):
        obj = quartic()
        x = np.array([4.0])
        values = [float(obj.value(x[None])[0])]
        for _ in range(30):
            res = minimize(obj, x, max_iter=1)
            values.append(res.f_min)
            x = res.x_min
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_max_iter_reports_not_converged(self):
        res = minimize(quartic(), [50.0], max_iter=1)
        assert not res.converged

    def test_non_finite_start(self):
        obj = ObjectiveHandle(lambda x: np.log(x[:, 0]), lambda x: 1 / x, lambda x: (-1 / x**2)[:, :, None])
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteObjectiveError):
            minimize(obj, [-1.0])

    def test_rejects_bad_tolerance(self):
        with pytest.raises(ValueError):
            minimize(quartic(), [0.0], grad_tol=0.0)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_scalar(self):
        np.testing.assert_array_equal(cholesky([[4.0]]), [[2.0]])

    def test_two_by_two(self):
        H = np.array([[4.0, 2.0], [2.0, 3.0]])
        L = cholesky(H)
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)
        assert np.linalg.norm(L @ L.T - H) <= 1e-12 * np.linalg.norm(H)

    def test_random_spd_reconstruction(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            A = rng.normal(size=(3, 3))
            H = A @ A.T + 0.1 * np.eye(3)
            L = cholesky(H)
            assert np.allclose(L, np.tril(L))
            assert np.linalg.norm(L @ L.T - H) <= 1e-12 * np.linalg.norm(H)

    def test_indefinite(self):
        with pytest.raises(IndefiniteHessianError, match="indefinite Hessian"):
            cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_asymmetric(self):
        with pytest.raises(ValueError):
            cholesky([[1.0, 0.5], [0.0, 1.0]])


class TestRandomMap:
    @pytest.mark.parametrize("xi", [-2.5, -0.3, 0.7, 1.0, 4.0])
    def test_gaussian_case_is_affine(self, xi):
        mu, s = 1.5, 0.4
        obj = quadratic(mu, s, c=3.0)
        sol = solve_random_map(obj, [mu], 3.0, [[1 / s]], [xi])
        assert sol.x[0] == pytest.approx(mu + s * xi, abs=1e-12)
        assert sol.log_jacobian == pytest.approx(np.log(s), abs=1e-12)

    def test_reflection(self):
        obj = quadratic(0.2, 1.3)
        a = solve_random_map(obj, [0.2], 0.0, [[1 / 1.3]], [0.8])
        b = solve_random_map(obj, [0.2], 0.0, [[1 / 1.3]], [-0.8])
        assert a.x[0] - 0.2 == pytest.approx(0.2 - b.x[0], abs=1e-12)

    def test_zero_xi_returns_minimum(self):
        sol = solve_random_map(quadratic(2.0, 0.5), [2.0], 0.0, [[2.0]], [0.0])
        assert sol.x[0] == 2.0 and sol.lam == 0.0
        assert sol.log_jacobian == pytest.approx(np.log(0.5))

    def test_residual_property_non_quadratic(self):
        obj = quartic()
        res = minimize(obj, np.zeros((1, 1)))
        xi = np.random.default_rng(1).standard_normal((2000, 1)) * 2.0
        xm = np.repeat(res.x_min, 2000, axis=0)
        L = np.sqrt(obj.hessian(res.x_min))
        sol = solve_random_map(obj, xm, np.repeat(res.f_min, 2000), np.repeat(L, 2000, axis=0), xi)
        rho = xi[:, 0] ** 2
        resid = obj.value(sol.x) - res.f_min[0] - 0.5 * rho
        assert np.all(np.abs(resid) <= 1e-10 * (1 + rho))

    def test_multidimensional_gaussian_jacobian(self):
        # quadratic with Hessian H: x = m + L^{-T} xi, logJ = -log det L
        H = np.array([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]])
        m = np.array([0.5, -1.0, 2.0])
        obj = ObjectiveHandle(
            lambda x: 0.5 * np.einsum("ni,ij,nj->n", x - m, H, x - m),
            lambda x: (x - m) @ H,
            lambda x: np.broadcast_to(H, (x.shape[0], 3, 3)),
        )
        L = cholesky(H)
        xi = np.random.default_rng(3).standard_normal((100, 3))
        sol = solve_random_map(obj, np.tile(m, (100, 1)), np.zeros(100), np.tile(L, (100, 1, 1)), xi)
        expected = m + np.linalg.solve(L.T, xi.T).T
        np.testing.assert_allclose(sol.x, expected, atol=1e-10)
        np.testing.assert_allclose(sol.log_jacobian, -np.log(np.diag(L)).sum(), atol=1e-10)

    def test_log_jacobian_matches_finite_difference(self):
        obj = quartic()
        res = minimize(obj, [[0.0]])
        L = np.sqrt(obj.hessian(res.x_min))
        for xi in [-2.0, -0.5, 0.3, 1.7]:
            h = 1e-6
            up = solve_random_map(obj, res.x_min[0], res.f_min[0], L[0], [xi + h]).x[0]
            dn = solve_random_map(obj, res.x_min[0], res.f_min[0], L[0], [xi - h]).x[0]
            sol = solve_random_map(obj, res.x_min[0], res.f_min[0], L[0], [xi])
            assert sol.log_jacobian == pytest.approx(np.log((up - dn) / (2 * h)), abs=1e-6)

    def test_case1_distribution_matches_quadrature(self):
        obj = case1_objective()
        res = minimize(obj, [[0.6]])
        L = np.sqrt(obj.hessian(res.x_min))
        n = 10_000
        rng = np.random.default_rng(4)
        xi = rng.standard_normal((n, 1))
        sol = solve_random_map(obj, np.repeat(res.x_min, n, 0), np.repeat(res.f_min, n),
                               np.repeat(L, n, 0), xi)
        w = np.exp(sol.log_jacobian - sol.log_jacobian.max())
        picked = sol.x[resample_indices(w / w.sum(), rng), 0]
        grid, cdf = density_cdf_on_grid(lambda x: -case1_objective().value(x[:, None]), -3, 4)
        assert weighted_ks_distance(picked, np.ones(n), grid, cdf) < 0.02

    def test_non_quadratic_distribution_matches_quadrature(self):
        obj = quartic()
        res = minimize(obj, [[0.0]])
        L = np.sqrt(obj.hessian(res.x_min))
        n = 10_000
        rng = np.random.default_rng(5)
        xi = rng.standard_normal((n, 1))
        sol = solve_random_map(obj, np.repeat(res.x_min, n, 0), np.repeat(res.f_min, n),
                               np.repeat(L, n, 0), xi)
        w = np.exp(sol.log_jacobian - sol.log_jacobian.max())
        picked = sol.x[resample_indices(w / w.sum(), rng), 0]
        grid, cdf = density_cdf_on_grid(lambda x: -quartic().value(x[:, None]), -6, 6)
        assert weighted_ks_distance(picked, np.ones(n), grid, cdf) < 0.02
        # without the Jacobian correction the proposal is visibly off
        assert weighted_ks_distance(sol.x[:, 0], np.ones(n), grid, cdf) > 0.02

    def test_gaussian_exactness_moments(self):
        mu, s = -0.7, 0.3
        n = 100_000
        xi = np.random.default_rng(6).standard_normal((n, 1))
        sol = solve_random_map(quadratic(mu, s), np.full((n, 1), mu), np.zeros(n), np.full((n, 1, 1), 1 / s), xi)
        x = sol.x[:, 0]
        assert abs(x.mean() - mu) < 3 * s / np.sqrt(n)
        # var of the sample variance for a Gaussian is 2 s^4 / (n - 1)
        assert abs(x.var(ddof=1) - s**2) < 3 * np.sqrt(2 * s**4 / (n - 1))
        # slope roundoff near xi = 0 is the only source of spread
        assert np.ptp(sol.log_jacobian) < 1e-9

    def test_unbounded_direction(self):
        # F saturates at 1, so no root exists for |xi|^2/2 > 1
        obj = ObjectiveHandle(
            lambda x: 1.0 - np.exp(-0.5 * x[:, 0] ** 2),
            lambda x: x * np.exp(-0.5 * x**2),
            lambda x: ((1 - x**2) * np.exp(-0.5 * x**2))[:, :, None],
        )
        with pytest.raises(UnboundedDirectionError):
            solve_random_map(obj, [0.0], 0.0, [[1.0]], [3.0])


class TestGradientCheck:
    def test_case1_objective_gradient(self):
        obj = case1_objective(n=1)
        rng = np.random.default_rng(7)
        for x in rng.uniform(-3, 3, 100):
            h = 1e-6 * (1 + abs(x))
            fd = (obj.value(np.array([[x + h]])) - obj.value(np.array([[x - h]])))[0] / (2 * h)
            g = obj.gradient(np.array([[x]]))[0, 0]
            assert abs(fd - g) <= 1e-5 * max(1.0, abs(g))
