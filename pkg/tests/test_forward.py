import math

import numpy as np
import pytest

from carleman_lab import (
    InvalidArgumentError,
    SPDEProblem,
    ensemble_run,
    expectation,
    make_grid,
    path_seed,
    rect_integral,
    sample_brownian,
    solve_deterministic_lifting,
    solve_forward,
    time_h1_sq,
    time_l2_sq,
)


class TestBrownian:
    def test_reproducible(self):
        p1 = sample_brownian(1.0, 64, 42)
        p2 = sample_brownian(1.0, 64, 42)
        assert np.array_equal(p1.increments, p2.increments)
        assert p1.K * p1.dt == 1.0

    def test_moments(self):
        M, T = 100_000, 0.7
        totals = np.empty(M)
        for m in range(M):
            totals[m] = sample_brownian(T, 4, path_seed(17, m)).increments.sum()
        assert abs(totals.mean()) <= 3.0 * math.sqrt(T / M)
        second = (totals**2).mean()
        se = (totals**2).std(ddof=1) / math.sqrt(M)
        assert abs(second - T) <= 3.0 * se

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            sample_brownian(1.0, 0, 1)
        with pytest.raises(InvalidArgumentError):
            sample_brownian(-1.0, 4, 1)


class TestPathSeeds:
    def test_disjoint_masters_disjoint_seeds(self):
        a = {path_seed(1, m) for m in range(1000)}
        b = {path_seed(2, m) for m in range(1000)}
        assert not (a & b)
        assert len(a) == 1000

    def test_range_checks(self):
        with pytest.raises(InvalidArgumentError):
            path_seed(1 << 64, 0)
        with pytest.raises(InvalidArgumentError):
            path_seed(0, -1)


class TestSolveForward:
    def test_zero_everything(self):
        g = make_grid(1.0, 8)
        p = SPDEProblem(grid=g, T=0.5, num_steps=16)
        sol = solve_forward(p, sample_brownian(0.5, 16, 3))
        assert np.all(sol.values == 0.0)

    def test_eigen_decay(self):
        g = make_grid(1.0, 31)
        T, K = 0.25, 64
        p = SPDEProblem(grid=g, T=T, y0=np.sin(np.pi * g.interior), num_steps=K)
        sol = solve_forward(p, sample_brownian(T, K, 1))
        lam1 = 4.0 / g.h**2 * math.sin(math.pi * g.h / 2.0) ** 2
        dt = T / K
        for n in range(K + 1):
            exact = (1.0 + dt * lam1) ** (-n) * np.sin(np.pi * g.nodes)
            assert np.max(np.abs(sol.values[n] - exact)) <= 1e-10

    def test_noise_mean_field(self):
        # additive unit noise from zero data: mean solves the zero heat problem
        g = make_grid(1.0, 15)
        T, K, M = 0.25, 32, 10_000
        p = SPDEProblem(grid=g, T=T, g=np.ones(17), num_steps=K)
        s1 = solve_forward(p, sample_brownian(T, K, path_seed(5, 0)))
        s2 = solve_forward(p, sample_brownian(T, K, path_seed(5, 1)))
        assert not np.array_equal(s1.values, s2.values)
        e = ensemble_run(p, M, 5)
        mean = e.solutions.mean(axis=0)
        se = e.solutions.std(axis=0, ddof=1) / math.sqrt(M)
        assert np.all(np.abs(mean) <= 3.0 * se + 1e-12)

    def test_pathwise_linearity(self):
        g = make_grid(1.0, 12)
        T, K = 0.5, 24
        path = sample_brownian(T, K, 9)
        rng = np.random.default_rng(0)
        f = rng.standard_normal(14)
        gtab = rng.standard_normal(14)
        y0 = rng.standard_normal(12)
        gam2 = lambda t: math.sin(t)

        def solve(scale):
            p = SPDEProblem(
                grid=g, T=T, a=0.3, b=-0.2, c=0.5,
                f=scale * f, g=scale * gtab, y0=scale * y0,
                gamma2=lambda t: scale * gam2(t), num_steps=K,
            )
            return solve_forward(p, path).values

        base = solve(1.0)
        tripled = solve(3.0)
        assert np.allclose(tripled, 3.0 * base, rtol=1e-12, atol=1e-13)

    def test_unconditional_stability(self):
        g = make_grid(1.0, 20)
        rng = np.random.default_rng(7)
        y0 = rng.standard_normal(20)
        for K in (4, 16, 256):
            p = SPDEProblem(grid=g, T=1.0, y0=y0, num_steps=K)
            sol = solve_forward(p, sample_brownian(1.0, K, 1))
            l2 = np.sqrt(g.h * (sol.values[:, 1:-1] ** 2).sum(axis=1))
            assert np.all(np.diff(l2) <= 1e-14)

    def test_nan_rejected(self):
        g = make_grid(1.0, 8)
        p = SPDEProblem(grid=g, T=0.5, f=np.full(10, np.nan), num_steps=8)
        with pytest.raises(InvalidArgumentError):
            solve_forward(p, sample_brownian(0.5, 8, 0))

    def test_manufactured_convergence_two_rungs(self):
        def error(N):
            g = make_grid(1.0, N)
            T = 0.25
            K = int(round(T / (g.h**2 / 4.0)))
            f = lambda t: (math.pi**2 - 1.0) * math.exp(-t) * np.sin(math.pi * g.nodes)
            p = SPDEProblem(grid=g, T=T, f=f, y0=np.sin(math.pi * g.interior), num_steps=K)
            sol = solve_forward(p, sample_brownian(T, K, 0))
            exact = math.exp(-T) * np.sin(math.pi * g.nodes)
            return float(np.max(np.abs(sol.values[-1] - exact)))

        e1, e2 = error(7), error(15)
        assert 1.7 <= math.log2(e1 / e2) <= 4.3


class TestLifting:
    def test_zero_data(self):
        g = make_grid(1.0, 15)
        res = solve_deterministic_lifting(None, None, g, 1.0, 32)
        assert np.all(res.u.values == 0.0)
        assert np.all(res.flux == 0.0)

    def test_ramp_is_bounded_by_data_norm(self):
        g = make_grid(1.0, 31)
        K = 64
        res = solve_deterministic_lifting(None, lambda t: t, g, 1.0, K)
        dt = 1.0 / K
        gam_h1 = math.sqrt(time_h1_sq(np.arange(K + 1) * dt, dt))
        u_l2 = math.sqrt(
            sum(dt * g.h * float((res.u.values[n, 1:-1] ** 2).sum()) for n in range(K))
        )
        flux_l2 = math.sqrt(dt * float((res.flux[:-1] ** 2).sum()))
        assert u_l2 <= 2.0 * gam_h1
        assert flux_l2 <= 2.0 * gam_h1

    def test_linearity(self):
        g = make_grid(1.0, 15)
        one = solve_deterministic_lifting(None, lambda t: t, g, 1.0, 32)
        two = solve_deterministic_lifting(None, lambda t: 2.0 * t, g, 1.0, 32)
        assert np.allclose(two.u.values, 2.0 * one.u.values, rtol=1e-13, atol=1e-15)

    def test_compatibility(self):
        g = make_grid(1.0, 15)
        with pytest.raises(InvalidArgumentError):
            solve_deterministic_lifting(None, lambda t: 1.0 + t, g, 1.0, 32)


class TestEnsemble:
    def problem(self):
        g = make_grid(1.0, 15)
        return SPDEProblem(
            grid=g, T=0.5, c=0.4, g=np.ones(17),
            y0=np.sin(np.pi * g.interior), num_steps=32,
        )

    def test_single_path_matches_solve_forward(self):
        p = self.problem()
        e = ensemble_run(p, 1, 77)
        direct = solve_forward(p, sample_brownian(0.5, 32, path_seed(77, 0)))
        assert np.array_equal(e.solutions[0], direct.values)

    def test_parallel_bit_identical(self):
        p = self.problem()
        serial = ensemble_run(p, 600, 31, parallel=False)
        threaded = ensemble_run(p, 600, 31, parallel=True, num_threads=4)
        assert np.array_equal(serial.solutions, threaded.solutions)

    def test_distinct_paths(self):
        p = self.problem()
        e = ensemble_run(p, 4, 3)
        seeds = {path.seed for path in e.paths}
        assert len(seeds) == 4

    def test_m_validation(self):
        with pytest.raises(InvalidArgumentError):
            ensemble_run(self.problem(), 0, 1)


class TestExpectation:
    def test_constant_functional(self):
        p = TestEnsemble().problem()
        e = ensemble_run(p, 8, 1)
        res = expectation(lambda sol, path: 4.5, e)
        assert res.mean == 4.5
        assert res.std_error == 0.0

    def test_brownian_variance(self):
        g = make_grid(1.0, 4)
        p = SPDEProblem(grid=g, T=0.8, num_steps=16)
        e = ensemble_run(p, 4000, 11)
        res = expectation(lambda sol, path: path.increments.sum() ** 2, e)
        assert abs(res.mean - 0.8) <= 3.0 * res.std_error

    def test_zero_problem_functional(self):
        g = make_grid(1.0, 6)
        p = SPDEProblem(grid=g, T=0.5, num_steps=8)
        e = ensemble_run(p, 16, 2)
        res = expectation(
            lambda sol, path: rect_integral((sol[:, 1:-1] ** 2).sum(axis=1), e.dt), e
        )
        assert res.mean == 0.0
        assert res.std_error == 0.0

    def test_single_path_flagged(self):
        p = TestEnsemble().problem()
        e = ensemble_run(p, 1, 1)
        res = expectation(lambda sol, path: 1.0, e)
        assert res.std_error is None


class TestTimeQuadrature:
    def test_rectangle_rule(self):
        series = np.array([1.0, 2.0, 3.0, 4.0])
        assert rect_integral(series, 0.5) == pytest.approx(3.0, rel=1e-15)

    def test_l2_and_h1(self):
        dt = 0.25
        series = np.array([0.0, 0.25, 0.5, 0.75, 1.0])  # gamma(t) = t on [0, 1]
        assert time_l2_sq(series, dt) == pytest.approx(
            dt * (0.0 + 0.0625 + 0.25 + 0.5625), rel=1e-14
        )
        assert time_h1_sq(series, dt) == pytest.approx(
            time_l2_sq(series, dt) + 1.0, rel=1e-14
        )
