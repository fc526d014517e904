import math
from dataclasses import dataclass

import numpy as np
import pytest

from carleman_lab import (
    ContinuationError,
    InvalidArgumentError,
    OscillatoryBoundaryFamily,
    SPDEProblem,
    adjoint_residual,
    continue_solution,
    ensemble_run,
    fit_power_law,
    generate_cauchy_data,
    global_h2_norm,
    holder_experiment,
    interior_norm,
    make_grid,
    sample_brownian,
)
from carleman_lab.cauchy import smallest_grid_with_level_inclusion
from carleman_lab.forward import Ensemble


def frozen_ensemble(grid, times, table):
    """Wrap a deterministic space-time table as a single-path ensemble."""
    return Ensemble(
        grid=grid,
        times=times,
        paths=[sample_brownian(float(times[-1]), times.size - 1, 0)],
        solutions=np.asarray(table, dtype=float)[None, :, :],
    )


class TestCauchyData:
    def test_zero_solution(self):
        g = make_grid(1.0, 8)
        times = np.linspace(0.0, 1.0, 9)
        e = frozen_ensemble(g, times, np.zeros((9, 10)))
        data = generate_cauchy_data(e)
        assert np.all(data.xi == 0.0) and np.all(data.eta == 0.0)
        assert data.data_norm == 0.0

    def test_linear_trace(self):
        # frozen y(x, t) = x: trace L, flux 1
        g = make_grid(1.0, 8)
        times = np.linspace(0.0, 1.0, 5)
        table = np.tile(g.nodes, (5, 1))
        data = generate_cauchy_data(frozen_ensemble(g, times, table))
        assert np.all(data.xi == 1.0)
        assert np.allclose(data.eta, 1.0, rtol=1e-13)

    def test_tiny_instance_norms_match_loops(self):
        g = make_grid(1.0, 4)
        T, K = 0.5, 4
        times = np.linspace(0.0, T, K + 1)
        rng = np.random.default_rng(5)
        table = rng.standard_normal((K + 1, 6))
        data = generate_cauchy_data(frozen_ensemble(g, times, table))
        dt = T / K
        xi = [table[n, 5] for n in range(K + 1)]
        eta = [(table[n, 5] - table[n, 4]) / g.h for n in range(K + 1)]
        xi_h1 = sum(dt * xi[n] ** 2 for n in range(K)) + sum(
            dt * ((xi[n + 1] - xi[n]) / dt) ** 2 for n in range(K)
        )
        eta_l2 = sum(dt * eta[n] ** 2 for n in range(K))
        assert data.xi_h1 == pytest.approx(math.sqrt(xi_h1), rel=1e-12)
        assert data.eta_l2 == pytest.approx(math.sqrt(eta_l2), rel=1e-12)


class TestInteriorNorm:
    def test_zero(self):
        g = make_grid(1.0, 8)
        times = np.linspace(0.0, 1.0, 9)
        assert interior_norm(frozen_ensemble(g, times, np.zeros((9, 10))), 0.5, 0.1) == 0.0

    def test_whole_domain_equals_global(self):
        g = make_grid(1.0, 12)
        times = np.linspace(0.0, 1.0, 9)
        table = np.random.default_rng(3).standard_normal((9, 14))
        e = frozen_ensemble(g, times, table)
        assert interior_norm(e, 0.0, 0.0) == global_h2_norm(e)

    def test_tiny_instance_matches_loops(self):
        g = make_grid(1.0, 4)
        T, K = 1.0, 4
        times = np.linspace(0.0, T, K + 1)
        table = np.random.default_rng(7).standard_normal((K + 1, 6))
        e = frozen_ensemble(g, times, table)
        x_left, eps = 0.45, 0.3
        got = interior_norm(e, x_left, eps)
        dt = T / K
        total = 0.0
        for n in range(K):
            t = times[n]
            if not (eps <= t < T - eps):
                continue
            for i in range(1, 5):
                if g.nodes[i] > x_left:
                    lap = (table[n, i + 1] - 2 * table[n, i] + table[n, i - 1]) / g.h**2
                    total += dt * g.h * (lap**2 + table[n, i] ** 2)
            for i in range(0, 5):
                if g.nodes[i + 1] > x_left:
                    total += dt * g.h * ((table[n, i + 1] - table[n, i]) / g.h) ** 2
        assert got == pytest.approx(math.sqrt(total), rel=1e-12)

    def test_subset_monotonicity(self):
        g = make_grid(1.0, 16)
        times = np.linspace(0.0, 1.0, 17)
        table = np.random.default_rng(11).standard_normal((17, 18))
        e = frozen_ensemble(g, times, table)
        assert interior_norm(e, 0.5, 0.3) <= interior_norm(e, 0.5, 0.1)
        assert interior_norm(e, 0.7, 0.1) <= interior_norm(e, 0.5, 0.1)

    def test_empty_restriction_names_minimum(self):
        g = make_grid(1.0, 4)
        times = np.linspace(0.0, 1.0, 5)
        e = frozen_ensemble(g, times, np.zeros((5, 6)))
        with pytest.raises(InvalidArgumentError) as err:
            interior_norm(e, 0.95, 0.1)
        assert "N >=" in str(err.value)


class TestPowerLawFit:
    def test_exact_half_exponent(self):
        data = 10.0 ** -np.linspace(1.0, 6.0, 12)
        interior = 3.7 * data**0.5
        fit = fit_power_law(data, interior)
        assert fit.kappa == pytest.approx(0.5, abs=1e-6)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.bound_constant == pytest.approx(3.7, rel=1e-6)

    def test_scale_invariance(self):
        data = 10.0 ** -np.linspace(1.0, 4.0, 8)
        interior = 0.9 * data**0.35
        base = fit_power_law(data, interior)
        shifted = fit_power_law(1e-3 * data, 1e-3 * interior)
        assert shifted.kappa == pytest.approx(base.kappa, abs=1e-12)

    def test_needs_two_records(self):
        with pytest.raises(InvalidArgumentError):
            fit_power_law([1.0], [1.0])


class TestHolderExperiment:
    def test_zero_family_skipped(self):
        class ZeroFamily:
            def problem(self, scale, grid, T, K):
                return SPDEProblem(grid=grid, T=T, num_steps=K)

        g = make_grid(1.0, 8)
        records, fit = holder_experiment(
            ZeroFamily(), [1.0, 2.0], g, T=1.0, K=8, M=2, master_seed=1,
            x_left=0.5, epsilon=0.1,
        )
        assert records == []
        assert fit is None

    def test_default_family_deterministic(self):
        g = make_grid(1.0, 31)
        records, fit = holder_experiment(
            OscillatoryBoundaryFamily(), [32, 64, 128, 256, 512], g,
            T=1.0, K=256, M=1, master_seed=1, x_left=0.5, epsilon=0.05,
        )
        assert fit is not None
        assert 0.0 < fit.kappa < 1.0
        assert fit.r_squared >= 0.9
        assert all(r.kappa == fit.kappa for r in records)
        assert all(r.m_bound == 1.0 for r in records)
        # regime context recorded
        assert records[0].n_level > 1
        assert len(records[0].t0_tiles) >= 1

    def test_family_scaling_leaves_kappa_unchanged(self):
        @dataclass(frozen=True)
        class Scaled:
            inner: OscillatoryBoundaryFamily
            amp: float

            def problem(self, scale, grid, T, K):
                p = self.inner.problem(scale, grid, T, K)
                gam = p.gamma1
                return SPDEProblem(
                    grid=p.grid, T=p.T, c=p.c,
                    gamma1=lambda t: self.amp * gam(t),
                    y0=self.amp * np.asarray(p.y0), num_steps=p.num_steps,
                )

        g = make_grid(1.0, 15)
        kw = dict(T=1.0, K=128, M=1, master_seed=1, x_left=0.5, epsilon=0.05)
        scales = [32, 90, 256]
        _, fit1 = holder_experiment(OscillatoryBoundaryFamily(), scales, g, **kw)
        _, fit2 = holder_experiment(
            Scaled(OscillatoryBoundaryFamily(), 1e-3), scales, g, **kw
        )
        assert fit2.kappa == pytest.approx(fit1.kappa, rel=1e-9)


class TestContinuation:
    def setup_method(self):
        self.grid = make_grid(1.0, 16)
        self.T, self.K = 0.5, 32
        self.y0_true = np.sin(np.pi * self.grid.interior) + 0.3 * np.sin(
            3 * np.pi * self.grid.interior
        )
        p = SPDEProblem(grid=self.grid, T=self.T, y0=self.y0_true, num_steps=self.K)
        self.e = ensemble_run(p, 1, 7)
        self.data = generate_cauchy_data(self.e)

    def test_alpha_ladder_monotone(self):
        errs = []
        for alpha in (1e-2, 1e-4, 1e-6):
            res = continue_solution(
                self.data, self.grid, alpha=alpha, x_left=0.5, epsilon=0.05, max_iter=800
            )
            truth = self.e.solutions[0][res.window[:, None], res.node_indices[None, :]]
            errs.append(np.linalg.norm(res.restricted[0] - truth) / np.linalg.norm(truth))
        assert errs[0] > errs[1] > errs[2]

    def test_zero_data_zero_reconstruction(self):
        p = SPDEProblem(grid=self.grid, T=self.T, num_steps=self.K)
        data = generate_cauchy_data(ensemble_run(p, 1, 7))
        res = continue_solution(data, self.grid, alpha=1e-4, x_left=0.5, epsilon=0.05)
        assert np.all(res.y0 == 0.0)
        assert np.all(res.restricted == 0.0)

    def test_adjoint_identity(self):
        times = self.e.times
        inc = sample_brownian(self.T, self.K, 99).increments
        for kwargs in (
            {},
            {"a": 0.5, "b": -0.3},
            {"a": 0.5, "b": -0.3, "c": 0.2, "increments": inc},
        ):
            assert adjoint_residual(self.grid, times, seed=2, **kwargs) <= 1e-10

    def test_nonconvergence_raises_with_history(self):
        with pytest.raises(ContinuationError) as err:
            continue_solution(
                self.data, self.grid, alpha=1e-6, x_left=0.5, epsilon=0.05, max_iter=2
            )
        histories = err.value.residual_histories
        assert 0 in histories and len(histories[0]) >= 2

    def test_noise_requires_increments(self):
        with pytest.raises(InvalidArgumentError):
            continue_solution(self.data, self.grid, alpha=1e-4, c=0.5)


def test_level_inclusion_scan_finds_a_grid():
    N = smallest_grid_with_level_inclusion(
        L=1.0, T=1.0, epsilon=0.1, x_left=0.5, lam=2.0
    )
    assert N is not None and N >= 8
