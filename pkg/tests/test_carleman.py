import math

import numpy as np
import pytest

from carleman_lab import (
    DrivenNoiseFamily,
    PreconditionError,
    SPDEProblem,
    WeightSpec,
    boundary_flux,
    carleman_sweep,
    ensemble_run,
    estimate_report,
    eval_weights,
    make_grid,
    terminal_values,
    unit_weight_tables,
    weighted_lhs,
    weighted_rhs,
)


def tiny_ensemble(seed=3, with_sources=True):
    g = make_grid(1.0, 4)
    K, T = 2, 0.5
    rng = np.random.default_rng(seed)
    f_tab = rng.standard_normal((K + 1, 6)) if with_sources else np.zeros((K + 1, 6))
    g_tab = rng.standard_normal((K + 1, 6)) if with_sources else np.zeros((K + 1, 6))
    y0 = rng.standard_normal(4) if with_sources else None
    p = SPDEProblem(grid=g, T=T, f=f_tab, g=g_tab, y0=y0, num_steps=K)
    e = ensemble_run(p, 1, 13)
    return e, f_tab, g_tab


def oracle_terms(e, s, lam, t0, beta, x_star, f_tab, g_tab, c_lambda, gammas=None):
    """Independent triple-loop evaluation of every weighted integral."""
    g = e.grid
    N, h = g.N, g.h
    K = e.times.size - 1
    dt = float(e.times[1] - e.times[0])
    M = e.M

    def phi(i, n):
        psi = (g.nodes[i] - x_star) ** 2 - beta * (e.times[n] - t0) ** 2
        return math.exp(lam * psi)

    lhs = [0.0, 0.0, 0.0, 0.0]
    rhs = [0.0, 0.0, 0.0, 0.0]
    for m in range(M):
        y = e.solutions[m]
        for n in range(K):
            for i in range(1, N + 1):
                ph = phi(i, n)
                th2 = math.exp(2.0 * s * ph)
                lap = (y[n, i + 1] - 2.0 * y[n, i] + y[n, i - 1]) / h**2
                lhs[0] += dt * h * th2 / (s * ph) * lap**2 / M
                lhs[2] += dt * h * s**3 * lam**4 * ph**3 * th2 * y[n, i] ** 2 / M
                rhs[0] += dt * h * th2 * f_tab[n, i] ** 2 / M
            for i in range(0, N + 1):
                ph = phi(i, n)
                th2 = math.exp(2.0 * s * ph)
                dplus = (y[n, i + 1] - y[n, i]) / h
                dg = (g_tab[n, i + 1] - g_tab[n, i]) / h
                lhs[1] += dt * h * s * lam**2 * ph * th2 * dplus**2 / M
                lhs[3] += dt * h * s * lam**2 * ph * th2 * g_tab[n, i] ** 2 / M
                rhs[1] += dt * h * s * ph * th2 * dg**2 / M
            ph_edge = phi(N + 1, n)
            th2_edge = math.exp(2.0 * s * ph_edge)
            flux = (y[n, N + 1] - y[n, N]) / h
            rhs[2] += dt * s * lam * ph_edge * th2_edge * flux**2 / M
        term = sum(h * y[K, i] ** 2 for i in range(1, N + 1))
        rhs[3] += s**2 * math.exp(c_lambda * s) * term / M
    if gammas is not None:
        data_sq = 0.0
        for series in gammas:
            l2 = sum(dt * series[n] ** 2 for n in range(K))
            d1 = sum(dt * ((series[n + 1] - series[n]) / dt) ** 2 for n in range(K))
            data_sq += l2 + d1
        rhs.append(s**3 * math.exp(c_lambda * s) * data_sq)
    return lhs, rhs


class TestWeightedTerms:
    def test_zero_solution_zero_terms(self):
        e, _f, _g = tiny_ensemble(with_sources=False)
        w = WeightSpec(lam=1.0, s=2.0, t0=0.25, beta=1.0, x_star=-0.5)
        zeros = np.zeros((3, 6))
        lhs = weighted_lhs(e, w, zeros)
        assert lhs.values == (0.0, 0.0, 0.0, 0.0)
        rhs = weighted_rhs(
            e, w, zeros, zeros, flux=boundary_flux(e), y_terminal=terminal_values(e)
        )
        assert all(v == 0.0 for v in rhs.values)

    def test_prefactor_scaling_on_frozen_tables(self):
        e, _f, g_tab = tiny_ensemble()
        tables = unit_weight_tables(e.grid, e.times)

        def term3(s):
            w = WeightSpec(lam=1.0, s=s, t0=0.25, beta=1.0, x_star=-0.5)
            return weighted_lhs(e, w, g_tab, tables=tables).values[2]

        assert term3(4.0) == pytest.approx(8.0 * term3(2.0), rel=1e-13)

    def test_constant_in_space_noise_kills_gradient_term(self):
        e, f_tab, _g = tiny_ensemble()
        w = WeightSpec(lam=1.0, s=2.0, t0=0.25, beta=1.0, x_star=-0.5)
        g_const = np.ones((3, 6)) * np.linspace(1.0, 2.0, 3)[:, None]
        rhs = weighted_rhs(
            e, w, f_tab, g_const, flux=boundary_flux(e), y_terminal=terminal_values(e)
        )
        assert rhs.values[1] == 0.0

    def test_requires_positive_s(self):
        e, _f, g_tab = tiny_ensemble()
        w = WeightSpec(lam=1.0, s=0.0, t0=0.25, beta=1.0, x_star=-0.5)
        with pytest.raises(PreconditionError):
            weighted_lhs(e, w, g_tab)

    def test_positivity(self):
        e, f_tab, g_tab = tiny_ensemble()
        w = WeightSpec(lam=1.0, s=2.0, t0=0.25, beta=1.0, x_star=-0.5)
        rep = estimate_report(e, w, f_tab, g_tab)
        assert all(v >= 0.0 for v in rep.lhs.values)
        assert all(v >= 0.0 for v in rep.rhs.values)
        assert rep.ratio >= 0.0


class TestBruteForceOracle:
    @pytest.mark.parametrize("c_lambda", [0.5, 1.0, 2.0])
    def test_all_terms_match_triple_loops(self, c_lambda):
        e, f_tab, g_tab = tiny_ensemble()
        s, lam, t0, beta, x_star = 2.0, 1.5, 0.25, 0.7, -0.4
        w = WeightSpec(lam=lam, s=s, t0=t0, beta=beta, x_star=x_star)
        tables = eval_weights(w, e.grid, e.times)
        K = e.times.size - 1
        gam1 = np.zeros(K + 1)
        gam2 = np.sin(np.linspace(0.0, 1.0, K + 1))

        lhs = weighted_lhs(e, w, g_tab, tables=tables)
        rhs = weighted_rhs(
            e, w, f_tab, g_tab,
            flux=boundary_flux(e), y_terminal=terminal_values(e),
            gamma1=gam1, gamma2=gam2, c_lambda=c_lambda, tables=tables,
        )
        oracle_lhs, oracle_rhs = oracle_terms(
            e, s, lam, t0, beta, x_star, f_tab, g_tab, c_lambda, gammas=[gam1, gam2]
        )
        for got, want in zip(lhs.values, oracle_lhs):
            assert got == pytest.approx(want, rel=1e-12)
        for got, want in zip(rhs.values, oracle_rhs):
            assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


class TestReports:
    def test_degenerate_flagged(self):
        e, _f, _g = tiny_ensemble(with_sources=False)
        w = WeightSpec(lam=1.0, s=2.0, t0=0.25, beta=1.0, x_star=-0.5)
        zeros = np.zeros((3, 6))
        rep = estimate_report(e, w, zeros, zeros)
        assert rep.degenerate
        assert math.isnan(rep.ratio)

    def test_report_fields(self):
        e, f_tab, g_tab = tiny_ensemble()
        w = WeightSpec(lam=1.0, s=2.0, t0=0.25, beta=1.0, x_star=-0.5)
        rep = estimate_report(e, w, f_tab, g_tab)
        assert rep.s == 2.0 and rep.lam == 1.0 and rep.h == e.grid.h and rep.M == 1
        assert math.isfinite(rep.ratio)


class TestSweep:
    def test_window_skip_recorded(self):
        res = carleman_sweep(
            s_grid=[2.0, 50.0], lambda_grid=[1.0], h_grid=[1 / 8],
            M=2, eps_cfg=1.0, T=0.5, K=8, master_seed=1,
        )
        assert len(res.skipped) == 1
        cell = res.skipped[0]
        assert cell.s == 50.0
        assert "sqrt(eps_cfg/h)" in cell.reason
        assert len(res.reports) == 1

    def test_zero_family_degenerate_table(self):
        class ZeroFamily:
            def build(self, grid, T, K):
                z = np.zeros((K + 1, grid.N + 2))
                return SPDEProblem(grid=grid, T=T, num_steps=K), z, z

        res = carleman_sweep(
            s_grid=[2.0], lambda_grid=[1.0], h_grid=[1 / 8, 1 / 16],
            M=2, eps_cfg=1.0, T=0.5, K=8, master_seed=1, family=ZeroFamily(),
        )
        assert all(rep.degenerate for rep in res.reports)
        assert res.max_ratio_by_h == {}

    def test_shared_ensemble_consistency(self):
        # reports at one h share paths: ratios vary smoothly in s, never nan
        res = carleman_sweep(
            s_grid=[2.0, 2.5], lambda_grid=[1.0], h_grid=[1 / 16],
            M=8, eps_cfg=1.0, T=0.5, K=16, master_seed=4,
        )
        assert len(res.reports) == 2
        assert all(math.isfinite(rep.ratio) for rep in res.reports)
