"""Lateral Cauchy problem: data extraction, conditional-stability
measurement, and a regularized interior continuation solver.

A solution of the interior system

    dy - lap_h(y) dt = (a y + b D+ y) dt + c y dB(t)

is observed only through its right-edge trace xi(t) = y_{N+1} and flux
eta(t) = (D- y)_{N+1}. The stability experiment measures how the interior
norm over G0 x (eps, T - eps) scales with the data norm across a family
of solutions normalized to a common global bound; the log-log slope
estimates the Holder exponent. The continuation solver recovers initial
data per path by conjugate gradient on the regularized normal equations,
using the forward solve as the operator and its mechanically transposed
recursion as the adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContinuationError, InvalidArgumentError
from .forward import (
    Ensemble,
    SPDEProblem,
    _coef_rows,
    _solve_batch,
    _ThomasFactors,
    ensemble_run,
    time_h1_sq,
    time_l2_sq,
)
from .grid import GridSpec, make_grid
from .weights import parabola_profile

__all__ = [
    "CauchyData",
    "generate_cauchy_data",
    "interior_norm",
    "global_h2_norm",
    "HolderRecord",
    "KappaFit",
    "fit_power_law",
    "OscillatoryBoundaryFamily",
    "holder_experiment",
    "ContinuationResult",
    "continue_solution",
    "adjoint_residual",
    "smallest_grid_with_level_inclusion",
]


@dataclass(frozen=True, eq=False)
class CauchyData:
    """Right-edge trace and flux series per path, with their time norms."""

    times: np.ndarray
    h: float
    xi: np.ndarray           # (M, K+1) trace at x_{N+1}
    eta: np.ndarray          # (M, K+1) backward-difference flux at x_{N+1}
    xi_h1_sq: np.ndarray     # per-path squared H1(0,T) norms
    eta_l2_sq: np.ndarray
    xi_h1: float             # sqrt of ensemble means
    eta_l2: float

    @property
    def data_norm(self) -> float:
        return self.xi_h1 + self.eta_l2


def generate_cauchy_data(e: Ensemble) -> CauchyData:
    """Extract the lateral data series from every path of an ensemble."""
    sol = e.solutions
    xi = sol[:, :, -1].copy()
    eta = (sol[:, :, -1] - sol[:, :, -2]) / e.grid.h
    dt = e.dt
    xi_h1_sq = np.asarray(time_h1_sq(xi, dt), dtype=float)
    eta_l2_sq = np.asarray(time_l2_sq(eta, dt), dtype=float)
    return CauchyData(
        times=e.times,
        h=e.grid.h,
        xi=xi,
        eta=eta,
        xi_h1_sq=xi_h1_sq,
        eta_l2_sq=eta_l2_sq,
        xi_h1=math.sqrt(float(np.mean(xi_h1_sq))),
        eta_l2=math.sqrt(float(np.mean(eta_l2_sq))),
    )


def _restriction_indices(grid: GridSpec, x_left: float):
    """Node index sets for the sub-domain (x_left, L].

    value/laplacian parts run over interior nodes inside the sub-domain;
    the forward-difference part runs over segments whose right end lies
    inside, so x_left = 0 reproduces the global norm.
    """
    if not (0.0 <= x_left < grid.L):
        raise InvalidArgumentError(f"need 0 <= x_left < L, got {x_left}")
    interior = np.arange(1, grid.N + 1)
    inner = interior[grid.nodes[interior] > x_left]
    if inner.size == 0:
        n_min = int(math.floor(x_left / (grid.L - x_left))) + 1
        raise InvalidArgumentError(
            f"no interior node lies in ({x_left}, {grid.L}]; need N >= {n_min}"
        )
    minus = np.arange(0, grid.N + 1)
    seg = minus[grid.nodes[minus + 1] > x_left]
    return inner, seg


def _window_indices(times: np.ndarray, epsilon: float):
    T = float(times[-1])
    if not (0.0 <= epsilon < T / 2.0):
        raise InvalidArgumentError(f"need 0 <= eps < T/2, got eps={epsilon}, T={T}")
    idx = np.nonzero((times >= epsilon) & (times < T - epsilon))[0]
    idx = idx[idx < times.size - 1]  # rectangle rule never uses the final level
    if idx.size == 0:
        raise InvalidArgumentError("time window (eps, T-eps) contains no grid points")
    return idx


def _h2_restricted_sq(sol: np.ndarray, grid: GridSpec, window, inner, seg) -> np.ndarray:
    """Per-path squared L2-in-time H2-in-space norm over the restriction."""
    h = grid.h
    acc = np.zeros(sol.shape[0])
    for n in window:
        level = sol[:, n, :]
        lap = (level[:, 2:] - 2.0 * level[:, 1:-1] + level[:, :-2]) / h**2
        dplus = (level[:, 1:] - level[:, :-1]) / h
        vals = level[:, 1:-1]
        acc += (lap[:, inner - 1] ** 2).sum(axis=1) + (vals[:, inner - 1] ** 2).sum(axis=1)
        acc += (dplus[:, seg] ** 2).sum(axis=1)
    return h * acc  # dt applied by callers


def interior_norm(e: Ensemble, x_left: float, epsilon: float) -> float:
    """Ensemble H2 norm of the solution over (x_left, L] x (eps, T - eps),
    rectangle rule in time, averaged over paths (square root of the mean
    squared norm)."""
    inner, seg = _restriction_indices(e.grid, x_left)
    window = _window_indices(e.times, epsilon)
    per_path = e.dt * _h2_restricted_sq(e.solutions, e.grid, window, inner, seg)
    return math.sqrt(float(np.mean(per_path)))


def global_h2_norm(e: Ensemble) -> float:
    """Ensemble norm over the whole space-time cylinder (the bound M)."""
    return interior_norm(e, 0.0, 0.0)


@dataclass(frozen=True)
class KappaFit:
    """Least-squares fit of log(interior) against log(data).

    slope estimates (1 - kappa); bound_constant = exp(intercept + max
    positive residual) makes interior <= bound_constant * data^slope hold
    for every fitted record (with the common unit global bound)."""

    kappa: float
    slope: float
    intercept: float
    r_squared: float
    n_records: int
    bound_constant: float


def fit_power_law(data_norms, interior_norms) -> KappaFit:
    x = np.log(np.asarray(data_norms, dtype=float))
    y = np.log(np.asarray(interior_norms, dtype=float))
    if x.size != y.size or x.size < 2:
        raise InvalidArgumentError("need at least two (data, interior) records")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidArgumentError("norms must be positive and finite")
    slope, intercept = np.polyfit(x, y, 1)
    fitted = intercept + slope * x
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r_sq = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-28 else 0.0)
    return KappaFit(
        kappa=float(1.0 - slope),
        slope=float(slope),
        intercept=float(intercept),
        r_squared=r_sq,
        n_records=int(x.size),
        bound_constant=float(np.exp(intercept + max(0.0, float(np.max(y - fitted))))),
    )


@dataclass(frozen=True)
class HolderRecord:
    """One normalized family member: unit global bound, measured data and
    interior norms, plus the weight-parameter context of the regime
    (level band beta, minimal level count, admissible time centers)."""

    h: float
    epsilon: float
    scale: float
    m_bound: float
    data_norm: float
    interior_norm: float
    beta: float
    n_level: int
    t0_tiles: tuple
    kappa: float | None = None
    r_squared: float | None = None


def _regime_context(L: float, T: float, epsilon: float, x_left: float):
    """Level-set parameters tied to the sub-domain: mid-band beta, the
    minimal level count containing G0, and the admissible time centers."""
    profile = parabola_profile(L)
    d_sup = profile.sup
    beta = 0.75 * d_sup / epsilon**2 if epsilon > 0 else float("nan")
    d_min = float(profile.f(np.asarray(x_left))) if x_left > 0 else 0.0
    if d_min > 0:
        n_level = int(math.floor(4.0 * d_sup / d_min)) + 1
    else:
        n_level = 0
    tiles = []
    if epsilon > 0 and n_level > 0:
        t0 = math.sqrt(2.0) * epsilon
        step = epsilon / math.sqrt(n_level)
        while t0 <= T - math.sqrt(2.0) * epsilon + 1e-12:
            tiles.append(round(t0, 12))
            t0 += step
    return beta, n_level, tuple(tiles)


@dataclass(frozen=True)
class OscillatoryBoundaryFamily:
    """Oscillatory boundary-layer solutions: member ``omega`` oscillates as
    sin(omega t) at the far boundary x_0 and decays into the domain over a
    layer of width ~ 1/sqrt(omega), so the data norm at the observation
    edge x_{N+1} spans many decades at a common global bound while the
    interior norm over (x_left, L] shrinks strictly slower — the regime
    the conditional-stability fit probes.

    Each member starts exactly on the quasi-steady state of the discrete
    scheme (initial data = the imaginary part of the discrete complex
    layer profile), so the onset excites no smooth transient; a raw
    oscillation switched on at t = 0 would leak a polynomially decaying
    transient to the far boundary and bury the layer flux.

    Multiplicative noise of size c_level, supported on the observed half
    of the domain, rides on the solution, so the noise floor scales with
    each member's own signal.
    """

    c_level: float = 0.0
    noise_support: tuple = (0.6, 0.85)  # as fractions of L

    def layer_profile(self, omega: float, grid: GridSpec, dt: float) -> np.ndarray:
        """Complex node profile psi with lap_h(psi) = z psi, psi_0 = 1,
        psi_{N+1} = 0, where z = (1 - exp(-i omega dt))/dt matches the
        implicit time step; Im(exp(i omega t_n) psi) then propagates
        exactly under the deterministic scheme."""
        N, h = grid.N, grid.h
        z = (1.0 - np.exp(-1j * omega * dt)) / dt
        ab = np.zeros((3, N), dtype=complex)
        ab[0, 1:] = 1.0 / h**2
        ab[1, :] = -2.0 / h**2 - z
        ab[2, :-1] = 1.0 / h**2
        rhs = np.zeros(N, dtype=complex)
        rhs[0] = -1.0 / h**2  # psi_0 = 1 moved to the right side
        from scipy.linalg import solve_banded

        interior = solve_banded((1, 1), ab, rhs)
        psi = np.empty(N + 2, dtype=complex)
        psi[0] = 1.0
        psi[1:-1] = interior
        psi[-1] = 0.0
        return psi

    def problem(self, omega: float, grid: GridSpec, T: float, K: int) -> SPDEProblem:
        psi = self.layer_profile(omega, grid, T / K)
        c = None
        if self.c_level:
            lo, hi = (f * grid.L for f in self.noise_support)
            from .weights import smoothstep

            c = self.c_level * smoothstep((grid.interior - lo) / (hi - lo))
        return SPDEProblem(
            grid=grid,
            T=T,
            c=c,
            gamma1=lambda t: math.sin(omega * t),
            y0=np.imag(psi[1:-1]),
            num_steps=K,
        )


def holder_experiment(
    family,
    scales,
    grid: GridSpec,
    T: float,
    K: int,
    M: int,
    master_seed: int,
    x_left: float,
    epsilon: float,
    parallel: bool = False,
    num_threads: int | None = None,
):
    """Run the family over the scale list, normalize every member to a
    unit global bound, and fit the log-log law.

    Members whose data norm is statistically indistinguishable from zero
    are skipped. Returns (records, fit); fit is None when fewer than two
    records survive.
    """
    beta, n_level, tiles = _regime_context(grid.L, T, epsilon, x_left)
    records = []
    for scale in scales:
        p = family.problem(scale, grid, T, K)
        e = ensemble_run(p, M, master_seed, parallel=parallel, num_threads=num_threads)
        data = generate_cauchy_data(e)
        m_bound = global_h2_norm(e)
        if m_bound == 0.0:
            continue
        sig_eta = _statistically_zero(data.eta_l2_sq)
        sig_xi = _statistically_zero(data.xi_h1_sq)
        if sig_eta and sig_xi:
            continue
        records.append(
            HolderRecord(
                h=grid.h,
                epsilon=epsilon,
                scale=float(scale),
                m_bound=1.0,
                data_norm=data.data_norm / m_bound,
                interior_norm=interior_norm(e, x_left, epsilon) / m_bound,
                beta=beta,
                n_level=n_level,
                t0_tiles=tiles,
            )
        )
    if len(records) < 2:
        return records, None
    fit = fit_power_law(
        [r.data_norm for r in records], [r.interior_norm for r in records]
    )
    records = [replace(r, kappa=fit.kappa, r_squared=fit.r_squared) for r in records]
    return records, fit


def _statistically_zero(per_path_sq: np.ndarray) -> bool:
    m = float(np.mean(per_path_sq))
    if per_path_sq.size < 2:
        return m == 0.0
    se = float(np.std(per_path_sq, ddof=1)) / math.sqrt(per_path_sq.size)
    return m <= 3.0 * se


# -- continuation --------------------------------------------------------------

class _TraceFluxOperator:
    """Per-path linear map from interior initial data to the right-edge
    flux series, under homogeneous Dirichlet boundaries, plus its
    mechanical transpose (the time-stepping recursion transposed step by
    step — no adjoint equation is derived)."""

    def __init__(self, grid: GridSpec, times: np.ndarray, a=None, b=None, c=None, increments=None):
        N = grid.N
        self.grid = grid
        self.times = times
        self.K = times.size - 1
        self.dt = float(times[1] - times[0])
        self.h = grid.h
        self.a = _coef_rows(a, times, N, "coefficient a")
        self.b = _coef_rows(b, times, N, "coefficient b")
        self.c = _coef_rows(c, times, N, "coefficient c")
        has_noise = bool(np.any(self.c != 0.0))
        if has_noise and increments is None:
            raise InvalidArgumentError("multiplicative noise needs the path increments")
        self.increments = (
            np.zeros(self.K) if increments is None else np.asarray(increments, dtype=float)
        )
        if self.increments.shape != (self.K,):
            raise InvalidArgumentError(f"increments must have shape ({self.K},)")
        self.thomas = _ThomasFactors(N, self.dt / self.h**2)

    def _rows(self, table, n):
        return table[n] if table.shape[0] > 1 else table[0]

    def _dplus(self, y):
        out = np.empty_like(y)
        out[:-1] = (y[1:] - y[:-1]) / self.h
        out[-1] = -y[-1] / self.h
        return out

    def _dplus_t(self, w):
        out = np.empty_like(w)
        out[0] = -w[0] / self.h
        out[1:] = (w[:-1] - w[1:]) / self.h
        return out

    def apply(self, y0: np.ndarray) -> np.ndarray:
        """Forward: initial interior data -> flux series (K+1,)."""
        y = np.asarray(y0, dtype=float).copy()
        flux = np.empty(self.K + 1)
        flux[0] = -y[-1] / self.h
        for n in range(self.K):
            rhs = y + self.dt * (self._rows(self.a, n) * y + self._rows(self.b, n) * self._dplus(y))
            rhs += self.increments[n] * (self._rows(self.c, n) * y)
            y = self.thomas.solve(rhs[None, :])[0]
            flux[n + 1] = -y[-1] / self.h
        return flux

    def apply_transpose(self, z: np.ndarray) -> np.ndarray:
        """Transpose map: flux-series weights -> interior vector (N,)."""
        z = np.asarray(z, dtype=float)
        mu = np.zeros(self.grid.N)
        mu[-1] = -z[self.K] / self.h
        for n in range(self.K - 1, -1, -1):
            tm = self.thomas.solve(mu[None, :])[0]
            mu = (
                tm
                + self.dt * (self._rows(self.a, n) * tm)
                + self.dt * self._dplus_t(self._rows(self.b, n) * tm)
                + self.increments[n] * (self._rows(self.c, n) * tm)
            )
            mu[-1] += -z[n] / self.h
        return mu

    def field(self, y0: np.ndarray) -> np.ndarray:
        """Full (K+1, N+2) solution table for the recovered initial data."""
        zero_tab = np.zeros((self.K + 1, self.grid.N + 2))
        full0 = np.zeros(self.grid.N + 2)
        full0[1:-1] = y0
        return _solve_batch(
            self.grid, self.times, self.increments[None, :],
            self.a, self.b, self.c, zero_tab, zero_tab,
            np.zeros(self.K + 1), np.zeros(self.K + 1), full0,
        )[0]


def _h1_gram(v: np.ndarray, h: float) -> np.ndarray:
    """Matvec of the interior H1 Gram matrix (zero boundary extension)."""
    out = h * v.copy()
    out += 2.0 * v / h
    out[:-1] -= v[1:] / h
    out[1:] -= v[:-1] / h
    return out


def _cg(apply_op, rhs, max_iter: int, rtol: float):
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rs = float(r @ r)
    b_norm = math.sqrt(rs)
    history = [b_norm]
    if b_norm == 0.0:
        return x, history, True
    p = r.copy()
    for _ in range(max_iter):
        ap = apply_op(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        step = rs / denom
        x += step * p
        r -= step * ap
        rs_new = float(r @ r)
        history.append(math.sqrt(rs_new))
        if history[-1] <= rtol * b_norm:
            return x, history, True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, history, False


@dataclass(frozen=True, eq=False)
class ContinuationResult:
    """Per-path recovered initial data and the reconstructed fields,
    restricted to the sub-domain and time window."""

    y0: np.ndarray               # (M, N)
    fields: np.ndarray           # (M, K+1, N+2)
    restricted: np.ndarray       # (M, |window|, |inner|)
    window: np.ndarray           # time level indices
    node_indices: np.ndarray     # interior node indices of the restriction
    iterations: np.ndarray
    residual_histories: list = field(repr=False, default=None)


def continue_solution(
    data: CauchyData,
    grid: GridSpec,
    alpha: float,
    a=None,
    b=None,
    c=None,
    increments=None,
    x_left: float = 0.0,
    epsilon: float = 0.0,
    max_iter: int = 500,
    rtol: float = 1e-12,
) -> ContinuationResult:
    """Recover initial data per path by conjugate gradient on the
    regularized normal equations

        (A^T W A + alpha * H1) y0 = A^T W eta,

    where A maps initial data to the flux series through the forward
    solve (homogeneous Dirichlet model, so the model trace vanishes and
    xi only offsets the objective by a constant), W is the left-endpoint
    time quadrature, and H1 is the interior Sobolev Gram matrix. The
    transpose is verified against A by the inner-product identity (see
    ``adjoint_residual``). Raises ContinuationError with the residual
    histories if any path exhausts the iteration budget.
    """
    if alpha <= 0.0:
        raise InvalidArgumentError("regularization weight must be positive")
    times = data.times
    K = times.size - 1
    dt = float(times[1] - times[0])
    M = data.eta.shape[0]
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (M, K):
            raise InvalidArgumentError(f"increments must have shape ({M}, {K})")

    weights = np.full(K + 1, dt)
    weights[-1] = 0.0  # rectangle rule: final level carries no quadrature mass

    inner, seg = _restriction_indices(grid, x_left)
    window = _window_indices(times, epsilon)

    y0_all = np.empty((M, grid.N))
    fields = np.empty((M, K + 1, grid.N + 2))
    iters = np.empty(M, dtype=int)
    histories = []
    failures = {}
    for m in range(M):
        inc = None if increments is None else increments[m]
        op = _TraceFluxOperator(grid, times, a=a, b=b, c=c, increments=inc)

        def normal(v, op=op):
            return op.apply_transpose(weights * op.apply(v)) + alpha * _h1_gram(v, grid.h)

        rhs = op.apply_transpose(weights * data.eta[m])
        sol, history, converged = _cg(normal, rhs, max_iter=max_iter, rtol=rtol)
        histories.append(history)
        iters[m] = len(history) - 1
        if not converged:
            failures[m] = history
        y0_all[m] = sol
        fields[m] = op.field(sol)
    if failures:
        raise ContinuationError(
            f"conjugate gradient failed on paths {sorted(failures)} "
            f"within {max_iter} iterations",
            residual_histories=failures,
        )
    restricted = fields[:, window[:, None], inner[None, :]]
    return ContinuationResult(
        y0=y0_all,
        fields=fields,
        restricted=restricted,
        window=window,
        node_indices=inner,
        iterations=iters,
        residual_histories=histories,
    )


def adjoint_residual(
    grid: GridSpec,
    times: np.ndarray,
    a=None,
    b=None,
    c=None,
    increments=None,
    seed: int = 0,
) -> float:
    """Normalized inner-product mismatch |<A u, z> - <u, A^T z>| of the
    forward map and its transpose on random vectors."""
    rng = np.random.default_rng(seed)
    op = _TraceFluxOperator(grid, times, a=a, b=b, c=c, increments=increments)
    u = rng.standard_normal(grid.N)
    z = rng.standard_normal(times.size)
    forward = float(op.apply(u) @ z)
    backward = float(u @ op.apply_transpose(z))
    return abs(forward - backward) / (1.0 + abs(forward) + abs(backward))


def smallest_grid_with_level_inclusion(
    L: float,
    T: float,
    epsilon: float,
    x_left: float,
    lam: float = 2.0,
    n_candidates=(8, 16, 32, 64, 128, 256),
    n_times: int = 257,
) -> int | None:
    """Smallest interior node count for which every mesh point of
    (x_left, L] x (t0 - eps/sqrt(n), t0 + eps/sqrt(n)) lies inside the
    innermost level set of the general weight, by exhaustive mask scan.
    Returns None if no candidate works."""
    from .weights import level_sets

    profile = parabola_profile(L)
    beta, n_level, tiles = _regime_context(L, T, epsilon, x_left)
    if n_level <= 1 or not tiles:
        return None
    t0 = tiles[0]
    times = np.linspace(0.0, T, n_times)
    half = epsilon / math.sqrt(n_level)
    for N in n_candidates:
        grid = make_grid(L, N)
        spec, masks = level_sets(profile, lam, beta, epsilon, n_level, grid, times, t0)
        nodes_in = grid.nodes > x_left
        times_in = (times > t0 - half) & (times < t0 + half)
        region = np.outer(times_in, nodes_in)
        if np.all(masks[3][region]):
            return N
    return None
