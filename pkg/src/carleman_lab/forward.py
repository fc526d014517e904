"""Monte-Carlo forward solver for the semi-discrete stochastic parabolic
system and the deterministic boundary-lifting solve.

Spatial discretization is the uniform mesh of :mod:`.grid`; the interior
nodes evolve by

    dy_i = lap_h(y)_i dt + (a_i y_i + b_i D+_h(y)_i + f_i) dt
           + (c_i y_i + g_i) dB(t),        i = 1..N,

with Dirichlet values overwritten from the boundary data each step. Time
stepping is semi-implicit Euler–Maruyama: the stiff diffusion is implicit
(one tridiagonal elimination per step; the matrix I - dt*lap_h is strictly
diagonally dominant, so no pivoting is needed), while drift and noise are
explicit at the left endpoint, keeping the stochastic integral
non-anticipating. All downstream time integrals use the matching
left-endpoint rectangle rule.

Sample paths are reproducible: increments come from the counter-based
Philox generator keyed by the path seed, mapped through the normal
inverse CDF. Path seeds derive from a master seed as
``(master_seed << 64) | path_index``, so distinct masters give provably
disjoint seed sets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgumentError
from .grid import GridSpec

__all__ = [
    "SamplePath",
    "SPDEProblem",
    "SpaceTimeField",
    "Ensemble",
    "Expectation",
    "LiftingResult",
    "path_seed",
    "sample_brownian",
    "solve_forward",
    "solve_deterministic_lifting",
    "ensemble_run",
    "expectation",
    "rect_integral",
    "time_l2_sq",
    "time_h1_sq",
]

#: fixed batch width for ensemble solves; identical in serial and parallel
#: runs so the arithmetic (elementwise along the path axis) never changes
PATH_CHUNK = 256

_U64 = 1 << 64


def path_seed(master_seed: int, index: int) -> int:
    """Injectively combine a 64-bit master seed and a path index."""
    if not (0 <= master_seed < _U64):
        raise InvalidArgumentError(f"master seed must fit in 64 bits, got {master_seed}")
    if not (0 <= index < _U64):
        raise InvalidArgumentError(f"path index out of range: {index}")
    return (master_seed << 64) | index


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Brownian increments on a uniform time grid, reproducible from seed."""

    seed: int
    T: float
    K: int
    dt: float
    increments: np.ndarray  # (K,), each ~ Normal(0, dt)


def sample_brownian(T: float, K: int, seed: int) -> SamplePath:
    """Draw the K increments of one Brownian path over [0, T].

    Uniform deviates come from Philox keyed by ``seed`` (counter-based, so
    streams never overlap between keys); they are centered to (0, 1) and
    pushed through the normal inverse CDF.
    """
    if K < 1 or int(K) != K:
        raise InvalidArgumentError(f"need at least one step, got K={K}")
    if not (T > 0):
        raise InvalidArgumentError(f"horizon must be positive, got T={T}")
    K = int(K)
    dt = T / K
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = (rng.integers(0, 1 << 53, size=K).astype(float) + 0.5) / float(1 << 53)
    increments = np.sqrt(dt) * ndtri(u)
    increments.setflags(write=False)
    return SamplePath(seed=seed, T=float(T), K=K, dt=dt, increments=increments)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """One field value per (time level, node)."""

    grid: GridSpec
    times: np.ndarray   # (K+1,)
    values: np.ndarray  # (K+1, N+2)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def trace_right(self) -> np.ndarray:
        """Time series of the value at x_{N+1}."""
        return self.values[:, -1]

    @property
    def flux_right(self) -> np.ndarray:
        """Time series of the backward difference at x_{N+1}."""
        return (self.values[:, -1] - self.values[:, -2]) / self.grid.h


@dataclass(frozen=True, eq=False)
class SPDEProblem:
    """Coefficients, sources, boundary and initial data of one forward solve.

    a, b, c act on the interior and may be None (zero), a scalar, an (N,)
    array, or a callable t -> (N,). f and g live on the full node set:
    None, scalar, (N+2,), (K+1, N+2), or callable t -> (N+2,). gamma1/2
    are boundary series: None, (K+1,), or callable. y0 is interior data:
    None, scalar, or (N,). num_steps fixes the time grid; when None the
    default dt = h^2/4 applies.
    """

    grid: GridSpec
    T: float
    a: object = None
    b: object = None
    c: object = None
    f: object = None
    g: object = None
    gamma1: object = None
    gamma2: object = None
    y0: object = None
    num_steps: int | None = None

    def __post_init__(self):
        if not (self.T > 0):
            raise InvalidArgumentError(f"horizon must be positive, got T={self.T}")

    def steps(self) -> int:
        if self.num_steps is not None:
            return int(self.num_steps)
        return max(1, int(np.ceil(self.T / (self.grid.h**2 / 4.0))))

    def time_grid(self, K: int | None = None) -> np.ndarray:
        K = self.steps() if K is None else int(K)
        return np.arange(K + 1, dtype=float) * (self.T / K)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Solutions of M independent paths on one shared grid pair."""

    grid: GridSpec
    times: np.ndarray
    paths: list
    solutions: np.ndarray  # (M, K+1, N+2)
    master_seed: int | None = None

    @property
    def M(self) -> int:
        return self.solutions.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def solution(self, m: int) -> SpaceTimeField:
        return SpaceTimeField(self.grid, self.times, self.solutions[m])


# -- input normalization ------------------------------------------------------

def _finite_or_raise(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{what} contains non-finite values")
    return arr


def _coef_rows(spec, times: np.ndarray, N: int, what: str) -> np.ndarray:
    """Interior coefficient as (1, N) (time-constant) or (K, N) rows."""
    K = times.size - 1
    if spec is None:
        return np.zeros((1, N))
    if callable(spec):
        rows = np.stack([np.broadcast_to(np.asarray(spec(t), dtype=float), (N,)) for t in times[:-1]])
        return _finite_or_raise(rows, what)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full((1, N), float(arr))
    if arr.shape == (N,):
        return _finite_or_raise(arr, what).reshape(1, N)
    if arr.shape == (K, N):
        return _finite_or_raise(arr, what)
    raise InvalidArgumentError(f"{what} has shape {arr.shape}; want scalar, ({N},) or ({K},{N})")


def source_table(spec, times: np.ndarray, grid: GridSpec, what: str = "source") -> np.ndarray:
    """Normalize a source specification to a (K+1, N+2) full-node table."""
    K = times.size - 1
    n = grid.N + 2
    if spec is None:
        return np.zeros((K + 1, n))
    if callable(spec):
        rows = np.stack([np.broadcast_to(np.asarray(spec(t), dtype=float), (n,)) for t in times])
        return _finite_or_raise(rows, what)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full((K + 1, n), float(arr))
    if arr.shape == (n,):
        return np.broadcast_to(_finite_or_raise(arr, what), (K + 1, n))
    if arr.shape == (K + 1, n):
        return _finite_or_raise(arr, what)
    raise InvalidArgumentError(f"{what} has shape {arr.shape}; want ({K + 1},{n})")


def boundary_series(spec, times: np.ndarray, what: str = "boundary") -> np.ndarray:
    if spec is None:
        return np.zeros(times.size)
    if callable(spec):
        return _finite_or_raise([float(spec(t)) for t in times], what)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(times.size, float(arr))
    if arr.shape == (times.size,):
        return _finite_or_raise(arr, what)
    raise InvalidArgumentError(f"{what} has shape {arr.shape}; want ({times.size},)")


def _initial_full(y0, g1_0: float, g2_0: float, N: int) -> np.ndarray:
    full = np.zeros(N + 2)
    if y0 is not None:
        arr = np.asarray(y0, dtype=float)
        if arr.ndim == 0:
            full[1:-1] = float(arr)
        elif arr.shape == (N,):
            full[1:-1] = _finite_or_raise(arr, "initial data")
        else:
            raise InvalidArgumentError(f"initial data has shape {arr.shape}; want ({N},)")
    full[0] = g1_0
    full[-1] = g2_0
    return full


# -- core stepping kernel -----------------------------------------------------

class _ThomasFactors:
    """Prefactored elimination for the constant matrix I - dt*lap_h."""

    def __init__(self, N: int, mu: float):
        diag = 1.0 + 2.0 * mu
        denom = np.empty(N)
        cp = np.empty(N)
        denom[0] = diag
        cp[0] = -mu / denom[0]
        for i in range(1, N):
            denom[i] = diag + mu * cp[i - 1]
            cp[i] = -mu / denom[i]
        self.mu = mu
        self.denom = denom
        self.cp = cp

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for each row of rhs (batch, N); elementwise along rows."""
        mu, denom, cp = self.mu, self.denom, self.cp
        N = denom.size
        dp = np.empty_like(rhs)
        dp[:, 0] = rhs[:, 0] / denom[0]
        for i in range(1, N):
            dp[:, i] = (rhs[:, i] + mu * dp[:, i - 1]) / denom[i]
        x = np.empty_like(rhs)
        x[:, N - 1] = dp[:, N - 1]
        for i in range(N - 2, -1, -1):
            x[:, i] = dp[:, i] - cp[i] * x[:, i + 1]
        return x


def _solve_batch(
    grid: GridSpec,
    times: np.ndarray,
    increments: np.ndarray,  # (Mb, K)
    a_rows: np.ndarray,
    b_rows: np.ndarray,
    c_rows: np.ndarray,
    f_tab: np.ndarray,       # (K+1, N+2)
    g_tab: np.ndarray,
    g1: np.ndarray,          # (K+1,)
    g2: np.ndarray,
    y0_full: np.ndarray,     # (N+2,)
) -> np.ndarray:
    N, h = grid.N, grid.h
    K = times.size - 1
    dt = float(times[1] - times[0])
    mu = dt / h**2
    thomas = _ThomasFactors(N, mu)

    Mb = increments.shape[0]
    out = np.empty((Mb, K + 1, N + 2))
    out[:, 0, :] = y0_full
    y = out[:, 0, :]
    a_var = a_rows.shape[0] > 1
    b_var = b_rows.shape[0] > 1
    c_var = c_rows.shape[0] > 1
    for n in range(K):
        yi = y[:, 1:-1]
        an = a_rows[n if a_var else 0]
        bn = b_rows[n if b_var else 0]
        cn = c_rows[n if c_var else 0]
        dplus = (y[:, 2:] - y[:, 1:-1]) / h
        rhs = yi + dt * (an * yi + bn * dplus + f_tab[n, 1:-1])
        rhs += (cn * yi + g_tab[n, 1:-1]) * increments[:, n : n + 1]
        rhs[:, 0] += mu * g1[n + 1]
        rhs[:, -1] += mu * g2[n + 1]
        ynew = out[:, n + 1, :]
        ynew[:, 0] = g1[n + 1]
        ynew[:, -1] = g2[n + 1]
        ynew[:, 1:-1] = thomas.solve(rhs)
        y = ynew
    return out


def _normalized_inputs(p: SPDEProblem, times: np.ndarray):
    N = p.grid.N
    a = _coef_rows(p.a, times, N, "coefficient a")
    b = _coef_rows(p.b, times, N, "coefficient b")
    c = _coef_rows(p.c, times, N, "coefficient c")
    f = source_table(p.f, times, p.grid, "source f")
    g = source_table(p.g, times, p.grid, "noise intensity g")
    g1 = boundary_series(p.gamma1, times, "gamma1")
    g2 = boundary_series(p.gamma2, times, "gamma2")
    y0 = _initial_full(p.y0, g1[0], g2[0], N)
    return a, b, c, f, g, g1, g2, y0


def solve_forward(p: SPDEProblem, path: SamplePath) -> SpaceTimeField:
    """Advance one sample path over the problem's time grid."""
    if abs(path.T - p.T) > 1e-12 * max(1.0, p.T):
        raise InvalidArgumentError(f"path horizon {path.T} != problem horizon {p.T}")
    times = p.time_grid(path.K)
    inputs = _normalized_inputs(p, times)
    inc = _finite_or_raise(path.increments, "increments").reshape(1, -1)
    values = _solve_batch(p.grid, times, inc, *inputs)[0]
    return SpaceTimeField(p.grid, times, values)


def ensemble_run(
    p: SPDEProblem,
    M: int,
    master_seed: int,
    parallel: bool = False,
    num_threads: int | None = None,
) -> Ensemble:
    """Solve M independent paths with seeds derived from master_seed.

    Paths are solved in fixed batches of PATH_CHUNK; the parallel flag only
    changes which thread advances a batch, never the arithmetic or the
    order results are stored, so ensembles are bit-identical either way.
    """
    if M < 1:
        raise InvalidArgumentError(f"need at least one path, got M={M}")
    K = p.steps()
    times = p.time_grid(K)
    inputs = _normalized_inputs(p, times)
    paths = [sample_brownian(p.T, K, path_seed(master_seed, m)) for m in range(M)]
    solutions = np.empty((M, K + 1, p.grid.N + 2))

    spans = [(lo, min(lo + PATH_CHUNK, M)) for lo in range(0, M, PATH_CHUNK)]

    def run_span(span):
        lo, hi = span
        inc = np.stack([paths[m].increments for m in range(lo, hi)])
        solutions[lo:hi] = _solve_batch(p.grid, times, inc, *inputs)

    if parallel and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=num_threads or 4) as pool:
            list(pool.map(run_span, spans))
    else:
        for span in spans:
            run_span(span)
    return Ensemble(
        grid=p.grid, times=times, paths=paths, solutions=solutions, master_seed=master_seed
    )


@dataclass(frozen=True)
class Expectation:
    """Fixed-order ensemble mean with its Monte-Carlo standard error."""

    mean: float
    std_error: float | None
    values: np.ndarray = field(repr=False, default=None)


def expectation(functional, e: Ensemble) -> Expectation:
    """Average a per-path functional over the ensemble in path order.

    ``functional(values, path)`` receives the (K+1, N+2) solution table and
    the SamplePath. std_error is None for M < 2 (flagged undefined).
    """
    vals = np.array([float(functional(e.solutions[m], e.paths[m])) for m in range(e.M)])
    mean = float(np.sum(vals)) / e.M
    if e.M < 2:
        return Expectation(mean=mean, std_error=None, values=vals)
    se = float(np.std(vals, ddof=1)) / np.sqrt(e.M)
    return Expectation(mean=mean, std_error=se, values=vals)


@dataclass(frozen=True, eq=False)
class LiftingResult:
    """Deterministic boundary lifting and its right-edge flux series."""

    u: SpaceTimeField
    flux: np.ndarray  # (K+1,)


def solve_deterministic_lifting(gamma1, gamma2, grid: GridSpec, T: float, K: int) -> LiftingResult:
    """Solve du = lap_h(u) dt with the given boundary data and zero initial
    state (implicit Euler); returns the solution and the backward-difference
    flux at x_{N+1} used to bound boundary contributions.

    The data must be compatible with the zero initial state:
    gamma1(0) = gamma2(0) = 0.
    """
    times = np.arange(K + 1, dtype=float) * (T / K)
    g1 = boundary_series(gamma1, times, "gamma1")
    g2 = boundary_series(gamma2, times, "gamma2")
    scale = 1.0 + max(float(np.max(np.abs(g1))), float(np.max(np.abs(g2))))
    if abs(g1[0]) > 1e-12 * scale or abs(g2[0]) > 1e-12 * scale:
        raise InvalidArgumentError(
            f"incompatible boundary data: gamma1(0)={g1[0]}, gamma2(0)={g2[0]} must vanish"
        )
    N = grid.N
    zero_rows = np.zeros((1, N))
    zero_tab = np.zeros((K + 1, N + 2))
    inc = np.zeros((1, K))
    values = _solve_batch(
        grid, times, inc, zero_rows, zero_rows, zero_rows, zero_tab, zero_tab,
        g1, g2, _initial_full(None, g1[0], g2[0], N),
    )[0]
    u = SpaceTimeField(grid, times, values)
    return LiftingResult(u=u, flux=u.flux_right.copy())


# -- time-grid quadrature ------------------------------------------------------

def rect_integral(series: np.ndarray, dt: float) -> float | np.ndarray:
    """Left-endpoint rectangle rule over [0, T]: dt * sum of the first K
    entries along the last axis (consistent with the Ito convention)."""
    series = np.asarray(series, dtype=float)
    return dt * series[..., :-1].sum(axis=-1)


def time_l2_sq(series: np.ndarray, dt: float):
    """Squared L2(0,T) norm of a time series by the rectangle rule."""
    return rect_integral(np.asarray(series, dtype=float) ** 2, dt)


def time_h1_sq(series: np.ndarray, dt: float):
    """Squared H1(0,T) norm: L2 part plus forward-difference derivative part."""
    series = np.asarray(series, dtype=float)
    deriv = np.diff(series, axis=-1) / dt
    return time_l2_sq(series, dt) + dt * (deriv**2).sum(axis=-1)
