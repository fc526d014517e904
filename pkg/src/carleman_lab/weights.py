"""Carleman weight functions, their difference-expansion residuals,
level sets and cut-off profiles.

The weight stack is

    psi(x,t)   = |x - x*|^2 - beta (t - t0)^2        (regular form)
               = d(x)       - beta (t - t0)^2        (general form)
    phi        = exp(lam * psi)
    theta      = exp(s * phi),   r = 1/theta.

theta^2 grows violently in s; every consumer works from the exponent
table ``2 s phi`` and only exponentiates inside accumulation. The largest
admissible s for a given (lam, grid, horizon) is exposed by
``max_admissible_s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, PreconditionError, WeightOverflowError
from .grid import GridSpec

__all__ = [
    "MAX_SQUARED_EXPONENT",
    "SpatialProfile",
    "parabola_profile",
    "WeightSpec",
    "WeightTables",
    "eval_weights",
    "unit_weight_tables",
    "max_admissible_s",
    "ExpansionResiduals",
    "expansion_residuals",
    "LevelSetSpec",
    "level_sets",
    "CutoffProfile",
    "smoothstep",
    "build_cutoff_chi",
    "build_cutoff_chitilde",
    "beta_for_terminal_decay",
]

#: largest exponent allowed in exp(2 s phi); float64 overflows near 709.8
MAX_SQUARED_EXPONENT = 700.0


@dataclass(frozen=True)
class SpatialProfile:
    """Spatial part d(x) of a general weight, with analytic derivatives.

    ``sup`` is the supremum of d over its natural (extended) domain, which
    may exceed the max over the mesh; the level-set thresholds use it.
    """

    f: object
    df: object
    ddf: object
    sup: float


def parabola_profile(L: float, delta: float | None = None) -> SpatialProfile:
    """Default spatial profile d(x) = x ((L + delta) - x), delta = 2 L.

    Positive on (0, L + delta), vanishing at the ends, with |d'| > 0 on
    (0, L] since delta > L. sup d = ((L + delta)/2)^2.
    """
    if delta is None:
        delta = 2.0 * L
    if delta <= L:
        raise InvalidArgumentError(f"need delta > L for a one-signed slope, got {delta} <= {L}")
    span = L + delta
    return SpatialProfile(
        f=lambda x: x * (span - x),
        df=lambda x: span - 2.0 * np.asarray(x, dtype=float),
        ddf=lambda x: -2.0 * np.ones_like(np.asarray(x, dtype=float)),
        sup=(span / 2.0) ** 2,
    )


@dataclass(frozen=True)
class WeightSpec:
    """Parameters of one weight stack.

    Exactly one of ``x_star`` (regular form) and ``profile`` (general form)
    must be given. beta = 0 and s = 0 are admitted as degenerate cases used
    by sanity tests; lam must be >= 1.
    """

    lam: float
    s: float
    t0: float
    beta: float
    x_star: float | None = None
    profile: SpatialProfile | None = None

    def __post_init__(self):
        if (self.x_star is None) == (self.profile is None):
            raise InvalidArgumentError("give exactly one of x_star or profile")
        if self.lam < 1.0:
            raise InvalidArgumentError(f"lambda must be >= 1, got {self.lam}")
        if self.s < 0.0 or self.beta < 0.0:
            raise InvalidArgumentError("s and beta must be non-negative")

    # pointwise evaluation (no domain restriction; grids use eval_weights)
    def psi_space(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_star is not None:
            return (x - self.x_star) ** 2
        return np.asarray(self.profile.f(x), dtype=float)

    def psi_space_dx(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_star is not None:
            return 2.0 * (x - self.x_star)
        return np.asarray(self.profile.df(x), dtype=float)

    def psi_space_dxx(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_star is not None:
            return 2.0 * np.ones_like(x)
        return np.asarray(self.profile.ddf(x), dtype=float)

    def psi(self, x, t):
        t = np.asarray(t, dtype=float)
        return self.psi_space(x) - self.beta * (t - self.t0) ** 2

    def phi(self, x, t):
        return np.exp(self.lam * self.psi(x, t))

    def theta(self, x, t):
        return np.exp(self.s * self.phi(x, t))

    def rweight(self, x, t):
        return np.exp(-self.s * self.phi(x, t))

    def validate_on(self, grid: GridSpec) -> None:
        """Check the gradient condition |psi_x| > 0 on the closed mesh."""
        if self.x_star is not None:
            if 0.0 <= self.x_star <= grid.L:
                raise InvalidArgumentError(
                    f"x_star must lie outside [0, {grid.L}], got {self.x_star}"
                )
            return
        slope = np.abs(self.psi_space_dx(grid.interior))
        if float(np.min(slope)) <= 0.0:
            raise PreconditionError(
                "spatial profile has a vanishing slope on the mesh interior"
            )


@dataclass(frozen=True, eq=False)
class WeightTables:
    """Weight stack sampled on a (time grid) x (node) lattice.

    ``log_theta_sq = 2 s phi`` is the exponent consumers should use;
    theta and r themselves are representable whenever log_theta_sq is
    within MAX_SQUARED_EXPONENT.
    """

    times: np.ndarray            # (n_t,)
    nodes: np.ndarray            # (n_x,)
    psi: np.ndarray              # (n_t, n_x)
    phi: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    log_theta_sq: np.ndarray
    phi_t: np.ndarray            # analytic time derivative of phi
    s: float
    lam: float


def eval_weights(w: WeightSpec, grid: GridSpec, times) -> WeightTables:
    """Sample psi, phi, theta, r on the space-time lattice.

    Raises WeightOverflowError when exp(2 s phi) is not representable
    anywhere on the lattice.
    """
    w.validate_on(grid)
    times = np.asarray(times, dtype=float)
    psi = w.psi(grid.nodes[None, :], times[:, None])
    phi = np.exp(w.lam * psi)
    log_theta_sq = 2.0 * w.s * phi
    peak = float(np.max(log_theta_sq))
    if peak > MAX_SQUARED_EXPONENT:
        raise WeightOverflowError(w.s, w.lam, float(np.max(psi)), MAX_SQUARED_EXPONENT)
    theta = np.exp(0.5 * log_theta_sq)
    psi_t = -2.0 * w.beta * (times[:, None] - w.t0)
    return WeightTables(
        times=times,
        nodes=grid.nodes,
        psi=psi,
        phi=phi,
        theta=theta,
        r=1.0 / theta,
        log_theta_sq=log_theta_sq,
        phi_t=w.lam * phi * psi_t,
        s=w.s,
        lam=w.lam,
    )


def unit_weight_tables(grid: GridSpec, times) -> WeightTables:
    """Tables with phi = theta = 1 everywhere (for prefactor tests)."""
    times = np.asarray(times, dtype=float)
    ones = np.ones((times.size, grid.nodes.size))
    return WeightTables(
        times=times,
        nodes=grid.nodes,
        psi=np.zeros_like(ones),
        phi=ones,
        theta=ones.copy(),
        r=ones.copy(),
        log_theta_sq=np.zeros_like(ones),
        phi_t=np.zeros_like(ones),
        s=1.0,
        lam=1.0,
    )


def max_admissible_s(w: WeightSpec, grid: GridSpec, times) -> float:
    """Largest s keeping exp(2 s phi) representable on the lattice."""
    times = np.asarray(times, dtype=float)
    psi_max = float(np.max(w.psi(grid.nodes[None, :], times[:, None])))
    return MAX_SQUARED_EXPONENT / (2.0 * math.exp(w.lam * psi_max))


@dataclass(frozen=True)
class ExpansionResiduals:
    """Max-abs defect of the two weighted-stencil expansions.

    res1: | theta D r + s lam phi psi_x |                       (first order)
    res2: | theta lap r - (s^2 lam^2 f2 - s lam^2 f3 - s lam f4) |
          with f2 = phi^2 psi_x^2, f3 = phi psi_x^2, f4 = phi psi_xx.

    Both shrink at least first order in h for fixed (s, lam).
    """

    res1: float
    res2: float


def expansion_residuals(w: WeightSpec, grid: GridSpec, times=None) -> ExpansionResiduals:
    """Measure the defect between weighted difference quotients of r and
    their analytic leading terms.

    theta_i * r_j is evaluated as exp(s (phi_i - phi_j)) so the result is
    overflow-free for any s. Defaults to the single time level t = t0,
    where the weights peak.
    """
    w.validate_on(grid)
    if times is None:
        times = np.array([w.t0])
    times = np.asarray(times, dtype=float)
    x = grid.nodes
    h = grid.h
    phi = np.exp(w.lam * w.psi(x[None, :], times[:, None]))           # (n_t, n_x)

    # theta_i * (D r)_i and theta_i * (lap r)_i via exponent differences
    e_up = np.exp(w.s * (phi[:, 1:-1] - phi[:, 2:]))     # theta_i r_{i+1}
    e_dn = np.exp(w.s * (phi[:, 1:-1] - phi[:, :-2]))    # theta_i r_{i-1}
    theta_diff = (e_up - e_dn) / (2.0 * h)
    theta_lap = (e_up - 2.0 + e_dn) / h**2

    xi = x[1:-1]
    psi_x = w.psi_space_dx(xi)
    psi_xx = w.psi_space_dxx(xi)
    phi_i = phi[:, 1:-1]
    f1 = phi_i * psi_x
    f2 = phi_i**2 * psi_x**2
    f3 = phi_i * psi_x**2
    f4 = phi_i * psi_xx

    res1 = float(np.max(np.abs(theta_diff + w.s * w.lam * f1)))
    res2 = float(
        np.max(np.abs(theta_lap - (w.s**2 * w.lam**2 * f2 - w.s * w.lam**2 * f3 - w.s * w.lam * f4)))
    )
    return ExpansionResiduals(res1=res1, res2=res2)


# -- level sets ---------------------------------------------------------------

@dataclass(frozen=True)
class LevelSetSpec:
    """Thresholds mu_1 < mu_2 < mu_3 < mu_4 carving nested regions where
    phi exceeds each level."""

    n_level: int
    epsilon: float
    lam: float
    beta: float
    d_sup: float
    mu: tuple

    def mu_k(self, k: int) -> float:
        return math.exp(self.lam * (k * self.d_sup - self.beta * self.epsilon**2) / self.n_level)


def level_sets(
    profile: SpatialProfile,
    lam: float,
    beta: float,
    epsilon: float,
    n_level: int,
    grid: GridSpec,
    times,
    t0: float,
):
    """Build the four thresholds and the nested membership masks.

    Requires the band condition  beta eps^2 < sup d < 2 beta eps^2.
    Returns (LevelSetSpec, masks) with masks of shape (4, n_t, n_x),
    masks[k-1] marking phi(x,t) > mu_k. Nesting masks[3] <= ... <= masks[0]
    holds by monotonicity of the thresholds.
    """
    if n_level <= 1:
        raise InvalidArgumentError(f"n_level must exceed 1, got {n_level}")
    lo, hi = beta * epsilon**2, 2.0 * beta * epsilon**2
    if not (lo < profile.sup < hi):
        raise InvalidArgumentError(
            "level band violated: need beta*eps^2 < sup d < 2*beta*eps^2, "
            f"got {lo:.6g} < {profile.sup:.6g} < {hi:.6g}"
        )
    spec = LevelSetSpec(
        n_level=int(n_level),
        epsilon=float(epsilon),
        lam=float(lam),
        beta=float(beta),
        d_sup=float(profile.sup),
        mu=tuple(
            math.exp(lam * (k * profile.sup - beta * epsilon**2) / n_level)
            for k in (1, 2, 3, 4)
        ),
    )
    times = np.asarray(times, dtype=float)
    w = WeightSpec(lam=lam, s=1.0, t0=t0, beta=beta, profile=profile)
    phi = np.exp(lam * w.psi(grid.nodes[None, :], times[:, None]))
    masks = np.stack([phi > mu for mu in spec.mu])
    return spec, masks


# -- cut-off profiles ---------------------------------------------------------

def smoothstep(sigma):
    """Quintic smoothstep p = 6 s^5 - 15 s^4 + 10 s^3, clamped to [0, 1].

    Two continuous derivatives, p(1/2) = 1/2.
    """
    s = np.clip(np.asarray(sigma, dtype=float), 0.0, 1.0)
    return s**3 * (10.0 + s * (-15.0 + 6.0 * s))


def _smoothstep_slope(sigma):
    s = np.clip(np.asarray(sigma, dtype=float), 0.0, 1.0)
    return 30.0 * s**2 * (1.0 - s) ** 2


@dataclass(frozen=True, eq=False)
class CutoffProfile:
    """A cut-off sampled on the mesh together with its stencil images.

    For the static profile the arrays are 1-D over nodes and ``dt`` is
    None; for the level-set profile they are (n_t, n_x) space-time tables
    and ``dt`` holds the analytic time derivative.
    """

    values: np.ndarray
    d_plus: np.ndarray      # forward difference, nodes 0..N
    d_center: np.ndarray    # central difference, interior nodes
    lap: np.ndarray         # second difference, interior nodes
    dt: np.ndarray | None = None


def build_cutoff_chi(grid: GridSpec) -> CutoffProfile:
    """Static cut-off: 0 on [x_0, x_1], 1 on [x_N, x_{N+1}], quintic
    smoothstep in between. Needs N >= 4 so the transition has room."""
    if grid.N < 4:
        raise InvalidArgumentError(f"cut-off needs N >= 4, got N={grid.N}")
    x = grid.nodes
    x_lo, x_hi = x[1], x[-2]
    vals = smoothstep((x - x_lo) / (x_hi - x_lo))
    h = grid.h
    return CutoffProfile(
        values=vals,
        d_plus=(vals[1:] - vals[:-1]) / h,
        d_center=(vals[2:] - vals[:-2]) / (2.0 * h),
        lap=(vals[2:] - 2.0 * vals[1:-1] + vals[:-2]) / h**2,
    )


def build_cutoff_chitilde(levels: LevelSetSpec, tables: WeightTables) -> CutoffProfile:
    """Level-set cut-off: 1 where phi > mu_3, 0 where phi < mu_2,
    smoothstep in phi across the band. The time derivative follows the
    chain rule through the analytic phi_t."""
    mu2, mu3 = levels.mu[1], levels.mu[2]
    if not mu2 < mu3:
        raise InvalidArgumentError("level thresholds must satisfy mu_2 < mu_3")
    sigma = (tables.phi - mu2) / (mu3 - mu2)
    vals = smoothstep(sigma)
    h = float(tables.nodes[1] - tables.nodes[0])
    dt = _smoothstep_slope(sigma) / (mu3 - mu2) * tables.phi_t
    return CutoffProfile(
        values=vals,
        d_plus=(vals[:, 1:] - vals[:, :-1]) / h,
        d_center=(vals[:, 2:] - vals[:, :-2]) / (2.0 * h),
        lap=(vals[:, 2:] - 2.0 * vals[:, 1:-1] + vals[:, :-2]) / h**2,
        dt=dt,
    )


def beta_for_terminal_decay(
    w: WeightSpec, grid: GridSpec, T: float, target: float = 1e-8
) -> float:
    """Smallest beta (up to bisection tolerance) making the weight at the
    final time negligible: max_x theta(x, T) <= target * max theta.

    The peak of theta sits on the t = t0 slice; increasing beta only
    lowers the t = T slice. Used to suppress terminal terms so ratio
    diagnostics are dominated by the integral terms.
    """
    if not (0.0 < w.t0 < T):
        raise InvalidArgumentError(f"need 0 < t0 < T, got t0={w.t0}, T={T}")
    if target <= 0 or target >= 1:
        raise InvalidArgumentError(f"target must lie in (0,1), got {target}")
    x = grid.nodes
    psi_space = w.psi_space(x)
    peak = w.s * float(np.exp(w.lam * np.max(psi_space)))  # s * max phi, at t = t0
    budget = math.log(target)
    gap_sq = (T - w.t0) ** 2

    def deficit(beta):
        # s * max_x phi(x, T) - (peak + budget); want <= 0
        top = w.s * float(np.exp(w.lam * (np.max(psi_space) - beta * gap_sq)))
        return top - (peak + budget)

    lo, hi = 0.0, 1.0
    while deficit(hi) > 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise InvalidArgumentError("terminal suppression unreachable; raise s")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if deficit(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return hi
