"""Exact discrete calculus on the uniform 1-D mesh.

The mesh is ``0 = x_0 < x_1 < ... < x_{N+1} = L`` with step ``h = L/(N+1)``.
Four node families appear, and each gets its own field type so that an
off-by-one misuse is a type error instead of a silent shift:

=============  ======================  ==========================
family         nodes                   produced by
=============  ======================  ==========================
full           x_0 .. x_{N+1}          —
minus          x_0 .. x_N              ``avg_plus``, ``diff_plus``
plus           x_1 .. x_{N+1}          ``avg_minus``, ``diff_minus``
interior       x_1 .. x_N              ``avg_center``, ``diff_center``,
                                       ``laplacian``
=============  ======================  ==========================

``verify_identities`` checks the summation-by-parts algebra of these
operators by evaluating both sides of each identity with independent
direct summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, PreconditionError

__all__ = [
    "GridSpec",
    "DiscreteField",
    "FieldOnMinus",
    "FieldOnPlus",
    "InteriorField",
    "FieldNorms",
    "IdentityReport",
    "make_grid",
    "avg_plus",
    "avg_minus",
    "avg_center",
    "diff_plus",
    "diff_minus",
    "diff_center",
    "laplacian",
    "integrate_Gh",
    "integrate_Gh_minus",
    "norms",
    "verify_identities",
    "IDENTITY_NAMES",
]


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform mesh of (0, L) with N interior nodes."""

    L: float
    N: int
    h: float
    nodes: np.ndarray = field(repr=False)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def minus(self) -> np.ndarray:
        """Nodes x_0 .. x_N."""
        return self.nodes[:-1]


def make_grid(L: float, N: int) -> GridSpec:
    """Build the uniform mesh with step h = L/(N+1).

    Raises InvalidArgumentError for L <= 0 or N < 2.
    """
    if not np.isfinite(L) or L <= 0:
        raise InvalidArgumentError(f"domain length must be positive, got L={L}")
    if int(N) != N or N < 2:
        raise InvalidArgumentError(f"need at least 2 interior nodes, got N={N}")
    N = int(N)
    h = L / (N + 1)
    nodes = np.arange(N + 2, dtype=float) * h
    nodes.setflags(write=False)
    assert abs(nodes[-1] - L) <= np.finfo(float).eps * L * (N + 2)
    return GridSpec(L=float(L), N=N, h=h, nodes=nodes)


def _check_values(grid: GridSpec, values, expected: int, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (expected,):
        raise InvalidArgumentError(
            f"{what} needs {expected} values for N={grid.N}, got shape {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True, eq=False)
class DiscreteField:
    """One real value per node of the full mesh x_0 .. x_{N+1}."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, self.grid.N + 2, "full field")
        )

    @classmethod
    def sample(cls, grid: GridSpec, fn) -> "DiscreteField":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]


@dataclass(frozen=True, eq=False)
class FieldOnMinus:
    """Values on x_0 .. x_N (results of forward one-sided operators)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, self.grid.N + 1, "minus field")
        )


@dataclass(frozen=True, eq=False)
class FieldOnPlus:
    """Values on x_1 .. x_{N+1} (results of backward one-sided operators)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, self.grid.N + 1, "plus field")
        )


@dataclass(frozen=True, eq=False)
class InteriorField:
    """Values on the interior nodes x_1 .. x_N."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, self.grid.N, "interior field")
        )


# -- stencils ---------------------------------------------------------------

def avg_plus(u: DiscreteField) -> FieldOnMinus:
    """(u_{i+1} + u_i)/2 at i = 0..N."""
    v = u.values
    return FieldOnMinus(u.grid, 0.5 * (v[1:] + v[:-1]))


def avg_minus(u: DiscreteField) -> FieldOnPlus:
    """(u_i + u_{i-1})/2 at i = 1..N+1."""
    v = u.values
    return FieldOnPlus(u.grid, 0.5 * (v[1:] + v[:-1]))


def avg_center(u: DiscreteField) -> InteriorField:
    """(u_{i+1} + 2 u_i + u_{i-1})/4 at i = 1..N."""
    v = u.values
    return InteriorField(u.grid, 0.25 * (v[2:] + 2.0 * v[1:-1] + v[:-2]))


def diff_plus(u: DiscreteField) -> FieldOnMinus:
    """(u_{i+1} - u_i)/h at i = 0..N."""
    v = u.values
    return FieldOnMinus(u.grid, (v[1:] - v[:-1]) / u.grid.h)


def diff_minus(u: DiscreteField) -> FieldOnPlus:
    """(u_i - u_{i-1})/h at i = 1..N+1."""
    v = u.values
    return FieldOnPlus(u.grid, (v[1:] - v[:-1]) / u.grid.h)


def diff_center(u: DiscreteField) -> InteriorField:
    """(u_{i+1} - u_{i-1})/(2h) at i = 1..N."""
    v = u.values
    return InteriorField(u.grid, (v[2:] - v[:-2]) / (2.0 * u.grid.h))


def laplacian(u: DiscreteField) -> InteriorField:
    """(u_{i+1} - 2 u_i + u_{i-1})/h^2 at i = 1..N."""
    v = u.values
    return InteriorField(u.grid, (v[2:] - 2.0 * v[1:-1] + v[:-2]) / u.grid.h**2)


# -- integrals and norms ----------------------------------------------------

def integrate_Gh(u: DiscreteField | InteriorField) -> float:
    """h * sum of u over the interior nodes x_1 .. x_N."""
    vals = u.interior if isinstance(u, DiscreteField) else u.values
    return u.grid.h * float(np.sum(vals))


def integrate_Gh_minus(v: FieldOnMinus) -> float:
    """h * sum of v over x_0 .. x_N."""
    return v.grid.h * float(np.sum(v.values))


@dataclass(frozen=True)
class FieldNorms:
    """Discrete norms of a full field.

    h1 and h2 are square roots of the squared-sum forms
    ``h1^2 = |D+ u|^2_{minus} + |u|^2`` and ``h2^2 = |lap u|^2 + h1^2``.
    """

    l2: float
    linf: float
    h1: float
    h2: float


def norms(u: DiscreteField) -> FieldNorms:
    l2_sq = integrate_Gh(DiscreteField(u.grid, u.values**2))
    dplus = diff_plus(u)
    h1_sq = integrate_Gh_minus(FieldOnMinus(u.grid, dplus.values**2)) + l2_sq
    lap = laplacian(u)
    h2_sq = integrate_Gh(InteriorField(u.grid, lap.values**2)) + h1_sq
    linf = float(np.max(np.abs(u.interior))) if u.grid.N else 0.0
    return FieldNorms(
        l2=float(np.sqrt(l2_sq)),
        linf=linf,
        h1=float(np.sqrt(h1_sq)),
        h2=float(np.sqrt(h2_sq)),
    )


# -- identity verification ---------------------------------------------------

IDENTITY_NAMES = (
    "avg_plus_expansion",        # m+ u  = u + (h/2)  D+ u
    "avg_center_expansion",      # m  u  = u + (h^2/4) lap u
    "central_from_forward",      # D  u  = m- D+ u
    "laplacian_factorization",   # lap u = D+ D- u
    "product_avg_plus",          # m+(uv) = m+u m+v + (h^2/4) D+u D+v
    "product_diff_plus",         # D+(uv) = D+u m+v + m+u D+v
    "product_laplacian",         # lap(uv) = lap(u) m(v) + 2 D(u) D(v) + m(u) lap(v)
    "parts_central_square",      # 2 I[u v Dv]   = -I[Du v^2] + (h^2/2) Im[D+u (D+v)^2]
    "parts_laplacian_boundary",  # I[u lap v]    = -Im[D+u D+v] - u_0 (D+v)_0 + u_{N+1} (D-v)_{N+1}
    "parts_laplacian_general",   # same with the roles of u and v swapped (no boundary condition)
    "parts_weighted_laplacian",  # I[u v lap v]  = -Im[m+u (D+v)^2] + (1/2) I[lap u v^2]
    "parts_central_laplacian",   # 2 I[u Dv lapv] = -Im[D+u (D+v)^2] + u_{N+1}(D-v)_{N+1}^2 - u_0 (D+v)_0^2
)

#: identities that require v to vanish at both boundary nodes
BOUNDARY_SENSITIVE = (
    "parts_central_square",
    "parts_weighted_laplacian",
    "parts_central_laplacian",
)


@dataclass(frozen=True)
class IdentityReport:
    """Normalized max-abs residual of each operator identity."""

    residuals: dict

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values())


def _residual(lhs, rhs) -> float:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    scale = 1.0 + float(np.max(np.abs(lhs))) + float(np.max(np.abs(rhs)))
    return float(np.max(np.abs(lhs - rhs))) / scale


def verify_identities(u: DiscreteField, v: DiscreteField) -> IdentityReport:
    """Evaluate both sides of every operator identity by direct summation.

    The three integration-by-parts identities listed in BOUNDARY_SENSITIVE
    hold only for v with v_0 = v_{N+1} = 0; a violation raises
    PreconditionError naming them. The plain Green identity
    (parts_laplacian_boundary) is additionally checked with the roles of u
    and v swapped, exercising it on a field with free boundary values.
    """
    if u.grid is not v.grid and (u.grid.N != v.grid.N or u.grid.L != v.grid.L):
        raise InvalidArgumentError("u and v must share one grid")
    g = u.grid
    h = g.h
    uv = u.values
    vv = v.values
    if vv[0] != 0.0 or vv[-1] != 0.0:
        raise PreconditionError(
            "v must vanish at x_0 and x_{N+1}; identities skipped: "
            + ", ".join(BOUNDARY_SENSITIVE)
        )

    res: dict[str, float] = {}

    res["avg_plus_expansion"] = _residual(
        avg_plus(u).values, uv[:-1] + 0.5 * h * diff_plus(u).values
    )
    res["avg_center_expansion"] = _residual(
        avg_center(u).values, uv[1:-1] + 0.25 * h**2 * laplacian(u).values
    )
    res["central_from_forward"] = _residual(
        diff_center(u).values,
        0.5 * (diff_plus(u).values[1:] + diff_plus(u).values[:-1]),
    )
    res["laplacian_factorization"] = _residual(
        laplacian(u).values,
        (diff_minus(u).values[1:] - diff_minus(u).values[:-1]) / h,
    )

    prod = DiscreteField(g, uv * vv)
    res["product_avg_plus"] = _residual(
        avg_plus(prod).values,
        avg_plus(u).values * avg_plus(v).values
        + 0.25 * h**2 * diff_plus(u).values * diff_plus(v).values,
    )
    res["product_diff_plus"] = _residual(
        diff_plus(prod).values,
        diff_plus(u).values * avg_plus(v).values
        + avg_plus(u).values * diff_plus(v).values,
    )
    res["product_laplacian"] = _residual(
        laplacian(prod).values,
        laplacian(u).values * avg_center(v).values
        + 2.0 * diff_center(u).values * diff_center(v).values
        + avg_center(u).values * laplacian(v).values,
    )

    dv_plus = diff_plus(v).values
    du_plus = diff_plus(u).values
    res["parts_central_square"] = _residual(
        2.0 * h * np.sum(uv[1:-1] * vv[1:-1] * diff_center(v).values),
        -h * np.sum(diff_center(u).values * vv[1:-1] ** 2)
        + 0.5 * h**2 * h * np.sum(du_plus * dv_plus**2),
    )
    res["parts_laplacian_boundary"] = _residual(
        h * np.sum(uv[1:-1] * laplacian(v).values),
        -h * np.sum(du_plus * dv_plus)
        - uv[0] * dv_plus[0]
        + uv[-1] * diff_minus(v).values[-1],
    )
    # Green identity again, integrating against a field with free boundaries
    res["parts_laplacian_general"] = _residual(
        h * np.sum(vv[1:-1] * laplacian(u).values),
        -h * np.sum(dv_plus * du_plus)
        - vv[0] * du_plus[0]
        + vv[-1] * diff_minus(u).values[-1],
    )
    res["parts_weighted_laplacian"] = _residual(
        h * np.sum(uv[1:-1] * vv[1:-1] * laplacian(v).values),
        -h * np.sum(avg_plus(u).values * dv_plus**2)
        + 0.5 * h * np.sum(laplacian(u).values * vv[1:-1] ** 2),
    )
    res["parts_central_laplacian"] = _residual(
        2.0 * h * np.sum(uv[1:-1] * diff_center(v).values * laplacian(v).values),
        -h * np.sum(du_plus * dv_plus**2)
        + uv[-1] * diff_minus(v).values[-1] ** 2
        - uv[0] * dv_plus[0] ** 2,
    )
    return IdentityReport(residuals=res)
