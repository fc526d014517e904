"""Numerical laboratory for weighted (Carleman) energy estimates of a
1-D semi-discrete stochastic parabolic equation, and for the two inverse
problems they control: recovering a random source from boundary data, and
continuing a solution inward from lateral Cauchy data."""

__version__ = "0.1.0"

from .errors import (
    CarlemanLabError,
    ConfigError,
    ContinuationError,
    InvalidArgumentError,
    PreconditionError,
    WeightOverflowError,
)
from .grid import (
    DiscreteField,
    FieldOnMinus,
    FieldOnPlus,
    GridSpec,
    InteriorField,
    avg_center,
    avg_minus,
    avg_plus,
    diff_center,
    diff_minus,
    diff_plus,
    integrate_Gh,
    integrate_Gh_minus,
    laplacian,
    make_grid,
    norms,
    verify_identities,
)
from .weights import (
    CutoffProfile,
    LevelSetSpec,
    SpatialProfile,
    WeightSpec,
    WeightTables,
    beta_for_terminal_decay,
    build_cutoff_chi,
    build_cutoff_chitilde,
    eval_weights,
    expansion_residuals,
    level_sets,
    max_admissible_s,
    parabola_profile,
    smoothstep,
    unit_weight_tables,
)
from .forward import (
    Ensemble,
    Expectation,
    SamplePath,
    SpaceTimeField,
    SPDEProblem,
    ensemble_run,
    expectation,
    path_seed,
    rect_integral,
    sample_brownian,
    solve_deterministic_lifting,
    solve_forward,
    time_h1_sq,
    time_l2_sq,
)
from .carleman import (
    CarlemanReport,
    DrivenNoiseFamily,
    SweepResult,
    boundary_flux,
    carleman_sweep,
    estimate_report,
    terminal_values,
    weighted_lhs,
    weighted_rhs,
)
from .inverse_source import (
    GapConditionReport,
    SeparableSource,
    StabilityRecord,
    UniformityResult,
    check_gap_condition,
    generate_separable_pairs,
    make_separable_source,
    reconstruct_time_profile,
    stability_experiment,
    uniformity_sweep,
)
from .cauchy import (
    CauchyData,
    ContinuationResult,
    HolderRecord,
    KappaFit,
    OscillatoryBoundaryFamily,
    adjoint_residual,
    continue_solution,
    fit_power_law,
    generate_cauchy_data,
    global_h2_norm,
    holder_experiment,
    interior_norm,
)
