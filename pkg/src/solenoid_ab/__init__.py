"""Limit-periodic cohomological and Beltrami equations on the adelic solenoid,
computed level by level along a divisibility chain."""

__version__ = "0.1.0"

from .series import (  # noqa: E402
    DivisibilityChain,
    PontryaginSeries,
    StripNormEstimate,
    homothety_conjugate,
    level_project,
    resolves,
    s_norm,
    strip_majorant,
    strip_norm,
)
from .diophantine import (  # noqa: E402
    CertificateFailure,
    ConvergenceProfile,
    FrequencyVector,
    NonzeroAverage,
    ResonantMode,
    SmallDivisorLedger,
    certify_diophantine,
    convergence_profile,
    derivative_residual,
    solve_cohomological,
)
from .beltrami import (  # noqa: E402
    BeltramiField,
    ComplexGrid,
    NormalSolutionField,
    beltrami_residual,
    beurling_transform,
    cauchy_transform,
    distortion_report,
    normalize_013,
    solve_normal,
)
from .tower import (  # noqa: E402
    CylinderCoefficient,
    PeriodicBeltramiFamily,
    ProfiniteAddress,
    TowerRun,
    affine_renormalize,
    build_periodic_approximants,
    cauchy_diagnostics,
    coefficient_pullback,
    cylinder_to_plane,
    mobius_support_split,
    mu_s_norm,
    relative_coefficient,
    solve_leaf,
    tower_solve,
)
