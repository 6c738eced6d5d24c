"""Scalar Capacity Model of lane-free traffic flow.

A vehicle's speed is its maximum free-flow speed scaled by one minus its
congestion factor, an exponentially distance-weighted count of the vehicles
ahead normalised by a scalar link capacity.  The package provides exact
open-link solutions (single coefficient table in the blocking regime,
piecewise tables across passing events), a fixed-step RK4 engine that also
covers ring roads, equilibrium and stability analysis, executable property
checkers, config/CSV/SVG interchange, and a command-line front end.
"""

from .analysis import (
    DiagramSeries,
    EquilibriumSpec,
    StabilityReport,
    TheoremReport,
    fundamental_diagram,
    measure_decay_rates,
    platoon_equilibrium_gaps,
    platoon_positions,
    ring_equilibrium_velocity,
    string_stability_eigenvalues,
    verify_theorems,
)
from .analytic import (
    AnalyticSegment,
    PassingEvent,
    PiecewiseTrajectory,
    RootIsolationError,
    evaluate,
    from_z,
    next_passing_event,
    sample_trajectory,
    solve_blocking,
    solve_passing,
    to_z,
)
from .core import (
    LinkState,
    ModelParams,
    NumericalError,
    OpenLink,
    Regime,
    RegimeClassification,
    Ring,
    Scenario,
    ValidationError,
    VehicleSpec,
    check_admissible,
    classify_regime,
    congestion_factors,
    congestion_factors_fast,
    congestion_factors_naive,
    max_jam_density,
    passing_condition,
    sorting_threshold,
    velocities,
)
from .engine import (
    IntegratorConfig,
    SimTrace,
    build_two_region_ring,
    derivative,
    simulate,
)
from .scenario_io import (
    ScenarioConfig,
    canonical_text,
    parse_scenario,
    read_diagram,
    read_trace,
    write_diagram,
    write_trace,
)
from .svg import render_diagram_svg, render_minmax_svg, render_timespace_svg

__version__ = "0.1.0"
