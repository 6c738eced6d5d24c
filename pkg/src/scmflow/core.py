"""Scalar Capacity Model: state types and the congestion/velocity laws.

The model describes N vehicles on a one-directional link.  Vehicle i moves
at

    dx_i/dt = V_i * (1 - Gamma_i)

where V_i is its maximum free-flow speed and Gamma_i is its congestion
factor: an exponentially distance-weighted count of the vehicles ahead,
normalised by the link capacity,

    Gamma_i = (1/kappa) * sum_{j ahead of i} exp(-d_ij / omega).

omega is the look-ahead horizon: vehicles within about one horizon of i
slow it down substantially, vehicles further ahead contribute exponentially
little.  kappa is roughly the number of coincident vehicles that produces a
full jam; kappa vehicles piled up directly ahead give Gamma_i = 1 and stop
vehicle i dead.

On an open link "ahead of i" means smaller index (index 0 is the leader and
always travels at V_0).  On a ring of circumference L the law is symmetric:
every other vehicle is ahead of i at its forward wrapped distance
(x_j - x_i) mod L, each counted once.

Capacity controls the qualitative behaviour: for kappa <= 1 no vehicle can
ever pass another (blocking); for larger kappa a faster follower overtakes
once kappa*(1 - Gamma_leader) exceeds V_f/(V_f - V_l), and above the
fleet-wide threshold max V_f/(V_f - V_s) every faster vehicle eventually
ends up ahead of every slower one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Optional, Sequence, Union

import numpy as np

from ._kernels import gamma_open_scan, gamma_ring_scan

__all__ = [
    "ValidationError",
    "NumericalError",
    "ModelParams",
    "VehicleSpec",
    "OpenLink",
    "Ring",
    "Topology",
    "Scenario",
    "LinkState",
    "Regime",
    "RegimeClassification",
    "congestion_factors_naive",
    "congestion_factors_fast",
    "congestion_factors",
    "velocities",
    "passing_condition",
    "sorting_threshold",
    "classify_regime",
    "max_jam_density",
    "check_admissible",
    "vmax_array",
    "x0_array",
]


class ValidationError(ValueError):
    """An input violates a model invariant."""


class NumericalError(RuntimeError):
    """A computation failed numerically (non-finite state, lost bracket, ...)."""


@dataclass(frozen=True)
class ModelParams:
    """Link parameters: capacity kappa (dimensionless) and horizon omega (m)."""

    kappa: float
    omega: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise ValidationError(f"kappa must be finite and > 0, got {self.kappa!r}")
        if not (math.isfinite(self.omega) and self.omega > 0):
            raise ValidationError(f"omega must be finite and > 0, got {self.omega!r}")


@dataclass(frozen=True)
class VehicleSpec:
    """One vehicle: id, maximum free-flow speed (m/s), initial position (m)."""

    id: int
    v_max: float
    x0: float

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValidationError(f"vehicle id must be >= 0, got {self.id}")
        if not (math.isfinite(self.v_max) and self.v_max > 0):
            raise ValidationError(
                f"vehicle {self.id}: v_max must be finite and > 0, got {self.v_max!r}"
            )
        if not math.isfinite(self.x0):
            raise ValidationError(f"vehicle {self.id}: x0 must be finite, got {self.x0!r}")


@dataclass(frozen=True)
class OpenLink:
    """Infinite one-directional link; vehicle 0 is the unobstructed leader."""


@dataclass(frozen=True)
class Ring:
    """Periodic link of circumference L metres; the law treats all vehicles alike."""

    L: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.L) and self.L > 0):
            raise ValidationError(f"ring circumference must be finite and > 0, got {self.L!r}")


Topology = Union[OpenLink, Ring]


def vmax_array(specs: Sequence[VehicleSpec]) -> np.ndarray:
    return np.array([s.v_max for s in specs], dtype=np.float64)


def x0_array(specs: Sequence[VehicleSpec]) -> np.ndarray:
    return np.array([s.x0 for s in specs], dtype=np.float64)


def _validate_specs(specs: Sequence[VehicleSpec], topology: Topology) -> None:
    if len(specs) == 0:
        raise ValidationError("a scenario needs at least one vehicle")
    ids = [s.id for s in specs]
    if ids != list(range(len(specs))):
        raise ValidationError(f"vehicle ids must be contiguous 0..N-1 in order, got {ids}")
    if isinstance(topology, OpenLink):
        x0 = x0_array(specs)
        if np.any(np.diff(x0) > 0):
            raise ValidationError(
                "open-link vehicles must be listed front to back (x0 non-increasing)"
            )


@dataclass(frozen=True)
class Scenario:
    """A ready-to-solve problem: parameters, topology, ordered vehicle list."""

    params: ModelParams
    topology: Topology
    vehicles: tuple[VehicleSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        _validate_specs(self.vehicles, self.topology)

    @property
    def n(self) -> int:
        return len(self.vehicles)

    @property
    def v_max(self) -> np.ndarray:
        return vmax_array(self.vehicles)

    @property
    def x0(self) -> np.ndarray:
        return x0_array(self.vehicles)

    def initial_state(self) -> "LinkState":
        return LinkState(t=0.0, positions=self.x0, topology=self.topology)


@dataclass(frozen=True)
class LinkState:
    """Positions at time t, index-ordered (on open links j < i means j is ahead)."""

    t: float
    positions: np.ndarray
    topology: Topology

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64).copy()
        if pos.ndim != 1 or pos.size == 0:
            raise ValidationError("positions must be a non-empty 1-D vector")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("positions must be finite")
        if isinstance(self.topology, Ring):
            pos = np.mod(pos, self.topology.L)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return self.positions.size


class Regime(Enum):
    BLOCKING = "blocking"
    PASSING_PARTIAL = "passing-partial"
    PASSING_TOTAL = "passing-total"


@dataclass(frozen=True)
class RegimeClassification:
    """Capacity regime of a fleet plus the thresholds it was judged against."""

    regime: Regime
    equal_speeds: bool
    sorting_threshold: Optional[float]


def congestion_factors_naive(
    state: LinkState, specs: Sequence[VehicleSpec], params: ModelParams
) -> np.ndarray:
    """Direct O(N^2) congestion factors; the reference evaluation.

    Open link: Gamma_i = (1/kappa) sum_{j<i} exp((x_i - x_j)/omega) with the
    leader's empty sum giving Gamma_0 = 0 exactly.  Ring: every other
    vehicle contributes at its forward wrapped distance,
    Gamma_i = (1/kappa) sum_{j != i} exp(-((x_j - x_i) mod L)/omega).
    """
    x = state.positions
    n = x.size
    if len(specs) != n:
        raise ValidationError(f"state has {n} positions but {len(specs)} vehicle specs")
    kappa, omega = params.kappa, params.omega
    out = np.empty(n)
    # row blocks keep the pairwise matrix under ~40 MB at N = 1e4
    block = max(1, int(4e6 // max(n, 1)))
    if isinstance(state.topology, Ring):
        length = state.topology.L
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            d = np.mod(x[None, :] - x[lo:hi, None], length)
            w = np.exp(-d / omega)
            idx = np.arange(lo, hi)
            w[idx - lo, idx] = 0.0
            out[lo:hi] = w.sum(axis=1) / kappa
    else:
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            arg = (x[lo:hi, None] - x[None, :]) / omega
            mask = np.arange(n)[None, :] < np.arange(lo, hi)[:, None]
            w = np.exp(np.where(mask, arg, -np.inf))
            out[lo:hi] = np.where(mask, w, 0.0).sum(axis=1) / kappa
    return out


def congestion_factors_fast(
    state: LinkState, specs: Sequence[VehicleSpec], params: ModelParams
) -> np.ndarray:
    """O(N) open-link congestion factors via a shifted prefix scan.

    Matches :func:`congestion_factors_naive` to better than 1e-12 relative
    on valid index-ordered states of any position span.
    """
    if isinstance(state.topology, Ring):
        raise ValidationError("congestion_factors_fast handles open links only")
    if len(specs) != state.n:
        raise ValidationError(
            f"state has {state.n} positions but {len(specs)} vehicle specs"
        )
    return gamma_open_scan(state.positions, params.kappa, params.omega)


def congestion_factors(
    state: LinkState, specs: Sequence[VehicleSpec], params: ModelParams
) -> np.ndarray:
    """Fast-path dispatcher: scan kernel on either topology."""
    if isinstance(state.topology, Ring):
        if len(specs) != state.n:
            raise ValidationError(
                f"state has {state.n} positions but {len(specs)} vehicle specs"
            )
        return gamma_ring_scan(
            state.positions, params.kappa, params.omega, state.topology.L
        )
    return congestion_factors_fast(state, specs, params)


def velocities(
    state: LinkState,
    specs: Sequence[VehicleSpec],
    params: ModelParams,
    gamma: Optional[np.ndarray] = None,
) -> np.ndarray:
    """v_i = V_i * (1 - Gamma_i); the open-link leader moves at exactly V_0."""
    if gamma is None:
        gamma = congestion_factors(state, specs, params)
    return vmax_array(specs) * (1.0 - np.asarray(gamma))


def passing_condition(kappa: float, gamma_i: float, v_i: float, v_ip1: float) -> bool:
    """Does a faster follower in contact with its leader complete the pass?

    At the instant the follower reaches the leader's position the pass
    completes iff

        kappa * (1 - Gamma_leader) > V_follower / (V_follower - V_leader)

    where Gamma_leader is the leader's own congestion factor at that
    instant.  Only a strictly faster follower may ask (a slower one can
    never overtake).
    """
    if not v_ip1 > v_i:
        raise ValidationError(
            f"passing condition needs a strictly faster follower; got leader "
            f"V={v_i}, follower V={v_ip1}"
        )
    if gamma_i < -1e-9 or gamma_i > 1.0 + 1e-9:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma_i!r}")
    gamma_i = min(max(gamma_i, 0.0), 1.0)
    return kappa * (1.0 - gamma_i) > v_ip1 / (v_ip1 - v_i)


def sorting_threshold(v_max: Sequence[float]) -> Optional[float]:
    """Fleet-wide capacity threshold above which passing fully sorts the fleet.

    max over pairs (slower s, faster f) of V_f / (V_f - V_s); None when all
    speeds are equal (no pair can ever pass).
    """
    vals = sorted(set(float(v) for v in v_max))
    if len(vals) < 2:
        return None
    best = -math.inf
    for vs, vf in combinations(vals, 2):
        best = max(best, vf / (vf - vs))
    return best


def classify_regime(
    specs: Sequence[VehicleSpec], params: ModelParams
) -> RegimeClassification:
    """Capacity regime per the blocking/partial/total thresholds.

    kappa <= 1 blocks all passing.  Above that, passing is guaranteed to
    fully sort the fleet only for kappa beyond the fleet threshold; in
    between, initial positions decide which passes happen.  A fleet with all
    speeds equal can never pass regardless of kappa and is reported as
    blocking-equivalent with ``equal_speeds`` set.
    """
    if len(specs) == 0:
        raise ValidationError("classify_regime needs at least one vehicle")
    thr = sorting_threshold([s.v_max for s in specs])
    equal = thr is None
    if params.kappa <= 1.0 or equal:
        return RegimeClassification(Regime.BLOCKING, equal, thr)
    if params.kappa > thr:
        return RegimeClassification(Regime.PASSING_TOTAL, False, thr)
    return RegimeClassification(Regime.PASSING_PARTIAL, False, thr)


def max_jam_density(params: ModelParams) -> float:
    """Density at which an infinite uniformly spaced queue is fully jammed.

    Spacing s solves (1/kappa) * sum_{k>=1} exp(-k*s/omega) = 1; the
    geometric series gives s = omega * log(1 + 1/kappa), so the density is
    1 / (omega * log(1 + 1/kappa)), monotone increasing in kappa.
    """
    return 1.0 / (params.omega * math.log1p(1.0 / params.kappa))


def check_admissible(scenario: Scenario, permissive: bool = False) -> np.ndarray:
    """Reject initial states whose congestion already exceeds 1.

    Gamma_i > 1 would prescribe a negative velocity, outside the regime the
    model's guarantees cover.  Returns the initial congestion factors; with
    ``permissive`` the state is allowed through for exploration (velocities
    are then used verbatim, not clamped).
    """
    gamma = congestion_factors(scenario.initial_state(), scenario.vehicles, scenario.params)
    if not permissive:
        bad = np.nonzero(gamma > 1.0 + 1e-12)[0]
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"initial congestion factor of vehicle {i} is {gamma[i]:.6g} > 1 "
                f"({bad.size} vehicle(s) over capacity); the model would "
                f"prescribe negative velocity. Use permissive mode to force."
            )
    return gamma
