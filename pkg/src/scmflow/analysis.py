"""Equilibria, the fundamental diagram, string stability, and property checkers.

The closed forms here all follow from the velocity law:

* On a ring of N identical vehicles the uniform spacing s = L/N is an
  equilibrium; the geometric series collapses the congestion sum to

      v_eq = V * (1 + 1/kappa - (1/kappa) * (1 - e^{-L/omega}) / (1 - e^{-1/(rho*omega)}))

  and flow is Q = rho * v_eq, rising to a capacity peak then falling to
  zero at the jam density.

* An open-link platoon led by the slowest vehicle settles into gaps where
  every follower is slowed exactly to the leader's speed; each gap is the
  root of a monotone one-dimensional equation solved front to back.

* Small perturbations of the platoon gaps decay through a lower-triangular
  linear system whose eigenvalues are (V_0 - V_n)/omega: the bigger the
  speed surplus of a follower, the faster its gap relaxes.

The checkers at the bottom turn the model's qualitative guarantees
(non-negative velocity, no overtaking by slower vehicles, the blocking
corollary, order stability, sorting, the two-vehicle passing threshold, and
platoon splitting) into executable verdicts on finished runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .analytic import PiecewiseTrajectory, sample_trajectory
from .core import (
    ModelParams,
    NumericalError,
    Ring,
    Scenario,
    ValidationError,
    VehicleSpec,
    sorting_threshold,
    vmax_array,
)
from .engine import SimTrace

__all__ = [
    "EquilibriumSpec",
    "DiagramSeries",
    "StabilityReport",
    "CheckResult",
    "TheoremReport",
    "ring_equilibrium_velocity",
    "fundamental_diagram",
    "platoon_equilibrium_gaps",
    "platoon_positions",
    "string_stability_eigenvalues",
    "measure_decay_rates",
    "verify_theorems",
]

GAP_TOL = 1e-12          # bisection tolerance for equilibrium gaps, metres
FIT_WINDOW = (1e-6, 1e-1)  # |y| band for decay fitting, relative to the gap


@dataclass(frozen=True)
class EquilibriumSpec:
    """Common cruise speed plus the equilibrium gaps.

    ``gaps[k]`` is the gap in front of vehicle k+1 on an open-link platoon;
    for a uniform ring it holds the single spacing L/N.
    """

    v_eq: float
    gaps: np.ndarray


@dataclass(frozen=True)
class DiagramSeries:
    """(density, equilibrium speed, flow) triples with the grid peak."""

    rho: np.ndarray
    v_eq: np.ndarray
    q: np.ndarray
    peak_rho: float
    peak_q: float


@dataclass(frozen=True)
class StabilityReport:
    """Predicted gap-decay eigenvalues and, when measured, the fitted rates."""

    eigenvalues: np.ndarray
    fitted_rates: Optional[np.ndarray] = None
    relative_errors: Optional[np.ndarray] = None


def ring_equilibrium_velocity(
    rho: float,
    params: ModelParams,
    L: float,
    v_max: float,
    clamp: bool = True,
) -> float:
    """Equilibrium speed of a uniformly spaced ring at density rho (veh/m).

    Above the jam density the raw expression goes negative; by default the
    returned speed is clamped at zero (pass ``clamp=False`` for the raw
    value).
    """
    if not (rho > 0 and L > 0 and v_max > 0):
        raise ValidationError("rho, L, and v_max must all be > 0")
    if rho * L < 1.0 - 1e-9:
        raise ValidationError(f"rho*L must be at least one vehicle, got {rho * L!r}")
    k = params.kappa
    ratio = -np.expm1(-L / params.omega) / -np.expm1(-1.0 / (rho * params.omega))
    v = v_max * (1.0 + 1.0 / k - ratio / k)
    if clamp and v < 0.0:
        return 0.0
    return float(v)


def fundamental_diagram(
    params: ModelParams, v_max: float, L: float, rho_grid: np.ndarray
) -> DiagramSeries:
    """Flow versus density over an ascending density grid, Q = rho * v_eq."""
    rho = np.asarray(rho_grid, dtype=np.float64)
    if rho.ndim != 1 or rho.size == 0 or np.any(rho <= 0):
        raise ValidationError("rho_grid must be a non-empty positive vector")
    if np.any(np.diff(rho) <= 0):
        raise ValidationError("rho_grid must be strictly ascending")
    v = np.array([ring_equilibrium_velocity(r, params, L, v_max) for r in rho])
    q = rho * v
    peak = int(np.argmax(q))
    return DiagramSeries(rho=rho, v_eq=v, q=q,
                         peak_rho=float(rho[peak]), peak_q=float(q[peak]))


def _platoon_gamma(gaps_ahead: np.ndarray, extra_gap: float, omega: float) -> float:
    # congestion of the trailing vehicle given the gaps of everyone ahead;
    # cumulative distances are extra_gap + suffix sums of gaps_ahead
    dist = extra_gap + np.concatenate(([0.0], np.cumsum(gaps_ahead[::-1])))
    return float(np.exp(-dist / omega).sum())


def platoon_equilibrium_gaps(
    specs: Sequence[VehicleSpec],
    params: ModelParams,
    v0: Optional[float] = None,
) -> EquilibriumSpec:
    """Gaps at which every follower cruises at exactly the leader's speed.

    Requires every follower to be strictly faster than the platoon speed
    (equal or slower vehicles split off and have no finite equilibrium gap).
    Solved front to back: the gap of follower n is the unique root of the
    monotone equation V_n * (1 - Gamma_n(s)) = v0, bisected to 1e-12 m.
    """
    vmax = vmax_array(specs)
    if v0 is None:
        v0 = float(vmax[0])
    if np.any(vmax[1:] <= v0):
        bad = int(np.nonzero(vmax[1:] <= v0)[0][0]) + 1
        raise ValidationError(
            f"vehicle {bad} (v_max={vmax[bad]}) is not faster than the "
            f"platoon speed {v0}; it has no finite equilibrium gap"
        )
    omega = params.omega
    gaps = np.empty(len(specs) - 1)
    for n in range(1, len(specs)):
        target = params.kappa * (1.0 - v0 / vmax[n])

        def f(s: float) -> float:
            return target - _platoon_gamma(gaps[: n - 1], s, omega)

        lo, hi = 0.0, omega
        if f(lo) >= 0.0:
            raise NumericalError(
                f"no positive equilibrium gap for vehicle {n}: at zero gap it "
                f"still outruns the platoon (capacity too large for a "
                f"blocking equilibrium)"
            )
        while f(hi) < 0.0:
            hi *= 2.0
            if hi > 1e9 * omega:
                raise NumericalError(f"equilibrium gap bracket for vehicle {n} diverged")
        while hi - lo > GAP_TOL:
            mid = 0.5 * (lo + hi)
            if f(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        gaps[n - 1] = 0.5 * (lo + hi)
    return EquilibriumSpec(v_eq=v0, gaps=gaps)


def platoon_positions(leader_x0: float, gaps: np.ndarray) -> np.ndarray:
    """Positions (front to back) of a platoon with the given gaps."""
    return leader_x0 - np.concatenate(([0.0], np.cumsum(gaps)))


def string_stability_eigenvalues(
    specs: Sequence[VehicleSpec],
    params: ModelParams,
    v0: Optional[float] = None,
) -> StabilityReport:
    """Predicted decay rates of gap perturbations: lambda_n = (V_0 - V_n)/omega.

    The linearised gap dynamics form a lower-triangular system whose
    diagonal collapses, through the equilibrium condition, to the follower's
    speed surplus over the leader divided by the horizon.  All rates are
    strictly negative when every follower is strictly faster.
    """
    vmax = vmax_array(specs)
    if v0 is None:
        v0 = float(vmax[0])
    if np.any(vmax[1:] <= v0):
        raise ValidationError(
            "decay-rate prediction requires every follower strictly faster "
            "than the platoon speed"
        )
    lam = (v0 - vmax[1:]) / params.omega
    return StabilityReport(eigenvalues=lam)


def measure_decay_rates(
    trace: SimTrace,
    equilibrium: EquilibriumSpec,
    scenario: Scenario,
    fit_window: tuple[float, float] = FIT_WINDOW,
) -> StabilityReport:
    """Fit log|gap deviation| per follower and compare with the prediction.

    Samples where |y_n| lies between ``fit_window[0]`` and ``fit_window[1]``
    times the equilibrium gap enter an ordinary least-squares line fit;
    the band keeps the fit inside the linear regime yet above numerical
    noise.  Followers whose band is empty get NaN; if every follower's band
    is empty the perturbation was unusable and an error is raised.
    """
    pred = string_stability_eigenvalues(scenario.vehicles, scenario.params,
                                        v0=equilibrium.v_eq)
    n = trace.n
    fitted = np.full(n - 1, np.nan)
    for k in range(n - 1):
        gap = trace.states[:, k] - trace.states[:, k + 1]
        y = np.abs(gap - equilibrium.gaps[k])
        s_eq = equilibrium.gaps[k]
        mask = (y >= fit_window[0] * s_eq) & (y <= fit_window[1] * s_eq)
        if mask.sum() < 5:
            continue
        t = trace.times[mask]
        if t[-1] - t[0] <= 0:
            continue
        fitted[k] = np.polyfit(t, np.log(y[mask]), 1)[0]
    if np.all(np.isnan(fitted)):
        raise ValidationError(
            "decay fit window is empty for every follower; the perturbation "
            "is too small or too large relative to the equilibrium gaps"
        )
    rel = np.abs(fitted - pred.eigenvalues) / np.abs(pred.eigenvalues)
    return StabilityReport(eigenvalues=pred.eigenvalues,
                           fitted_rates=fitted, relative_errors=rel)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: Optional[bool]  # None when the check does not apply
    detail: str


@dataclass(frozen=True)
class TheoremReport:
    checks: tuple[CheckResult, ...]

    @property
    def all_ok(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            verdict = "skip" if c.passed is None else ("pass" if c.passed else "FAIL")
            lines.append(f"[{verdict}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _as_trace(result: Union[SimTrace, PiecewiseTrajectory],
              horizon: Optional[float], sample_dt: float) -> SimTrace:
    if isinstance(result, SimTrace):
        return result
    t_hi = horizon
    if t_hi is None:
        t_hi = result.t_end
        if not math.isfinite(t_hi):
            last_event = result.events[-1].t if result.events else 0.0
            t_hi = max(100.0, 2.0 * last_event)
    m = max(int(round(t_hi / sample_dt)), 1)
    return sample_trajectory(result, np.linspace(0.0, t_hi, m + 1))


def verify_theorems(
    result: Union[SimTrace, PiecewiseTrajectory],
    scenario: Scenario,
    horizon: Optional[float] = None,
    sample_dt: float = 0.1,
    split_margin: float = 0.1,
) -> TheoremReport:
    """Check a finished run against the model's guarantees.

    (a) velocities never negative; (b) every recorded pass has a strictly
    faster passer; (c) kappa <= 1 forbids passes; (d) order changes stop
    within the horizon (reported, not asserted); (e) above the fleet
    sorting threshold the final order is sorted by speed; (f) with exactly
    two vehicles a pass happens iff kappa strictly exceeds the two-vehicle
    threshold; (g) a trailing vehicle no faster than the leader splits off,
    its front gap still growing between the midpoint and the end of the run
    by more than ``split_margin`` metres (an interpretation: unbounded
    growth is checked as growth between checkpoints).
    """
    trace = _as_trace(result, horizon, sample_dt)
    vmax = scenario.v_max
    kappa = scenario.params.kappa
    events = list(trace.events)
    checks: list[CheckResult] = []

    vmin = float(trace.velocities.min())
    checks.append(CheckResult(
        "non-negative velocity", vmin >= -1e-12,
        f"min velocity over all samples = {vmin:.3e} m/s"))

    bad_ev = [e for e in events if vmax[e.passer] <= vmax[e.passed]]
    checks.append(CheckResult(
        "no overtaking by slow",
        not bad_ev,
        "every pass has a strictly faster passer" if not bad_ev
        else f"event at t={bad_ev[0].t:.6g} has passer no faster than passed"))

    if kappa <= 1.0:
        checks.append(CheckResult(
            "blocking corollary", len(events) == 0,
            f"kappa={kappa:g} <= 1 and {len(events)} pass(es) recorded"))
    else:
        checks.append(CheckResult(
            "blocking corollary", None, f"kappa={kappa:g} > 1, not applicable"))

    t_last = events[-1].t if events else None
    checks.append(CheckResult(
        "order stability", True,
        "no passes recorded" if t_last is None
        else f"no order changes after t={t_last:.6g} s (within this horizon)"))

    thr = sorting_threshold(vmax)
    if thr is not None and kappa > thr:
        if isinstance(result, PiecewiseTrajectory):
            final = list(result.final_order())
        else:
            final = list(np.argsort(-trace.states[-1, :], kind="stable"))
        speeds = [vmax[i] for i in final]
        sorted_ok = all(a >= b for a, b in zip(speeds[:-1], speeds[1:]))
        checks.append(CheckResult(
            "sorted above threshold", sorted_ok,
            f"kappa={kappa:g} > threshold {thr:.6g}; final speeds front to "
            f"back {speeds}"))
    else:
        checks.append(CheckResult(
            "sorted above threshold", None,
            "kappa is not above the fleet sorting threshold"))

    if trace.n == 2 and vmax[1] > vmax[0]:
        ratio = vmax[1] / (vmax[1] - vmax[0])
        expected = kappa > ratio
        happened = len(events) > 0
        checks.append(CheckResult(
            "two-vehicle passing threshold", happened == expected,
            f"kappa={kappa:g} vs threshold {ratio:.6g}: expected "
            f"{'a pass' if expected else 'no pass'}, observed "
            f"{len(events)} event(s)"))
    else:
        checks.append(CheckResult(
            "two-vehicle passing threshold", None,
            "needs exactly two vehicles with a faster follower"))

    n = trace.n
    if (n >= 3 and vmax[-1] <= vmax[0]
            and np.all(vmax[1:-1] > vmax[0]) and not events):
        gap = trace.states[:, -2] - trace.states[:, -1]
        mid = gap[trace.times.size // 2]
        end = gap[-1]
        checks.append(CheckResult(
            "platoon splitting", end > mid + split_margin,
            f"trailing gap grew from {mid:.4g} m (midpoint) to {end:.4g} m "
            f"(end); margin {split_margin:g} m"))
    else:
        checks.append(CheckResult(
            "platoon splitting", None,
            "needs a trailing vehicle no faster than the leader behind "
            "strictly faster vehicles"))

    return TheoremReport(tuple(checks))
