"""Exact open-link solutions via the exponential change of variables.

Substituting z_i = exp(-x_i/omega) turns the nonlinear velocity law into a
lower-triangular *linear* system,

    dz_i/dt = -(V_i/omega) z_i + (V_i/(kappa*omega)) * sum_{j<i} z_j,

which is solved front to back: each row is a first-order linear ODE whose
forcing term is already known in closed form.  Every z_i comes out as a sum
of polynomial-times-exponential terms

    z_i(t) = sum_{owners j} sum_d c_{i,j,d} * (t - t_start)^d * exp(-V_j (t - t_start)/omega)

where an "owner" is the front-most vehicle with a given speed value and the
polynomial degree stays below the multiplicity of that speed among vehicles
0..i.  Repeated speeds are resonant: integrating a forcing term whose rate
equals the row's own decay rate raises the degree by one instead of
dividing by a vanishing rate difference.

In the blocking regime (kappa <= 1) a single coefficient table is valid for
all time.  With passing enabled, adjacent z curves may cross; each crossing
is located by scanning and bisection, verified against the passing
criterion, and the coefficients of the swapped pair and everything behind
them are re-derived from the crossing state, producing a piecewise-analytic
trajectory.
"""

from __future__ import annotations

import math
import warnings
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

from ._kernels import gamma_open_scan
from .core import (
    ModelParams,
    NumericalError,
    OpenLink,
    Ring,
    Scenario,
    ValidationError,
    VehicleSpec,
    check_admissible,
    passing_condition,
    vmax_array,
)

__all__ = [
    "RootIsolationError",
    "PassingEvent",
    "AnalyticSegment",
    "PiecewiseTrajectory",
    "to_z",
    "from_z",
    "solve_blocking",
    "solve_passing",
    "next_passing_event",
    "evaluate",
    "sample_trajectory",
]

DEFAULT_GRID_STEP = 0.05   # root-scan spacing, seconds
ROOT_TIME_TOL = 1e-10      # bisection refinement, seconds
NEAR_EQUAL_REL = 1e-9      # distinct speeds closer than this get a warning


class RootIsolationError(NumericalError):
    """The scan grid could not isolate a unique earliest crossing."""


@dataclass(frozen=True)
class PassingEvent:
    t: float
    passer: int
    passed: int


def to_z(positions: np.ndarray, omega: float) -> np.ndarray:
    """Map positions to the auxiliary variables z = exp(-x/omega)."""
    x = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("positions must be finite")
    return np.exp(-x / omega)


def from_z(z: np.ndarray, omega: float) -> np.ndarray:
    """Invert the auxiliary variables: x = -omega * log(z); requires z > 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise ValidationError("z values must be finite and strictly positive")
    return -omega * np.log(z)


@dataclass(frozen=True)
class AnalyticSegment:
    """One coefficient table, valid on [t_start, t_end] for a fixed order.

    ``coeffs[p]`` maps an owner position o (front-to-back index of the first
    vehicle with that speed) to the ascending polynomial multiplying
    ``exp(-vmax_ordered[o] * (t - t_start) / omega)`` in z of position p.
    Times inside the table are segment-local, so large t never meets large
    polynomial powers.
    """

    t_start: float
    t_end: float
    order: tuple[int, ...]
    vmax_ordered: np.ndarray
    coeffs: tuple[dict[int, np.ndarray], ...]
    omega: float

    @property
    def n(self) -> int:
        return len(self.order)

    def z_of_position(self, p: int, tau) -> np.ndarray:
        """z of front-to-back position p at segment-local time(s) tau."""
        tau = np.asarray(tau, dtype=np.float64)
        out = np.zeros_like(tau)
        for o, poly in self.coeffs[p].items():
            rate = self.vmax_ordered[o] / self.omega
            out = out + npoly.polyval(tau, poly) * np.exp(-rate * tau)
        return out

    def positions_at(self, t: float) -> np.ndarray:
        """Positions by vehicle id at absolute time t."""
        tau = t - self.t_start
        z = np.array([self.z_of_position(p, tau) for p in range(self.n)])
        if np.any(z <= 0) or not np.all(np.isfinite(z)):
            raise NumericalError(
                f"non-positive z while evaluating at t={t}; the coefficient "
                f"table is ill-conditioned (near-equal speeds?)"
            )
        x_ordered = -self.omega * np.log(z)
        x = np.empty(self.n)
        for p, vid in enumerate(self.order):
            x[vid] = x_ordered[p]
        return x


@dataclass(frozen=True)
class PiecewiseTrajectory:
    """Contiguous analytic segments plus the passing events between them."""

    params: ModelParams
    v_max: np.ndarray
    segments: tuple[AnalyticSegment, ...]
    events: tuple[PassingEvent, ...]

    @property
    def n(self) -> int:
        return self.segments[0].n

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def final_order(self) -> tuple[int, ...]:
        return self.segments[-1].order


def _poly_add(a: Optional[np.ndarray], b: np.ndarray) -> np.ndarray:
    if a is None:
        return b.copy()
    if len(a) < len(b):
        a, b = b, a
    out = a.copy()
    out[: len(b)] += b
    return out


def _solve_linear_poly(b: np.ndarray, g: float) -> np.ndarray:
    # particular solution of q' + g*q = b(t), g != 0, matched degree by degree
    d = len(b) - 1
    q = np.zeros(d + 1)
    q[d] = b[d] / g
    for k in range(d - 1, -1, -1):
        q[k] = (b[k] - (k + 1) * q[k + 1]) / g
    return q


def _integrate_poly(b: np.ndarray) -> np.ndarray:
    # resonant forcing: q' = b(t), constant of integration left to the
    # homogeneous term
    q = np.zeros(len(b) + 1)
    for k in range(len(b)):
        q[k + 1] = b[k] / (k + 1)
    return q


def _warn_near_equal(vm: np.ndarray) -> None:
    vals = np.unique(vm)
    for a, b in zip(vals[:-1], vals[1:]):
        if b - a < NEAR_EQUAL_REL * max(abs(a), abs(b)):
            warnings.warn(
                f"speeds {a!r} and {b!r} differ by less than {NEAR_EQUAL_REL:g} "
                f"relative; they are treated as distinct and the resulting "
                f"coefficients are ill-conditioned",
                RuntimeWarning,
                stacklevel=3,
            )


def _canonical_owners(vm: np.ndarray) -> list[int]:
    owners: list[int] = []
    first: dict[float, int] = {}
    for i, v in enumerate(vm):
        v = float(v)
        if v not in first:
            first[v] = i
        owners.append(first[v])
    return owners


def _solve_rows(
    z0: np.ndarray,
    vm: np.ndarray,
    kappa: float,
    omega: float,
    known_rows: Sequence[dict[int, np.ndarray]] = (),
) -> list[dict[int, np.ndarray]]:
    """Coefficient tables for rows len(known_rows)..N-1, front to back.

    ``known_rows`` carries over already-valid tables (segment-local time must
    match); the remaining rows are solved against them recursively.
    """
    n = z0.size
    owner_of = _canonical_owners(vm)
    rows: list[dict[int, np.ndarray]] = [dict(r) for r in known_rows]
    start = len(rows)
    _warn_near_equal(vm)
    for i in range(start, n):
        scale = vm[i] / (kappa * omega)
        forcing: dict[int, np.ndarray] = {}
        for j in range(i):
            for o, poly in rows[j].items():
                forcing[o] = _poly_add(forcing.get(o), poly)
        part: dict[int, np.ndarray] = {}
        for o, b in forcing.items():
            b = scale * b
            if vm[o] == vm[i]:
                part[o] = _poly_add(part.get(o), _integrate_poly(b))
            else:
                g = (vm[i] - vm[o]) / omega
                part[o] = _poly_add(part.get(o), _solve_linear_poly(b, g))
        c_hom = z0[i] - sum(poly[0] for poly in part.values())
        own = owner_of[i]
        if own in part:
            poly = part[own].copy()
            poly[0] += c_hom
            part[own] = poly
        else:
            part[own] = np.array([c_hom])
        rows.append(part)
    return rows


def _rebase_row(
    row: dict[int, np.ndarray], delta: float, vm: np.ndarray, omega: float
) -> dict[int, np.ndarray]:
    # shift the local time origin forward by delta:
    # c*(tau+delta)^d*e^{-r(tau+delta)} re-expanded in powers of tau
    out: dict[int, np.ndarray] = {}
    for o, poly in row.items():
        shifted = np.zeros(len(poly))
        for d in range(len(poly)):
            c = poly[d]
            if c == 0.0:
                continue
            for e in range(d + 1):
                shifted[e] += c * math.comb(d, e) * delta ** (d - e)
        out[o] = shifted * math.exp(-vm[o] * delta / omega)
    return out


def _require_open_link(scenario: Scenario, what: str) -> None:
    if isinstance(scenario.topology, Ring):
        raise ValidationError(f"{what} is defined on open links only")


def solve_blocking(scenario: Scenario, permissive: bool = False) -> AnalyticSegment:
    """Exact solution for the current ordering, valid for all time if no pass
    can occur (kappa <= 1 guarantees that; otherwise the table holds until
    the first crossing)."""
    _require_open_link(scenario, "the analytic solution")
    check_admissible(scenario, permissive)
    vm = scenario.v_max
    z0 = to_z(scenario.x0, scenario.params.omega)
    rows = _solve_rows(z0, vm, scenario.params.kappa, scenario.params.omega)
    return AnalyticSegment(
        t_start=0.0,
        t_end=math.inf,
        order=tuple(range(scenario.n)),
        vmax_ordered=vm,
        coeffs=tuple(rows),
        omega=scenario.params.omega,
    )


def _pair_gap(seg: AnalyticSegment, k: int, tau) -> np.ndarray:
    # z_follower - z_leader; positive while the follower is behind
    return seg.z_of_position(k + 1, tau) - seg.z_of_position(k, tau)


def _bisect_root(seg: AnalyticSegment, k: int, lo: float, hi: float) -> float:
    # g(lo) > 0 > g(hi)
    while hi - lo > ROOT_TIME_TOL:
        mid = 0.5 * (lo + hi)
        if _pair_gap(seg, k, mid) < 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def next_passing_event(
    segment: AnalyticSegment,
    params: ModelParams,
    specs: Sequence[VehicleSpec],
    horizon: Optional[float] = None,
    grid_step: float = DEFAULT_GRID_STEP,
) -> Optional[tuple[float, int]]:
    """Earliest genuine crossing of adjacent z curves, or None.

    Scans every adjacent pair whose follower is strictly faster on a uniform
    grid, bisects each sign change, rejects tangential contacts (the passing
    criterion fails there), and confirms minimality by checking that no
    other pair has already crossed at the returned time.  Returns
    (absolute time, front-to-back position of the passed vehicle).

    Raises RootIsolationError when two pairs appear to cross inside one grid
    cell; callers retry with a halved grid step.
    """
    t_hi = min(segment.t_end, math.inf if horizon is None else horizon)
    if not math.isfinite(t_hi):
        raise ValidationError("scanning an open-ended segment needs a finite horizon")
    span = t_hi - segment.t_start
    if span <= 0:
        return None
    n = segment.n
    vm = segment.vmax_ordered
    candidates = [k for k in range(n - 1) if vm[k + 1] > vm[k]]
    if not candidates:
        return None
    m = max(int(math.ceil(span / grid_step)), 1)
    tau = np.linspace(0.0, span, m + 1)
    roots: list[tuple[float, int]] = []
    for k in candidates:
        g = _pair_gap(segment, k, tau)
        cross = np.nonzero((g[:-1] > 0.0) & (g[1:] < 0.0))[0]
        for j in cross:
            roots.append((_bisect_root(segment, k, tau[j], tau[j + 1]), k))
        # a grid point landing exactly on the root
        exact = np.nonzero((g == 0.0))[0]
        for j in exact:
            if j > 0 and j < m and g[j - 1] > 0.0 and g[j + 1] < 0.0:
                roots.append((float(tau[j]), k))
    roots.sort()
    for tau_p, k in roots:
        z = np.array([segment.z_of_position(p, tau_p) for p in range(n)])
        if np.any(z <= 0) or not np.all(np.isfinite(z)):
            raise NumericalError(
                f"non-positive z at candidate crossing t={segment.t_start + tau_p}"
            )
        x_ordered = -segment.omega * np.log(z)
        gam = gamma_open_scan(x_ordered, params.kappa, params.omega)
        if not passing_condition(params.kappa, float(gam[k]), float(vm[k]), float(vm[k + 1])):
            continue  # tangential contact or threshold case: not a pass
        crossed_elsewhere = 0
        for k2 in range(n - 1):
            if k2 == k:
                continue
            gk2 = z[k2 + 1] - z[k2]
            if gk2 < -1e-9 * (abs(z[k2]) + abs(z[k2 + 1])):
                crossed_elsewhere += 1
        if crossed_elsewhere:
            raise RootIsolationError(
                f"{crossed_elsewhere + 1} crossings coincide at "
                f"t={segment.t_start + tau_p}; the scan grid is too coarse"
            )
        return segment.t_start + tau_p, k
    return None


def solve_passing(
    scenario: Scenario,
    horizon: float,
    grid_step: float = DEFAULT_GRID_STEP,
    permissive: bool = False,
) -> PiecewiseTrajectory:
    """Piecewise-analytic solution with passing events up to `horizon`.

    Solves the current ordering, finds the earliest crossing, swaps the pair
    and re-derives the coefficients of the swapped pair and every vehicle
    behind it (vehicles ahead keep their rows, re-expanded around the new
    segment origin), then repeats.  The number of events is bounded by
    N(N-1)/2 since a slower vehicle can never re-pass a faster one.
    """
    _require_open_link(scenario, "the analytic solution")
    if not (math.isfinite(horizon) and horizon > 0):
        raise ValidationError(f"horizon must be finite and > 0, got {horizon!r}")
    check_admissible(scenario, permissive)
    params = scenario.params
    vmax = scenario.v_max
    omega = params.omega
    if params.kappa <= 1.0:
        seg = solve_blocking(scenario, permissive)
        return PiecewiseTrajectory(params, vmax, (seg,), ())

    n = scenario.n
    max_events = n * (n - 1) // 2
    order = list(range(n))
    x_cur = scenario.x0.copy()
    t_cur = 0.0
    rows: Optional[list[dict[int, np.ndarray]]] = None
    resolve_from = 0
    segments: list[AnalyticSegment] = []
    events: list[PassingEvent] = []
    while True:
        vm_ord = vmax[np.array(order)]
        z0 = to_z(x_cur[np.array(order)], omega)
        known = rows[:resolve_from] if rows is not None else ()
        rows = _solve_rows(z0, vm_ord, params.kappa, omega, known_rows=known)
        seg = AnalyticSegment(
            t_start=t_cur,
            t_end=math.inf,
            order=tuple(order),
            vmax_ordered=vm_ord,
            coeffs=tuple(rows),
            omega=omega,
        )
        ev = None
        step = grid_step
        for _ in range(9):
            try:
                ev = next_passing_event(seg, params, scenario.vehicles,
                                        horizon=horizon, grid_step=step)
                break
            except RootIsolationError:
                step *= 0.5
        else:
            raise RootIsolationError(
                f"could not isolate the earliest crossing after refining the "
                f"scan grid to {step:g} s"
            )
        if ev is None:
            has_candidates = any(vm_ord[k + 1] > vm_ord[k] for k in range(n - 1))
            segments.append(replace(seg, t_end=math.inf if not has_candidates else horizon))
            break
        t_p, k = ev
        if len(events) >= max_events:
            raise NumericalError(
                f"more than N(N-1)/2 = {max_events} passing events; "
                f"this cannot happen and indicates a solver bug"
            )
        segments.append(replace(seg, t_end=t_p))
        events.append(PassingEvent(t=float(t_p), passer=order[k + 1], passed=order[k]))
        x_cur = seg.positions_at(t_p)
        delta = t_p - t_cur
        rows = [_rebase_row(rows[p], delta, vm_ord, omega) for p in range(k)]
        resolve_from = k
        order[k], order[k + 1] = order[k + 1], order[k]
        t_cur = t_p
    return PiecewiseTrajectory(params, vmax, tuple(segments), tuple(events))


def _locate_segment(traj: PiecewiseTrajectory, t: float) -> AnalyticSegment:
    starts = [seg.t_start for seg in traj.segments]
    if t < starts[0] or t > traj.t_end:
        raise ValidationError(
            f"t={t} is outside the trajectory span [{starts[0]}, {traj.t_end}]"
        )
    idx = bisect_right(starts, t) - 1
    return traj.segments[max(idx, 0)]


def evaluate(traj: PiecewiseTrajectory, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Positions and velocities (by vehicle id) at time t.

    Velocities are recovered by applying the velocity law to the
    reconstructed positions under the segment's ordering.
    """
    seg = _locate_segment(traj, t)
    x = seg.positions_at(t)
    order = np.array(seg.order)
    gam = gamma_open_scan(x[order], traj.params.kappa, traj.params.omega)
    v = np.empty_like(x)
    v[order] = seg.vmax_ordered * (1.0 - gam)
    return x, v


def sample_trajectory(traj: PiecewiseTrajectory, times: np.ndarray):
    """Evaluate a trajectory on a time grid, packaged as a SimTrace."""
    from .engine import SimTrace  # local import keeps module layering acyclic

    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValidationError("times must be a non-empty 1-D vector")
    if np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly increasing")
    n = traj.n
    xs = np.empty((times.size, n))
    vs = np.empty((times.size, n))
    for i, t in enumerate(times):
        xs[i], vs[i] = evaluate(traj, float(t))
    return SimTrace(
        times=times.copy(),
        states=xs,
        velocities=vs,
        topology=OpenLink(),
        events=tuple(traj.events),
    )
