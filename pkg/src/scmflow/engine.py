"""Fixed-step RK4 integration of the model; the numeric twin of the exact solver.

This is the only solver for ring scenarios and the independent check for
open-link results.  Classic RK4 with a fixed step is the default: the
right-hand side is smooth between passing events, the integrator is
deterministic, and its fourth-order convergence is easy to measure.  An
opt-in adaptive mode doubles/halves the step against a step-doubling error
estimate.

Open-link runs track the front-to-back order explicitly.  When two adjacent
vehicles touch, the crossing time is located on the step's cubic Hermite
interpolant, the state is re-integrated to the contact, and the swap is
accepted only if the passing criterion holds there; refuted contacts leave
the order unchanged.  Ring runs store positions unwrapped (cumulative
distance) so time-space curves stay continuous; wrapping happens only
inside the congestion evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as _k
from .analytic import PassingEvent
from .core import (
    LinkState,
    ModelParams,
    NumericalError,
    OpenLink,
    Ring,
    Scenario,
    Topology,
    ValidationError,
    VehicleSpec,
    check_admissible,
    congestion_factors,
    vmax_array,
)

__all__ = [
    "IntegratorConfig",
    "SimTrace",
    "derivative",
    "simulate",
    "build_two_region_ring",
]


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon, trace decimation, and the opt-in adaptive mode."""

    horizon: float
    dt: float = 0.01
    sample_every: int = 1
    adaptive: bool = False
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"dt must be finite and > 0, got {self.dt!r}")
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise ValidationError(f"horizon must be finite and >= 0, got {self.horizon!r}")
        if self.sample_every < 1:
            raise ValidationError(f"sample_every must be >= 1, got {self.sample_every!r}")
        if not (math.isfinite(self.tol) and self.tol > 0):
            raise ValidationError(f"tol must be finite and > 0, got {self.tol!r}")


@dataclass(frozen=True)
class SimTrace:
    """Sampled run: times (S,), positions and velocities (S, N) by vehicle id."""

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    topology: Topology
    events: tuple[PassingEvent, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0):
            raise ValidationError("times must be non-empty and strictly increasing")
        for name in ("states", "velocities"):
            a = getattr(self, name)
            if a.shape[0] != t.size:
                raise ValidationError(f"{name} row count must match times length")

    @property
    def n(self) -> int:
        return self.states.shape[1]


def derivative(
    state: LinkState, specs: Sequence[VehicleSpec], params: ModelParams
) -> np.ndarray:
    """dx/dt for an index-ordered state: V_i * (1 - Gamma_i)."""
    gamma = congestion_factors(state, specs, params)
    return vmax_array(specs) * (1.0 - gamma)


def _raise_for_status(status: int, step: int, dt: float) -> None:
    if status == _k.STATUS_NONFINITE:
        raise NumericalError(
            f"state became non-finite at step {step} (t~{step * dt:.6g} s); "
            f"the configuration drives the model outside its valid regime"
        )
    if status == _k.STATUS_EVENT_OVERFLOW:
        raise NumericalError(
            f"crossing-event bookkeeping overflowed at step {step}; "
            f"this indicates an integrator bug"
        )


def simulate(
    scenario: Scenario, config: IntegratorConfig, permissive: bool = False
) -> SimTrace:
    """Integrate a scenario and return the sampled trace.

    Fixed-step runs are bit-deterministic for identical inputs.  The first
    sample is the initial state; afterwards every ``sample_every``-th step
    is recorded.  Initial states with congestion above 1 are rejected unless
    ``permissive`` is set.
    """
    check_admissible(scenario, permissive)
    if config.adaptive:
        return _simulate_adaptive(scenario, config)
    n_steps = int(round(config.horizon / config.dt))
    vmax = scenario.v_max
    params = scenario.params
    if isinstance(scenario.topology, Ring):
        times, xs, vs, n_s, status, bad = _k.run_ring(
            scenario.x0, vmax, params.kappa, params.omega,
            scenario.topology.L, config.dt, n_steps, config.sample_every,
        )
        _raise_for_status(status, bad, config.dt)
        return SimTrace(times[:n_s], xs[:n_s], vs[:n_s], scenario.topology, ())
    order0 = np.arange(scenario.n, dtype=np.int64)
    (times, xs, vs, n_s, ev_t, ev_a, ev_b, n_ev, _order, status, bad) = _k.run_open_link(
        scenario.x0, vmax, order0, params.kappa, params.omega,
        config.dt, n_steps, config.sample_every,
    )
    _raise_for_status(status, bad, config.dt)
    events = tuple(
        PassingEvent(t=float(ev_t[i]), passer=int(ev_a[i]), passed=int(ev_b[i]))
        for i in range(n_ev)
    )
    return SimTrace(times[:n_s], xs[:n_s], vs[:n_s], scenario.topology, events)


def _simulate_adaptive(scenario: Scenario, config: IntegratorConfig) -> SimTrace:
    # step doubling: one full step vs two half steps, classic 1/15 Richardson
    # error estimate; events are handled on each accepted interval
    params = scenario.params
    vmax = scenario.v_max
    on_ring = isinstance(scenario.topology, Ring)
    length = scenario.topology.L if on_ring else 0.0

    def step_once(x, order, h):
        if on_ring:
            return _k.rk4_ring_once(x, vmax, params.kappa, params.omega, length, h)
        return _k.rk4_open_once(x, order, vmax, params.kappa, params.omega, h)

    def velocity(x, order):
        if on_ring:
            return _k._velocities_ring(x, vmax, params.kappa, params.omega, length)
        return _k._velocities_open(x, order, vmax, params.kappa, params.omega)

    x = scenario.x0.copy()
    order = np.arange(scenario.n, dtype=np.int64)
    armed = np.ones(max(scenario.n - 1, 1), np.uint8)
    ev_cap = scenario.n * (scenario.n - 1) // 2 + 1
    ev_t = np.empty(ev_cap)
    ev_a = np.empty(ev_cap, np.int64)
    ev_b = np.empty(ev_cap, np.int64)
    n_ev = 0
    t = 0.0
    h = config.dt
    times = [0.0]
    xs = [x.copy()]
    vs = [velocity(x, order)]
    accepted = 0
    while t < config.horizon - 1e-15:
        h = min(h, config.horizon - t)
        x_full = step_once(x, order, h)
        x_half = step_once(step_once(x, order, 0.5 * h), order, 0.5 * h)
        if not np.all(np.isfinite(x_full)) or not np.all(np.isfinite(x_half)):
            raise NumericalError(f"state became non-finite near t={t:.6g} s")
        err = np.max(np.abs(x_full - x_half)) / 15.0
        scale = config.tol * (np.max(np.abs(x)) + 1.0)
        if err <= scale:
            if on_ring:
                x = x_half
            else:
                n_ev, status = _k.advance_open(
                    x, order, armed, vmax, params.kappa, params.omega,
                    t, t + h, ev_t, ev_a, ev_b, n_ev,
                )
                _raise_for_status(status, accepted, h)
            t += h
            accepted += 1
            if accepted % config.sample_every == 0:
                times.append(t)
                xs.append(x.copy())
                vs.append(velocity(x, order))
        ratio = (scale / err) ** 0.2 if err > 0 else 5.0
        h = h * min(5.0, max(0.2, 0.9 * ratio))
    if times[-1] < t:
        times.append(t)
        xs.append(x.copy())
        vs.append(velocity(x, order))
    events = tuple(
        PassingEvent(t=float(ev_t[i]), passer=int(ev_a[i]), passed=int(ev_b[i]))
        for i in range(n_ev)
    )
    return SimTrace(np.array(times), np.array(xs), np.array(vs), scenario.topology, events)


def build_two_region_ring(
    params: ModelParams,
    L: float,
    rho_global: float,
    jam_fraction: float,
    rho_jam: float,
    v_max: float,
) -> Scenario:
    """Ring with a dense arc: floor(rho_jam * jam_fraction * L) vehicles packed
    uniformly into the first `jam_fraction` of the ring, the rest spread
    uniformly over the remainder, round(rho_global * L) vehicles in total.
    """
    if not (L > 0 and rho_global > 0):
        raise ValidationError("L and rho_global must be > 0")
    if not 0.0 <= jam_fraction <= 1.0:
        raise ValidationError(f"jam_fraction must lie in [0, 1], got {jam_fraction!r}")
    if jam_fraction > 0 and not rho_jam > 0:
        raise ValidationError("rho_jam must be > 0 when the jam arc is non-empty")
    n_total = int(math.floor(rho_global * L + 0.5))
    if n_total < 1:
        raise ValidationError("rho_global * L must round to at least one vehicle")
    # guard against representation dust in products like 1.03 * 0.3 * 1000
    n_jam = int(math.floor(rho_jam * jam_fraction * L + 1e-12))
    n_rest = n_total - n_jam
    if n_rest < 0:
        raise ValidationError(
            f"jam arc would hold {n_jam} vehicles but the ring only has "
            f"{n_total}; lower rho_jam or jam_fraction"
        )
    if n_rest > 0 and jam_fraction >= 1.0:
        raise ValidationError(
            f"jam_fraction=1 leaves no room for the remaining {n_rest} "
            f"vehicles; rho_jam must equal the global density"
        )
    positions: list[float] = []
    if n_jam > 0:
        arc = jam_fraction * L
        positions.extend(arc * k / n_jam for k in range(n_jam))
    if n_rest > 0:
        start = jam_fraction * L
        rest = L - start
        positions.extend(start + rest * k / n_rest for k in range(n_rest))
    vehicles = tuple(
        VehicleSpec(id=i, v_max=v_max, x0=x) for i, x in enumerate(positions)
    )
    return Scenario(params=params, topology=Ring(L=L), vehicles=vehicles)
