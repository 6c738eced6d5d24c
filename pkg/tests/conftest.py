"""Shared scenario generators for the test suite.

Random fleets are built admissible by construction: gaps are drawn above
the spacing at which an infinite queue would reach 95% congestion, so no
generated initial state is rejected.
"""

from __future__ import annotations

import math

import numpy as np

from scmflow import ModelParams, OpenLink, Scenario, VehicleSpec


def min_admissible_gap(kappa: float, omega: float, gamma_cap: float = 0.95) -> float:
    r = gamma_cap * kappa / (1.0 + gamma_cap * kappa)
    return -omega * math.log(r)


def make_open_scenario(kappa, omega, v_list, gaps, x_leader=0.0) -> Scenario:
    x = x_leader - np.concatenate(([0.0], np.cumsum(gaps)))
    vehicles = tuple(
        VehicleSpec(id=i, v_max=float(v), x0=float(xi))
        for i, (v, xi) in enumerate(zip(v_list, x))
    )
    return Scenario(params=ModelParams(kappa=kappa, omega=omega),
                    topology=OpenLink(), vehicles=vehicles)


def distinct_speeds(rng: np.random.Generator, n: int,
                    lo=2.0, hi=9.0, min_sep=0.2) -> np.ndarray:
    while True:
        v = rng.uniform(lo, hi, n)
        if n == 1 or np.min(np.diff(np.sort(v))) >= min_sep:
            return v


def random_blocking_scenario(rng: np.random.Generator, n_max: int = 10,
                             duplicates: bool = False) -> Scenario:
    n = int(rng.integers(2, n_max + 1))
    kappa = float(rng.uniform(0.3, 1.0))
    omega = float(rng.uniform(5.0, 20.0))
    if duplicates:
        base = distinct_speeds(rng, max(2, n // 2 + 1))
        v = rng.choice(base, n, replace=True)
        # force at least one exact repeat
        v[-1] = v[0]
    else:
        v = distinct_speeds(rng, n)
    g0 = min_admissible_gap(kappa, omega)
    gaps = rng.uniform(g0, g0 + 2.0 * omega, n - 1)
    return make_open_scenario(kappa, omega, v, gaps)


def random_passing_fleet(rng: np.random.Generator, n: int = 5,
                         above_threshold: bool = True) -> Scenario:
    from scmflow import sorting_threshold

    v = distinct_speeds(rng, n, lo=3.0, hi=8.0, min_sep=0.5)
    thr = sorting_threshold(v)
    if above_threshold:
        kappa = 1.2 * thr
    else:
        ratios = sorted(
            vf / (vf - vs)
            for i, vs in enumerate(v) for vf in v
            if vf > vs
        )
        # below the top ratio but above the next one: exactly one pair blocked
        kappa = 0.5 * (ratios[-1] + ratios[-2]) if len(ratios) >= 2 else 0.9 * thr
        kappa = max(kappa, 1.5)
    omega = 10.0
    g0 = max(min_admissible_gap(kappa, omega), 20.0)
    gaps = rng.uniform(g0, g0 + 40.0, n - 1)
    return make_open_scenario(kappa, omega, v, gaps)
