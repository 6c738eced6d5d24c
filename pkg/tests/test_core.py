import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmflow import (
    LinkState,
    ModelParams,
    OpenLink,
    Regime,
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

from conftest import make_open_scenario


def open_state(positions):
    return LinkState(t=0.0, positions=np.asarray(positions, float),
                     topology=OpenLink())


def specs_for(positions, v=5.0):
    return tuple(VehicleSpec(id=i, v_max=v, x0=float(x))
                 for i, x in enumerate(positions))


PARAMS = ModelParams(kappa=1.0, omega=10.0)


class TestValidation:
    def test_params_reject_nonpositive(self):
        with pytest.raises(ValidationError):
            ModelParams(kappa=0.0, omega=10.0)
        with pytest.raises(ValidationError):
            ModelParams(kappa=1.0, omega=-1.0)

    def test_vehicle_spec_rejects_bad_speed(self):
        with pytest.raises(ValidationError):
            VehicleSpec(id=0, v_max=0.0, x0=0.0)
        with pytest.raises(ValidationError):
            VehicleSpec(id=0, v_max=float("nan"), x0=0.0)

    def test_scenario_requires_front_to_back(self):
        with pytest.raises(ValidationError):
            Scenario(params=PARAMS, topology=OpenLink(),
                     vehicles=(VehicleSpec(0, 5.0, 0.0), VehicleSpec(1, 5.0, 10.0)))

    def test_scenario_requires_contiguous_ids(self):
        with pytest.raises(ValidationError):
            Scenario(params=PARAMS, topology=OpenLink(),
                     vehicles=(VehicleSpec(0, 5.0, 0.0), VehicleSpec(2, 5.0, -5.0)))

    def test_state_rejects_nonfinite_positions(self):
        with pytest.raises(ValidationError):
            open_state([0.0, float("inf")])

    def test_state_rejects_empty(self):
        with pytest.raises(ValidationError):
            open_state([])

    def test_ring_state_wraps_positions(self):
        st_ = LinkState(t=0.0, positions=np.array([1500.0, -20.0]),
                        topology=Ring(L=1000.0))
        assert np.allclose(st_.positions, [500.0, 980.0])


class TestCongestion:
    def test_single_vehicle_empty_sum(self):
        pos = [0.0]
        g = congestion_factors_naive(open_state(pos), specs_for(pos), PARAMS)
        assert g.tolist() == [0.0]

    def test_two_vehicle_closed_form(self):
        # gap of one horizon: exp(-1)
        pos = [10.0, 0.0]
        g = congestion_factors_naive(open_state(pos), specs_for(pos), PARAMS)
        assert g[0] == 0.0
        assert g[1] == pytest.approx(math.exp(-1.0), rel=1e-15)

    def test_kappa_coincident_vehicles_jam(self):
        # kappa coincident vehicles directly ahead drive the factor to exactly 1
        kappa = 5
        pos = [10.0] * (kappa + 1)
        params = ModelParams(kappa=float(kappa), omega=10.0)
        g = congestion_factors_naive(open_state(pos), specs_for(pos), params)
        assert g[kappa] == 1.0
        v = velocities(open_state(pos), specs_for(pos, v=6.0), params,
                       gamma=g)
        assert v[kappa] == 0.0

    def test_velocity_free_flow_and_substitution(self):
        pos = [10.0, 0.0]
        v = velocities(open_state(pos), specs_for(pos, v=6.0), PARAMS)
        assert v[0] == 6.0  # leader exact
        assert v[1] == pytest.approx(6.0 * (1.0 - math.exp(-1.0)), rel=1e-15)
        assert v[1] == pytest.approx(3.79272, abs=1e-5)

    def test_fast_requires_open_link(self):
        state = LinkState(t=0.0, positions=np.array([1.0, 2.0]),
                          topology=Ring(L=10.0))
        with pytest.raises(ValidationError):
            congestion_factors_fast(state, specs_for([1.0, 2.0]), PARAMS)

    def test_fast_single_vehicle(self):
        pos = [42.0]
        g = congestion_factors_fast(open_state(pos), specs_for(pos), PARAMS)
        assert g.tolist() == [0.0]

    def test_fast_wide_span_stays_finite(self):
        rng = np.random.default_rng(7)
        pos = np.sort(rng.uniform(0.0, 1e6, 200))[::-1].copy()
        g = congestion_factors_fast(open_state(pos), specs_for(pos), PARAMS)
        assert np.all(np.isfinite(g))
        ref = congestion_factors_naive(open_state(pos), specs_for(pos), PARAMS)
        # below ~1e-290 the values are denormal and relative precision is
        # meaningless; the contract there is finite and non-NaN
        _assert_rel_close(g, ref, 1e-12, floor=1e-290)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**32 - 1),
           st.floats(0.2, 20.0), st.floats(1.0, 50.0))
    def test_fast_matches_naive_open(self, n, seed, kappa, omega):
        rng = np.random.default_rng(seed)
        pos = np.sort(rng.uniform(-500.0, 500.0, n))[::-1].copy()
        params = ModelParams(kappa=kappa, omega=omega)
        state = open_state(pos)
        specs = specs_for(pos)
        _assert_rel_close(
            congestion_factors_fast(state, specs, params),
            congestion_factors_naive(state, specs, params),
            1e-12,
        )

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 150), st.integers(0, 2**32 - 1),
           st.floats(0.2, 20.0), st.floats(1.0, 50.0))
    def test_ring_scan_matches_naive(self, n, seed, kappa, omega):
        rng = np.random.default_rng(seed)
        length = float(rng.uniform(50.0, 2000.0))
        pos = rng.uniform(0.0, length, n)
        params = ModelParams(kappa=kappa, omega=omega)
        state = LinkState(t=0.0, positions=pos, topology=Ring(L=length))
        specs = specs_for(pos)
        _assert_rel_close(
            congestion_factors(state, specs, params),
            congestion_factors_naive(state, specs, params),
            1e-12,
        )

    def test_gamma_nonnegative_and_leader_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            pos = np.sort(rng.uniform(-100, 100, n))[::-1].copy()
            g = congestion_factors_fast(open_state(pos), specs_for(pos), PARAMS)
            assert g[0] == 0.0
            assert np.all(g >= 0.0)


def _assert_rel_close(a, b, tol, floor=0.0):
    denom = np.maximum(np.abs(a), np.abs(b))
    keep = denom > floor
    err = np.where(keep, np.abs(a - b) / np.where(keep, denom, 1.0), 0.0)
    assert err.max() <= tol, f"max relative error {err.max():.3e} > {tol}"


class TestPassingCondition:
    def test_free_leader_threshold(self):
        # V = {4, 6}: threshold kappa = 3
        assert passing_condition(3.01, 0.0, 4.0, 6.0)
        assert not passing_condition(3.0, 0.0, 4.0, 6.0)
        assert not passing_condition(2.0, 0.0, 4.0, 6.0)

    def test_kappa_at_most_one_never_passes(self):
        for gamma in np.linspace(0.0, 1.0, 11):
            assert not passing_condition(1.0, float(gamma), 4.0, 6.0)
            assert not passing_condition(0.5, float(gamma), 2.0, 9.0)

    def test_congested_leader_blocks(self):
        # kappa*(1-0.5) = 2 < 3
        assert not passing_condition(4.0, 0.5, 4.0, 6.0)

    def test_rejects_slower_follower(self):
        with pytest.raises(ValidationError):
            passing_condition(10.0, 0.0, 6.0, 4.0)
        with pytest.raises(ValidationError):
            passing_condition(10.0, 0.0, 5.0, 5.0)

    def test_rejects_gamma_outside_range(self):
        with pytest.raises(ValidationError):
            passing_condition(10.0, 1.5, 4.0, 6.0)


class TestRegime:
    def specs(self, v_list):
        return tuple(VehicleSpec(id=i, v_max=v, x0=-10.0 * i)
                     for i, v in enumerate(v_list))

    def test_blocking_at_low_capacity(self):
        r = classify_regime(self.specs([4.0, 6.0]), ModelParams(1.0, 10.0))
        assert r.regime is Regime.BLOCKING

    def test_total_above_max_ratio(self):
        r = classify_regime(self.specs([4.0, 6.0]), ModelParams(10.0, 10.0))
        assert r.regime is Regime.PASSING_TOTAL
        assert r.sorting_threshold == pytest.approx(3.0)

    def test_partial_between(self):
        r = classify_regime(self.specs([4.0, 6.0]), ModelParams(2.0, 10.0))
        assert r.regime is Regime.PASSING_PARTIAL

    def test_equal_speeds_blocking_flag(self):
        r = classify_regime(self.specs([5.0, 5.0, 5.0]), ModelParams(10.0, 10.0))
        assert r.regime is Regime.BLOCKING
        assert r.equal_speeds
        assert r.sorting_threshold is None

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.floats(0.5, 20.0))
    def test_invariant_under_speed_rescaling(self, seed, scale, kappa):
        rng = np.random.default_rng(seed)
        v = rng.uniform(1.0, 9.0, int(rng.integers(1, 6)))
        params = ModelParams(kappa, 10.0)
        r1 = classify_regime(self.specs(v), params)
        r2 = classify_regime(self.specs(v * scale), params)
        assert r1.regime is r2.regime
        assert r1.equal_speeds == r2.equal_speeds

    def test_sorting_threshold_pairs(self):
        # tightest pair dominates: {4, 6, 6.5} -> 6.5/0.5 = 13
        assert sorting_threshold([4.0, 6.0, 6.5]) == pytest.approx(13.0)


def jam_density_oracle(kappa, omega, n_queue=4000, tol=1e-9):
    """Bisect the uniform-queue density whose congestion factor is 1."""
    k = np.arange(1, n_queue)

    def gamma(rho):
        return np.exp(-k / (rho * omega)).sum() / kappa

    lo, hi = 1e-6, 1e6
    while gamma(hi) < 1.0:
        hi *= 2
    while hi - lo > tol * lo:
        mid = math.sqrt(lo * hi)
        if gamma(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestMaxJamDensity:
    def test_against_queue_oracle(self):
        for kappa, omega in [(10.0, 10.0), (1.0, 10.0), (2.5, 7.0)]:
            rho = max_jam_density(ModelParams(kappa, omega))
            ref = jam_density_oracle(kappa, omega)
            assert rho == pytest.approx(ref, rel=1e-8)

    def test_reference_values(self):
        assert max_jam_density(ModelParams(10.0, 10.0)) == pytest.approx(1.0492, abs=2e-4)
        assert max_jam_density(ModelParams(1.0, 10.0)) == pytest.approx(
            1.0 / (10.0 * math.log(2.0)), rel=1e-15)

    def test_monotone_in_kappa(self):
        rhos = [max_jam_density(ModelParams(k, 10.0)) for k in (0.5, 1, 2, 10, 100)]
        assert all(a < b for a, b in zip(rhos[:-1], rhos[1:]))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 1000.0), st.floats(0.1, 1000.0))
    def test_algebraic_identity(self, kappa, omega):
        rho = max_jam_density(ModelParams(kappa, omega))
        assert abs(rho * omega * math.log1p(1.0 / kappa) - 1.0) <= 3e-16


class TestAdmissibility:
    def test_overpacked_state_rejected(self):
        sc = make_open_scenario(0.5, 10.0, [5.0, 5.0, 5.0], [1.0, 1.0])
        with pytest.raises(ValidationError, match="over capacity"):
            check_admissible(sc)

    def test_permissive_allows(self):
        sc = make_open_scenario(0.5, 10.0, [5.0, 5.0, 5.0], [1.0, 1.0])
        gamma = check_admissible(sc, permissive=True)
        assert gamma.max() > 1.0

    def test_velocity_bounds_when_admissible(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n = int(rng.integers(1, 8))
            gaps = rng.uniform(15.0, 40.0, n - 1)
            sc = make_open_scenario(1.0, 10.0, rng.uniform(2, 9, n), gaps)
            g = check_admissible(sc)
            v = velocities(sc.initial_state(), sc.vehicles, sc.params, gamma=g)
            assert np.all(v >= 0.0)
            assert np.all(v <= sc.v_max + 1e-12)
