#!/usr/bin/env python3
"""
Tests for reactive distributions, currents, rates and conservation.
"""

import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from markov_tpt.chains import (
    AbSets,
    DensityFamily,
    FiniteTimeChain,
    StationaryChain,
    TransitionMatrix,
    densities_for,
    reverse_transitions,
    stationary_distribution,
)
from markov_tpt.committors import solve
from markov_tpt.errors import SolverFailure, ValidationError
from markov_tpt.reactive import (
    check_conservation,
    compute_statistics,
    mean_transition_time,
    net_current,
    rates,
    reactive_distribution,
)

# =============================================================================
# Stationary closed forms
# =============================================================================


class TestStationaryStatistics:
    def test_two_state_rate(self, two_state):
        spec, sets = two_state
        _, stats = compute_statistics(spec, sets)
        assert stats.current[0][0, 1] == pytest.approx(1 / 15, abs=1e-12)
        assert stats.current[0][1, 0] == 0.0
        assert stats.aggregates.rate == pytest.approx(1 / 15, abs=1e-12)
        assert stats.aggregates.rate_in == pytest.approx(1 / 15, abs=1e-12)
        assert stats.aggregates.reactive_mass == 0.0
        assert stats.aggregates.mean_time == 0.0

    def test_two_state_normalized_distribution_is_undefined(self, two_state):
        spec, sets = two_state
        _, stats = compute_statistics(spec, sets)
        assert stats.z == (0.0,)
        assert stats.mu_hat == (None,)

    def test_gambler(self, gambler):
        spec, sets = gambler
        _, stats = compute_statistics(spec, sets)
        np.testing.assert_allclose(stats.mu[0], [0, 1 / 18, 1 / 18, 0], atol=1e-15)
        np.testing.assert_allclose(stats.mu_hat[0], [0, 0.5, 0.5, 0], atol=1e-14)
        assert stats.aggregates.rate == pytest.approx(1 / 24, abs=1e-14)
        assert stats.aggregates.reactive_mass == pytest.approx(1 / 9, abs=1e-14)
        assert mean_transition_time(stats) == pytest.approx(8 / 3, rel=1e-12)

    def test_gambler_effective_current(self, gambler):
        spec, sets = gambler
        _, stats = compute_statistics(spec, sets)
        assert stats.current[0][1, 2] == pytest.approx(1 / 18, abs=1e-15)
        assert stats.current[0][2, 1] == pytest.approx(1 / 72, abs=1e-15)
        effective = stats.effective[0]
        assert effective[1, 2] == pytest.approx(1 / 24, abs=1e-15)
        assert effective[2, 1] == 0.0
        assert effective.min() >= 0.0

    def test_distribution_vanishes_on_boundary(self, five_state):
        spec, sets = five_state
        _, stats = compute_statistics(spec, sets)
        assert stats.mu[0][0] == 0.0 and stats.mu[0][4] == 0.0
        assert np.all(stats.mu[0] >= 0)
        assert stats.mu_hat[0].sum() == pytest.approx(1.0)

    def test_rate_out_equals_rate_in(self, five_state):
        spec, sets = five_state
        _, stats = compute_statistics(spec, sets)
        assert stats.aggregates.rate > 0
        assert abs(stats.aggregates.rate - stats.aggregates.rate_in) < 1e-12

    def test_current_matches_reversed_chain_with_swapped_sets(self, five_state):
        spec, sets = five_state
        pi = stationary_distribution(spec.matrix)
        (backward,) = reverse_transitions(spec, DensityFamily((pi,)))
        _, forward_stats = compute_statistics(spec, sets)
        _, reversed_stats = compute_statistics(
            StationaryChain(backward), AbSets(sets.set_b, sets.set_a)
        )
        np.testing.assert_allclose(
            forward_stats.current[0].toarray(), reversed_stats.current[0].toarray().T, atol=1e-12
        )
        assert forward_stats.aggregates.rate == pytest.approx(
            reversed_stats.aggregates.rate, abs=1e-12
        )


# =============================================================================
# Periodic and finite closed forms
# =============================================================================


class TestPeriodicStatistics:
    def test_period_two_rates(self, periodic_pair):
        spec, sets = periodic_pair
        _, stats = compute_statistics(spec, sets)
        np.testing.assert_allclose(stats.rate_out_a, [0.0, 1 / 9], atol=1e-12)
        np.testing.assert_allclose(stats.rate_in_b, [0.0, 1 / 9], atol=1e-12)
        assert stats.aggregates.rate == pytest.approx(1 / 18, abs=1e-12)
        assert stats.aggregates.mean_time == pytest.approx(1.0, rel=1e-10)

    def test_empty_slice_has_no_normalized_distribution(self, periodic_pair):
        spec, sets = periodic_pair
        _, stats = compute_statistics(spec, sets)
        assert stats.z[0] == pytest.approx(1 / 9, abs=1e-12)
        assert stats.z[1] == 0.0
        assert stats.mu_hat[1] is None
        np.testing.assert_allclose(stats.mu_hat[0], [0, 1, 0])

    def test_both_methods_give_the_same_rate(self, periodic_pair):
        spec, sets = periodic_pair
        _, augmented = compute_statistics(spec, sets, method="augmented")
        _, stacked = compute_statistics(spec, sets, method="stacked")
        assert augmented.aggregates.rate == pytest.approx(stacked.aggregates.rate, abs=1e-12)


class TestFiniteStatistics:
    """Only the path 0 -> 1 -> 2 -> 3 is reactive on the window 0..3."""

    def test_slice_rates(self, finite_gambler):
        spec, sets = finite_gambler
        _, stats = compute_statistics(spec, sets)
        assert stats.rate_out_a[3] is None
        assert stats.rate_in_b[0] is None
        assert stats.rate_out_a[:3] == pytest.approx((1 / 32, 0.0, 0.0))
        assert stats.rate_in_b[1:] == pytest.approx((0.0, 0.0, 1 / 32))

    def test_window_aggregates(self, finite_gambler):
        spec, sets = finite_gambler
        _, stats = compute_statistics(spec, sets)
        assert stats.aggregates.rate == pytest.approx(1 / 128, abs=1e-15)
        assert stats.aggregates.rate_in == pytest.approx(1 / 128, abs=1e-15)
        assert stats.aggregates.reactive_mass == pytest.approx(1 / 64, abs=1e-15)
        assert stats.aggregates.mean_time == pytest.approx(2.0)

    def test_last_slice_has_no_current(self, finite_gambler):
        spec, sets = finite_gambler
        _, stats = compute_statistics(spec, sets)
        assert stats.current[-1] is None
        assert stats.effective[-1] is None
        assert all(f is not None for f in stats.current[:-1])

    def test_zero_rate_has_no_mean_time(self, gambler):
        walk, sets = gambler
        spec = FiniteTimeChain((walk.matrix,), np.full(4, 0.25))
        _, stats = compute_statistics(spec, sets)
        assert stats.aggregates.rate == 0.0
        assert stats.aggregates.mean_time is None
        assert mean_transition_time(stats) is None


# =============================================================================
# Building blocks
# =============================================================================


class TestBuildingBlocks:
    def test_net_current_rejects_negative_current(self):
        with pytest.raises(SolverFailure):
            net_current(sp.csr_matrix(np.array([[0.0, -1e-6], [0.0, 0.0]])))

    def test_net_current_clips_roundoff(self):
        net = net_current(sp.csr_matrix(np.array([[0.0, -1e-15], [0.2, 0.0]])))
        assert net[1, 0] == pytest.approx(0.2)
        assert net[0, 1] == 0.0

    def test_slice_mismatch(self, gambler, periodic_pair):
        spec, sets = gambler
        committors = solve(spec, sets)
        pair_spec, _ = periodic_pair
        with pytest.raises(ValidationError):
            reactive_distribution(committors, densities_for(pair_spec), sets)

    def test_rates_from_currents(self):
        current = sp.csr_matrix(np.array([[0.0, 0.1, 0.0], [0.0, 0.0, 0.1], [0.0, 0.0, 0.0]]))
        record = rates([current], AbSets({0}, {2}), "stationary")
        assert record.out_a == (pytest.approx(0.1),)
        assert record.rate == pytest.approx(0.1)
        assert record.rate_in == pytest.approx(0.1)


class TestConservation:
    @pytest.mark.parametrize("name", ["gambler", "five_state", "periodic_pair", "finite_gambler"])
    def test_solver_output_conserves_current(self, name, request):
        spec, sets = request.getfixturevalue(name)
        _, stats = compute_statistics(spec, sets)
        report = check_conservation(stats, sets)
        assert report.passed
        assert report.node_violation < 1e-10
        assert report.boundary_violation < 1e-10
        assert report.to_dict()["regime"] == spec.regime

    def test_tampered_current_is_reported(self, five_state):
        spec, sets = five_state
        _, stats = compute_statistics(spec, sets)
        tampered = stats.current[0].tolil()
        tampered[1, 2] += 1e-3
        broken = dataclasses.replace(stats, current=(tampered.tocsr(),))
        report = check_conservation(broken, sets)
        assert not report.passed
        assert report.node_violation == pytest.approx(1e-3, rel=1e-6)

    def test_sparse_ulam_sized_chain(self):
        # 50-state sparse ring walk, stored as CSR
        n = 50
        rows = np.arange(n)
        entries = sp.csr_matrix(
            (np.full(2 * n, 0.5), (np.r_[rows, rows], np.r_[(rows + 1) % n, (rows - 1) % n])),
            shape=(n, n),
        )
        matrix = TransitionMatrix.from_array(entries)
        assert matrix.is_sparse
        sets = AbSets({0}, {25})
        _, stats = compute_statistics(StationaryChain(matrix), sets)
        assert check_conservation(stats, sets).passed
        assert stats.aggregates.rate > 0
