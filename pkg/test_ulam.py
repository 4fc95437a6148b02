#!/usr/bin/env python3
"""
Tests for the Ulam discretization: grid geometry, potentials and matrix estimates.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from markov_tpt.chains import is_irreducible
from markov_tpt.errors import PreconditionError, ValidationError
from markov_tpt.experiment import DEFAULT_SET_RADIUS, default_disks
from markov_tpt.ulam import (
    CirculationForcing,
    LangevinSpec,
    UlamGrid,
    boltzmann_density,
    build_periodic_family,
    cells_in_disk,
    channel_currents,
    circulation_forcing,
    current_vector_field,
    estimate_transition_matrix,
    line_crossing_current,
    triple_well_potential,
)


@pytest.fixture
def small_grid():
    """4 x 4 cells of size 0.5 on [-1, 1]^2."""
    return UlamGrid((-1.0, 1.0, -1.0, 1.0), 0.5)


@pytest.fixture
def quick_spec():
    return LangevinSpec(potential="triple_well", tau=0.1, euler_dt=0.05, samples_per_cell=200)


# =============================================================================
# Grid
# =============================================================================


class TestGrid:
    def test_default_grid_has_300_cells(self):
        grid = UlamGrid.default_grid()
        assert (grid.nx, grid.ny, grid.n_cells) == (20, 15, 300)

    def test_row_major_numbering(self, small_grid):
        assert small_grid.index(1, 2) == 9
        np.testing.assert_allclose(small_grid.cell_bounds(9), (-0.5, 0.0, 0.0, 0.5))
        np.testing.assert_allclose(small_grid.centers()[9], (-0.25, 0.25))

    def test_locate_clamps_to_the_box(self, small_grid):
        cells = small_grid.locate(np.array([-5.0, 0.1, 5.0]), np.array([-5.0, 0.1, 5.0]))
        np.testing.assert_array_equal(cells, [0, 10, 15])

    def test_cell_size_must_divide_the_box(self):
        with pytest.raises(ValidationError):
            UlamGrid((0.0, 1.0, 0.0, 1.0), 0.3)

    def test_empty_box(self):
        with pytest.raises(ValidationError):
            UlamGrid((1.0, 1.0, 0.0, 1.0), 0.5)

    def test_dict_round_trip(self, small_grid):
        assert UlamGrid.from_dict(small_grid.to_dict()) == small_grid


class TestDisks:
    def test_default_wells(self):
        grid = UlamGrid.default_grid()
        cells = cells_in_disk(grid, (-1.0, 0.0), 0.25)
        assert len(cells) == 4
        centers = grid.centers()[sorted(cells)]
        assert np.all(np.hypot(centers[:, 0] + 1.0, centers[:, 1]) <= 0.25)

    def test_default_radius_adds_one_ring(self):
        grid = UlamGrid.default_grid()
        sets = default_disks(grid, DEFAULT_SET_RADIUS)
        assert len(sets.set_a) == len(sets.set_b) == 12
        centers = grid.centers()[sorted(sets.set_b)]
        distances = np.hypot(centers[:, 0] - 1.0, centers[:, 1])
        assert np.all(distances < 0.32)

    def test_disk_without_cells(self, small_grid):
        with pytest.raises(ValidationError):
            cells_in_disk(small_grid, (0.0, 0.0), 0.1)

    def test_radius_must_be_positive(self, small_grid):
        with pytest.raises(ValidationError):
            cells_in_disk(small_grid, (0.0, 0.0), 0.0)


# =============================================================================
# Potentials and forcing
# =============================================================================


class TestPotentials:
    def test_triple_well_gradient(self):
        x = np.array([-1.2, 0.0, 0.3, 1.1])
        y = np.array([0.1, 1.5, -0.4, 0.0])
        h = 1e-6
        _, gx, gy = triple_well_potential(x, y)
        fd_x = (triple_well_potential(x + h, y)[0] - triple_well_potential(x - h, y)[0]) / (2 * h)
        fd_y = (triple_well_potential(x, y + h)[0] - triple_well_potential(x, y - h)[0]) / (2 * h)
        np.testing.assert_allclose(gx, fd_x, atol=1e-7)
        np.testing.assert_allclose(gy, fd_y, atol=1e-7)

    def test_deep_wells_below_shallow_well(self):
        value, _, _ = triple_well_potential(np.array([-1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.5]))
        assert value[0] == pytest.approx(value[1])
        assert value[0] < value[2]

    def test_forcing_alternates(self):
        fx, fy = circulation_forcing(1.0, 0.0, 0.0, 1.4, 1.8)
        assert (float(fx), float(fy)) == pytest.approx((0.0, 1.4))
        fx, fy = circulation_forcing(1.0, 0.0, 0.9, 1.4, 1.8)
        assert float(fy) == pytest.approx(-1.4)

    def test_unknown_forcing_type(self):
        with pytest.raises(ValidationError):
            CirculationForcing(1.0, 1.8, type="shear")

    def test_boltzmann_density_favours_deep_wells(self):
        grid = UlamGrid.default_grid()
        density = boltzmann_density(grid, LangevinSpec())
        assert density.sum() == pytest.approx(1.0)
        well = grid.locate(np.array([-1.1]), np.array([0.1]))[0]
        saddle = grid.locate(np.array([0.1]), np.array([0.1]))[0]
        assert density[well] > density[saddle]

    def test_boltzmann_density_needs_unforced_dynamics(self):
        spec = LangevinSpec(forcing=CirculationForcing(1.4, 1.8))
        with pytest.raises(PreconditionError):
            boltzmann_density(UlamGrid.default_grid(), spec)

    def test_spec_round_trip(self):
        spec = LangevinSpec(tau=0.3, forcing=CirculationForcing(1.4, 1.8))
        assert LangevinSpec.from_dict(spec.to_dict()) == spec

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            LangevinSpec(potential="quadruple_well")
        with pytest.raises(ValidationError):
            LangevinSpec(tau=0.1, euler_dt=0.2)
        with pytest.raises(ValidationError):
            LangevinSpec.from_dict({"sigma": 1.0, "temperature": 2.0})


# =============================================================================
# Matrix estimates
# =============================================================================


class TestEstimate:
    def test_rows_are_stochastic(self, small_grid, quick_spec):
        matrix = estimate_transition_matrix(small_grid, quick_spec, seed=1)
        assert matrix.n_states == 16
        np.testing.assert_allclose(matrix.row_sums(), np.ones(16), atol=1e-12)
        assert matrix.min_entry() >= 0

    def test_independent_of_worker_count(self, small_grid, quick_spec):
        serial = estimate_transition_matrix(small_grid, quick_spec, seed=2, workers=1)
        parallel = estimate_transition_matrix(small_grid, quick_spec, seed=2, workers=4)
        np.testing.assert_array_equal(serial.dense(), parallel.dense())

    def test_seed_changes_the_estimate(self, small_grid, quick_spec):
        a = estimate_transition_matrix(small_grid, quick_spec, seed=1)
        b = estimate_transition_matrix(small_grid, quick_spec, seed=2)
        assert not np.array_equal(a.dense(), b.dense())

    def test_constant_drift_moves_mass_right(self, small_grid):
        spec = LangevinSpec(
            potential="linear",
            params={"drift": [5.0, 0.0]},
            sigma=0.01,
            tau=0.1,
            euler_dt=0.01,
            samples_per_cell=100,
        )
        dense = estimate_transition_matrix(small_grid, spec, seed=0).dense()
        # cell 5 spans x in [-0.5, 0); a drift of 0.5 per lag lands in cell 6
        assert dense[5, 6] > 0.9

    def test_flat_potential_mixes(self, small_grid):
        spec = LangevinSpec(potential="flat", tau=0.5, euler_dt=0.05, samples_per_cell=500)
        matrix = estimate_transition_matrix(small_grid, spec, seed=0)
        assert is_irreducible(matrix)

    def test_periodic_family(self, small_grid):
        spec = LangevinSpec(
            tau=0.3, euler_dt=0.05, samples_per_cell=100, forcing=CirculationForcing(1.4, 0.6)
        )
        family = build_periodic_family(small_grid, spec, 2, seed=3)
        assert len(family) == 2
        assert not np.array_equal(family[0].dense(), family[1].dense())

    def test_period_must_match_slices(self, small_grid):
        spec = LangevinSpec(tau=0.3, euler_dt=0.05, forcing=CirculationForcing(1.4, 1.8))
        with pytest.raises(PreconditionError):
            build_periodic_family(small_grid, spec, 5)

    def test_family_needs_forcing(self, small_grid, quick_spec):
        with pytest.raises(PreconditionError):
            build_periodic_family(small_grid, quick_spec, 2)


# =============================================================================
# Plot helpers
# =============================================================================


class TestCurrentGeometry:
    def test_vector_field_points_along_the_jump(self, small_grid):
        effective = sp.csr_matrix(([0.3], ([5], [6])), shape=(16, 16))
        field = current_vector_field(small_grid, effective)
        np.testing.assert_allclose(field[5], [0.3, 0.0])
        assert np.all(field[np.arange(16) != 5] == 0)

    def test_line_crossing_is_signed(self, small_grid):
        # 5 -> 6 crosses x=0 left to right at y=-0.25; 10 -> 9 crosses right to left at y=0.25
        effective = sp.csr_matrix(([0.3, 0.1], ([5, 10], [6, 9])), shape=(16, 16))
        below, above = line_crossing_current(small_grid, effective, split_y=0.0)
        assert below == pytest.approx(0.3)
        assert above == pytest.approx(-0.1)

    def test_channel_summary_skips_undefined_slices(self, small_grid):
        lower = sp.csr_matrix(([0.3], ([5], [6])), shape=(16, 16))
        upper = sp.csr_matrix(([0.2, 0.4], ([5, 9], [6, 10])), shape=(16, 16))
        channels = channel_currents(small_grid, (lower, upper, None), split_y=0.0)
        assert channels.below[:2] == pytest.approx((0.3, 0.2))
        assert channels.below[2] is None and channels.above[2] is None
        assert channels.centre == 1
        assert channels.dominant == "upper"
        assert channel_currents(small_grid, (lower,), split_y=0.0).dominant == "lower"
        assert channels.to_dict()["slices"][2] == {"slice": 2, "below": None, "above": None}
