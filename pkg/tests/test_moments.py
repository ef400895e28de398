import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.channel import identity_projection, simulate
from app.errors import DimensionMismatchError, InfeasibleConstraintError, NoDistinguishingOrderError, ToolkitError
from app.group import GroupDistribution, cyclic_shift_group, orbit_distance
from app.moments import (
    SYMMETRY_TOL,
    ConstraintSet,
    MomentTensor,
    SearchOptions,
    cutoff_search,
    directional_order,
    directional_q,
    empirical_moment,
    exact_moment,
    first_distinguishing_order,
    moment_derivative,
    moment_distance,
    moments_match,
)


class TestExactMoments:
    """Closed-form moment tensors of small examples."""

    def test_example1_first_and_second_moments(self, example1):
        """M¹ = ((b+c)/3)(1, 1) and M² = (1/3)[[b²+c², bc], [bc, b²+c²]] for b = 1, c = 2."""
        m1 = exact_moment(example1.x, example1.theta, example1.projection, 1)
        m2 = exact_moment(example1.x, example1.theta, example1.projection, 2)
        assert_allclose(m1.entries, [1.0, 1.0])
        assert_allclose(m2.entries, np.array([[5.0, 2.0], [2.0, 5.0]]) / 3.0)

    def test_example1_alternative_matches_two_orders(self, example1):
        """The reflected signal shares M¹ and M² with x."""
        for order in (1, 2):
            a = exact_moment(example1.x, example1.theta, example1.projection, order)
            b = exact_moment(example1.alternative, example1.theta, example1.projection, order)
            assert moments_match(a, b)

    def test_skewed_distribution_second_moment(self, example1):
        """θ = (½, ½, 0) gives ½·diag(c², b²)."""
        theta = GroupDistribution(example1.group, np.array([0.5, 0.5, 0.0]))
        m2 = exact_moment(example1.x, theta, example1.projection, 2)
        assert_allclose(m2.entries, [[2.0, 0.0], [0.0, 0.5]])

    def test_point_mass_first_moment_is_projected_signal(self, example1):
        """A point mass at the identity gives M¹ = P·x."""
        theta = GroupDistribution.point_mass(example1.group, example1.group.identity_index)
        m1 = exact_moment(example1.x, theta, example1.projection, 1)
        assert_allclose(m1.entries, [0.0, 1.0])

    def test_example2_moments(self, example2):
        """M¹ = (a+b)/2 and M² = (a²+b²)/2 for the swap example."""
        assert_allclose(exact_moment(example2.x, example2.theta, example2.projection, 1).entries, [1.5])
        assert_allclose(exact_moment(example2.x, example2.theta, example2.projection, 2).entries, [[2.5]])
        assert_allclose(exact_moment(example2.alternative, example2.theta, example2.projection, 2).entries, [[4.5]])

    def test_tensors_are_symmetric(self, example1):
        """Exact tensors are invariant under index permutations."""
        theta = GroupDistribution(example1.group, np.array([0.2, 0.3, 0.5]))
        for order in (2, 3, 4):
            assert exact_moment(example1.x, theta, example1.projection, order).asymmetry() < SYMMETRY_TOL

    def test_invariant_under_translated_orbit_member(self, example1):
        """(g·x, translated θ) has the same moments as (x, θ)."""
        theta = GroupDistribution(example1.group, np.array([0.2, 0.3, 0.5]))
        g = example1.group.elements[1]
        shifted = g.act(example1.x)
        for order in (1, 2, 3):
            a = exact_moment(example1.x, theta, example1.projection, order)
            b = exact_moment(shifted, theta.right_translate(g), example1.projection, order)
            assert_allclose(a.entries, b.entries, atol=1e-12)

    def test_rows_are_row_major(self, example1):
        """Tensor rows are listed with the last index fastest."""
        rows = exact_moment(example1.x, example1.theta, example1.projection, 2).rows()
        assert [index for index, _ in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_shape_checks(self):
        """Entry shapes must match order and dimension."""
        with pytest.raises(DimensionMismatchError):
            MomentTensor(2, 2, np.zeros(2))
        with pytest.raises(ToolkitError):
            MomentTensor(0, 2, np.zeros(()))
        with pytest.raises(DimensionMismatchError):
            moment_distance(MomentTensor(1, 2, np.zeros(2)), MomentTensor(1, 3, np.zeros(3)))


class TestEmpiricalMoments:
    """Sample moments with the noise contribution removed."""

    def test_debiased_second_moment(self, example1):
        """Removing σ²·I recovers M² from 2·10⁵ samples."""
        batch = simulate(example1.model(1.0), 200_000, seed=2)
        m2 = empirical_moment(batch, 2, sigma=1.0)
        assert_allclose(m2.entries, np.array([[5.0, 2.0], [2.0, 5.0]]) / 3.0, atol=0.05)

    def test_raw_second_moment_carries_noise(self, example1):
        """Without debiasing the noise adds σ² on the diagonal."""
        batch = simulate(example1.model(1.0), 200_000, seed=2)
        m2 = empirical_moment(batch, 2, sigma=1.0, debias=False)
        assert_allclose(m2.entries, np.array([[8.0, 2.0], [2.0, 8.0]]) / 3.0, atol=0.05)

    def test_debiased_third_moment(self, example1):
        """The order-3 correction removes the σ²·sym(M¹ ⊗ I) term."""
        batch = simulate(example1.model(1.0), 200_000, seed=4)
        expected = exact_moment(example1.x, example1.theta, example1.projection, 3)
        assert_allclose(empirical_moment(batch, 3, sigma=1.0).entries, expected.entries, atol=0.25)

    def test_fourth_order_debias_not_supported(self, example1):
        """Order 4 is available raw only."""
        batch = simulate(example1.model(1.0), 10, seed=0)
        with pytest.raises(ToolkitError):
            empirical_moment(batch, 4, sigma=1.0)
        assert empirical_moment(batch, 4, sigma=1.0, debias=False).order == 4

    def test_error_falls_as_inverse_square_root(self, example1):
        """The debiased M² error has log-log slope −½ in N."""
        expected = exact_moment(example1.x, example1.theta, example1.projection, 2).entries
        sizes = [1_000, 10_000, 100_000]
        errors = []
        for n in sizes:
            squared = []
            for replicate in range(16):
                batch = simulate(example1.model(1.0), n, seed=30, replicate=replicate)
                squared.append(np.sum((empirical_moment(batch, 2, sigma=1.0).entries - expected) ** 2))
            errors.append(math.sqrt(np.mean(squared)))
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestDistinguishingOrder:
    """First order at which two models' moments differ."""

    def test_example2(self, example2):
        """The swap alternative first differs at order 2 with K² = 2."""
        d, k = first_distinguishing_order(
            example2.alternative, example2.theta, example2.x, example2.theta, example2.projection
        )
        assert d == 2
        assert k == pytest.approx(2.0)

    def test_example1(self, example1):
        """The reflected signal first differs at order 3 with K³ = 4."""
        d, k = first_distinguishing_order(
            example1.alternative, example1.theta, example1.x, example1.theta, example1.projection
        )
        assert d == 3
        assert k == pytest.approx(4.0)

    def test_orbit_member_never_distinguished(self, example1):
        """A shifted copy of x matches every order."""
        shifted = example1.group.elements[2].act(example1.x)
        with pytest.raises(NoDistinguishingOrderError):
            first_distinguishing_order(shifted, example1.theta, example1.x, example1.theta, example1.projection)


class TestDirectionalDerivatives:
    """Derivatives of moments along a straight path in parameter space."""

    def test_example2_second_moment_derivative(self, example2):
        """d/dh M² along (1, 2) → (0, 3) is 1."""
        derivative = moment_derivative(
            example2.x, example2.theta, example2.alternative, example2.theta, example2.projection, 2
        )
        assert_allclose(derivative, [[1.0]], atol=1e-10)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_methods_agree(self, example1, order):
        """Interpolation and product rule give the same derivative tensor."""
        thetat = GroupDistribution(example1.group, np.array([0.6, 0.3, 0.1]))
        xt = np.array([0.5, -1.0, 2.0])
        by_nodes = moment_derivative(example1.x, example1.theta, xt, thetat, example1.projection, order)
        by_rule = moment_derivative(
            example1.x, example1.theta, xt, thetat, example1.projection, order, method="product-rule"
        )
        assert_allclose(by_nodes, by_rule, atol=1e-9)

    def test_example2_directional_order(self, example2):
        """Q first appears at order 2 with value (a−b)²/2."""
        q, value = directional_order(
            example2.x, example2.theta, example2.alternative, example2.theta, example2.projection
        )
        assert q == 2
        assert value == pytest.approx(0.5)

    def test_first_order_derivative_vanishes(self, example2):
        """The swap direction leaves M¹ fixed."""
        value = directional_q(example2.x, example2.theta, example2.alternative, example2.theta, example2.projection, 1)
        assert value == pytest.approx(0.0, abs=1e-20)

    def test_unknown_method(self, example2):
        """Only interpolation and product-rule are accepted."""
        with pytest.raises(ToolkitError):
            moment_derivative(
                example2.x, example2.theta, example2.alternative, example2.theta, example2.projection, 2, method="fd"
            )

    def test_shape_mismatch(self, example2):
        """The direction must have the signal's length."""
        with pytest.raises(DimensionMismatchError):
            moment_derivative(example2.x, example2.theta, np.zeros(3), example2.theta, example2.projection, 2)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_q_matches_centered_difference(self, example1, order):
        """Q^n agrees with ‖(M^n(h) − M^n(−h)) / 2h‖² / n! for h = 10⁻⁴."""
        thetat = GroupDistribution(example1.group, np.array([0.6, 0.3, 0.1]))
        xt = np.array([0.5, -1.0, 2.0])
        h = 1e-4

        def moment_at(step):
            x_h = (1.0 - step) * example1.x + step * xt
            theta_h = GroupDistribution(example1.group, example1.theta.mix(thetat, step))
            return exact_moment(x_h, theta_h, example1.projection, order).entries

        difference = (moment_at(h) - moment_at(-h)) / (2.0 * h)
        expected = float(np.sum(difference**2)) / math.factorial(order)
        value = directional_q(example1.x, example1.theta, xt, thetat, example1.projection, order)
        assert value == pytest.approx(expected, abs=1e-6)


class TestCutoffSearch:
    """Witness search for the moment order cutoff."""

    def test_example1_with_one_zero_entry(self, example1):
        """With one zero entry known, the witness is the reflected signal and d̄ = 3."""
        report = cutoff_search(
            example1.x,
            example1.theta,
            example1.projection,
            ConstraintSet(zero_entries=1),
            SearchOptions(max_order=3, restarts=24, seed=1),
        )
        assert report.certified
        assert report.d_bar == 3
        assert orbit_distance(report.witness_x, example1.alternative, example1.group) < 1e-4
        assert report.first_distinguishing_order_value == pytest.approx(4.0, rel=1e-3)

    def test_example2(self, example2):
        """The swap example certifies d̄ = 2."""
        report = cutoff_search(
            example2.x, example2.theta, example2.projection, opts=SearchOptions(max_order=3, restarts=16)
        )
        assert report.certified
        assert report.d_bar == 2
        assert [order for order, _ in report.matched_orders] == [1, 2]

    def test_point_mass_has_no_witness(self):
        """A point-mass θ leaves no moment-matching witness, so the report is uncertified."""
        group = cyclic_shift_group(3)
        theta = GroupDistribution.point_mass(group, 0)
        report = cutoff_search(
            np.array([0.0, 1.0, 2.0]), theta, identity_projection(3), opts=SearchOptions(max_order=2, restarts=8)
        )
        assert report.d_bar == 1
        assert not report.certified
        assert report.notes

    def test_deterministic_for_a_seed(self, example2):
        """Same seed gives the same witness on one or three threads."""
        opts = SearchOptions(max_order=2, restarts=8, seed=7)
        first = cutoff_search(example2.x, example2.theta, example2.projection, opts=opts)
        second = cutoff_search(example2.x, example2.theta, example2.projection, opts=opts, threads=3)
        assert_array_equal(first.witness_x, second.witness_x)
        assert first.d_bar == second.d_bar

    def test_constraint_must_admit_the_true_signal(self, example1):
        """A constraint the truth violates is infeasible."""
        with pytest.raises(InfeasibleConstraintError):
            cutoff_search(example1.x, example1.theta, example1.projection, ConstraintSet(zero_entries=0))
