"""
Tests for bounds/lab.py - Magnitude and variance bound checks
"""

import math
import operator

import numpy as np
import pytest
from hypothesis import given, seed, settings, strategies as st
from hypothesis.extra.numpy import arrays

from merge_lab.bounds.lab import (
    BoundConfig,
    BoundReport,
    avg_variance_formula,
    check_avg_max_norm,
    check_avg_variance,
    check_property1,
    check_scaling_variance,
    check_theorem1,
    exact_violation_count,
    guaranteed_probability,
    lemma1_bound,
    lemma1_sweep,
    run_bound_suite,
    theorem1_bound,
)
from merge_lab.errors import DimensionError, DomainError
from merge_lab.tensor.core import RngStream, sample_gaussian

EXAMPLE_1 = np.array([[1.0, 2.0], [3.0, 4.0]])
EXAMPLE_2 = np.array([[5.0, 6.0], [7.0, 8.0]])

entries = st.floats(
    min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False
)
variances = st.floats(min_value=0.0, max_value=1e12, allow_nan=False, allow_subnormal=False)


def matrix_pairs():
    shapes = st.tuples(st.integers(1, 6), st.integers(1, 6))
    return shapes.flatmap(
        lambda shape: st.tuples(
            arrays(np.float64, shape, elements=entries), arrays(np.float64, shape, elements=entries)
        )
    )


@pytest.fixture
def small_bound_config():
    return BoundConfig(depth=2, width=6, trials=100, seed=3)


class TestGuaranteedProbability:
    """Tests for guaranteed_probability."""

    def test_single_layer(self):
        """Test tau = 2 gives 1 - 2 exp(-4)."""
        assert guaranteed_probability(2.0) == pytest.approx(1 - 2 * math.exp(-4))

    def test_three_layers(self):
        """Test the per-layer probability is raised to the depth."""
        assert guaranteed_probability(2.0, 3) == pytest.approx((1 - 2 * math.exp(-4)) ** 3)

    def test_clamped_at_zero(self):
        """Test small tau gives a vacuous guarantee of 0."""
        assert guaranteed_probability(0.5) == 0.0

    def test_tau_must_be_positive(self):
        """Test tau <= 0 raises DomainError."""
        with pytest.raises(DomainError):
            guaranteed_probability(0.0)


class TestMaxNorm:
    """Tests for check_avg_max_norm."""

    def test_hand_example(self):
        """Test the 2x2 example: average max 6, mean bound 6, max 8."""
        report = check_avg_max_norm(EXAMPLE_1, EXAMPLE_2)
        assert report.empirical == 6.0
        assert report.bound_value == 6.0
        assert report.extra["max_constituent"] == 8.0
        assert report.holds
        assert report.exact_violations == 0

    def test_injected_violation(self):
        """Test a flipped comparison is reported as an exact violation."""
        report = check_avg_max_norm(EXAMPLE_1, EXAMPLE_2, compare=operator.ge)
        assert not report.holds
        assert report.exact_violations == 1

    def test_opposite_matrices_average_to_zero(self):
        """Test W and -W average to zero."""
        report = check_avg_max_norm(EXAMPLE_1, -EXAMPLE_1)
        assert report.empirical == 0.0
        assert report.holds

    def test_shape_mismatch(self):
        """Test different shapes raise DimensionError."""
        with pytest.raises(DimensionError):
            check_avg_max_norm(np.ones((2, 2)), np.ones((2, 3)))

    @seed(2024)
    @settings(max_examples=1000, deadline=None)
    @given(matrix_pairs())
    def test_holds_for_any_pair(self, pair):
        """Test the max-norm chain holds exactly for arbitrary same-shape matrices."""
        report = check_avg_max_norm(*pair)
        assert report.holds
        assert report.empirical <= report.bound_value <= report.extra["max_constituent"]


class TestVarianceInequality:
    """Property tests for avg_variance_formula."""

    @seed(31)
    @settings(max_examples=200, deadline=None)
    @given(variances, variances)
    def test_average_never_exceeds_larger(self, s1, s2):
        """Test (s1 + s2) / 4 <= max(s1, s2)."""
        assert avg_variance_formula(s1, s2) <= max(s1, s2)


class TestVariance:
    """Tests for the averaged and scaled variance checks."""

    def test_equal_variances_halve(self):
        """Test equal variances average to exactly half."""
        assert avg_variance_formula(4.0, 4.0) == 2.0

    def test_unequal_variances(self):
        """Test (1 + 9) / 4 = 2.5, below the larger variance."""
        assert avg_variance_formula(1.0, 9.0) == 2.5

    def test_negative_variance(self):
        """Test negative variances raise DomainError."""
        with pytest.raises(DomainError):
            avg_variance_formula(-1.0, 1.0)

    @pytest.mark.parametrize("sigmas", [(4.0, 4.0), (1.0, 9.0)])
    def test_monte_carlo_matches_formula(self, sigmas):
        """Test the sampled variance of the average agrees with the formula."""
        report = check_avg_variance(*sigmas, trials=20_000, seed=1)
        assert report.holds
        assert report.empirical == pytest.approx(report.bound_value, rel=0.1)

    def test_scaling_by_one_hundred(self):
        """Test scaling a tensor by 100 multiplies its variance by 1e4."""
        t = sample_gaussian(RngStream(2), (32, 32))
        report = check_scaling_variance(t, 100.0)
        assert report.holds
        assert report.empirical == pytest.approx(report.bound_value, rel=1e-9)
        assert report.params["factor"] == 100.0


class TestLemma1:
    """Tests for lemma1_bound and lemma1_sweep."""

    def test_identity_bound(self):
        """Test I_4 with tau 1: sqrt(4) + 1 * 1 * (sqrt(4) + 1) = 5."""
        bound, measured = lemma1_bound(np.eye(4), tau=1.0)
        assert bound == pytest.approx(5.0)
        assert measured == pytest.approx(1.0, abs=1e-9)

    def test_c_s_scales_second_term(self):
        """Test C_s = 0 leaves only sqrt(N)."""
        bound, _ = lemma1_bound(np.eye(9), tau=1.0, c_s=0.0)
        assert bound == pytest.approx(3.0)

    def test_rejects_bad_arguments(self):
        """Test tau <= 0 and non-matrices are rejected."""
        with pytest.raises(DomainError):
            lemma1_bound(np.eye(2), tau=0.0)
        with pytest.raises(DimensionError):
            lemma1_bound(np.ones(3), tau=1.0)

    def test_sweep_holds(self):
        """Test Gaussian matrices satisfy the bound at least as often as guaranteed."""
        report = lemma1_sweep(width=8, tau=2.0, trials=200, seed=4)
        assert report.holds
        assert report.holds_rate >= report.guaranteed_prob - 0.05
        assert report.empirical < report.bound_value


class TestProperty1:
    """Tests for check_property1."""

    def test_random_layers(self, small_bound_config):
        """Test the output norm bound holds and the Lipschitz chain never fails."""
        report = check_property1(small_bound_config)
        assert report.holds
        assert report.exact_violations == 0
        assert report.guaranteed_prob == pytest.approx(guaranteed_probability(2.0, 2))

    def test_fixed_identity_layers(self):
        """Test identity layers keep the unit input norm below the bound."""
        cfg = BoundConfig(depth=2, width=4, trials=10, activation="identity")
        report = check_property1(cfg, fixed_weights=[np.eye(4), np.eye(4)])
        assert report.holds
        assert report.violation_rate == 0.0

    def test_fixed_weights_shape(self):
        """Test fixed layers of the wrong shape raise DimensionError."""
        cfg = BoundConfig(depth=2, width=4, trials=1)
        with pytest.raises(DimensionError):
            check_property1(cfg, fixed_weights=[np.eye(4)])

    @pytest.mark.slow
    @pytest.mark.parametrize("tau", [1.0, 2.0, 3.0])
    def test_deep_wide_networks(self, tau):
        """Test 1000 five-layer width-64 ReLU nets against the bound at each tau."""
        cfg = BoundConfig(tau=tau, c_s=1.0, depth=5, width=64, trials=1000, seed=17)
        report = check_property1(cfg)
        assert report.holds
        assert report.exact_violations == 0
        assert 1.0 - report.violation_rate >= report.guaranteed_prob


class TestTheorem1:
    """Tests for theorem1_bound and check_theorem1."""

    def test_single_layer_bound(self):
        """Test 2 * 4 * 1 + 4 * 0.25 = 9."""
        cfg = BoundConfig(depth=1, width=4, sigma_w=1.0, sigma_b=0.5)
        assert theorem1_bound(cfg, 2.0) == pytest.approx(9.0)

    def test_per_layer_sigmas(self):
        """Test each layer uses its own weight standard deviation."""
        cfg = BoundConfig(depth=2, width=2, sigma_w_layers=[1.0, 2.0], sigma_b=0.0)
        assert theorem1_bound(cfg, 1.0) == pytest.approx(16.0)

    def test_layer_list_length(self):
        """Test per-layer lists must match the depth."""
        with pytest.raises(ValueError):
            BoundConfig(depth=3, sigma_w_layers=[1.0, 1.0])

    def test_linear_layer_is_tight(self):
        """Test a single affine layer reaches the bound."""
        cfg = BoundConfig(depth=1, width=4, sigma_b=0.5, activation="identity", trials=4000, seed=2)
        report = check_theorem1(cfg)
        assert report.empirical == pytest.approx(report.bound_value, rel=0.1)

    def test_relu_network_below_bound(self):
        """Test a two-layer ReLU net stays within the bound."""
        cfg = BoundConfig(depth=2, width=8, sigma_b=0.1, trials=2000, seed=5)
        report = check_theorem1(cfg)
        assert report.holds
        assert report.empirical < report.bound_value

    @pytest.mark.slow
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_three_layer_networks(self, activation):
        """Test 10^4 three-layer width-16 nets with biases stay within the bound."""
        cfg = BoundConfig(depth=3, width=16, sigma_b=0.5, activation=activation, trials=10_000, seed=8)
        report = check_theorem1(cfg)
        assert report.holds
        assert report.empirical < report.bound_value

    def test_input_shape(self):
        """Test an input of the wrong width raises DimensionError."""
        with pytest.raises(DimensionError):
            check_theorem1(BoundConfig(width=4, trials=10), x=np.ones(3))


@pytest.mark.slow
class TestSuite:
    """Tests for run_bound_suite and exact_violation_count."""

    def run_small(self, cfg, **kwargs):
        return run_bound_suite(
            cfg, taus=[1.0, 2.0], fuzz_pairs=100, variance_trials=20_000, theorem_trials=300, **kwargs
        )

    def test_all_checks_hold(self, small_bound_config):
        """Test the clean suite reports no violations."""
        reports = self.run_small(small_bound_config)
        assert len(reports) == 11
        assert reports[0].check == "avg_max_norm"
        assert reports[-1].check == "theorem1"
        assert exact_violation_count(reports) == 0
        assert all(r.holds for r in reports)

    def test_injected_violation_is_counted(self, small_bound_config):
        """Test flipping the comparison makes the exact gate fail."""
        reports = self.run_small(small_bound_config, inject_violation=True)
        assert exact_violation_count(reports) >= 1
        assert not reports[0].holds

    def test_deterministic(self, small_bound_config):
        """Test two runs give identical reports."""
        assert self.run_small(small_bound_config) == self.run_small(small_bound_config)


class TestBoundReport:
    """Tests for BoundReport."""

    def test_text_rendering(self):
        """Test the text form names the check and status."""
        text = check_avg_max_norm(EXAMPLE_1, EXAMPLE_2).to_text()
        assert text.startswith("avg_max_norm: HOLDS")
        assert "max_constituent=8" in text

    def test_rate_range(self):
        """Test violation rates outside [0, 1] are rejected."""
        with pytest.raises(ValueError):
            BoundReport(check="x", bound_value=0.0, empirical=0.0, violation_rate=1.5, holds=False)
