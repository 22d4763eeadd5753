"""Unit tests for the nested Monte Carlo variance decomposition."""

import itertools
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from longevity_risk.annuity_engine import Annuitant, Portfolio, simulate_lambda
from longevity_risk.errors import ArgumentError, ConvergenceError, DegeneracyError
from longevity_risk.random_streams import SCENARIO, RandomStream
from longevity_risk.risk_decomposition import (
    CURVE_COLUMNS,
    DecompositionConfig,
    DecompositionResult,
    DiscreteScenarios,
    LeeCarterScenarios,
    adjusted_between,
    converge,
    estimate_between,
    estimate_within,
    nested_simulate,
    omega,
    omega_curve,
)

from .synthetic import VALUATION_YEAR, synthetic_portfolio, toy_tables

# one life paid a unit rent iff it survives year 0; surfaces q = 0.2 or 0.4
TOY_WITHIN = 0.5 * 0.16 + 0.5 * 0.24
TOY_BETWEEN = 0.25 * (0.8 - 0.6) ** 2
TOY_OMEGA = TOY_BETWEEN / (TOY_WITHIN + TOY_BETWEEN)


@pytest.fixture
def toy():
    portfolio = Portfolio((Annuitant("solo", 60, 1.0),), VALUATION_YEAR)
    return portfolio, DiscreteScenarios(tuple(toy_tables((0.2, 0.4))))


def micro_expectations(n_outer=3, n_inner=3, alive=(0.8, 0.6)):
    """Exact expectations of the within, raw and adjusted between statistics."""
    expected = np.zeros(3)
    for picks in itertools.product(range(len(alive)), repeat=n_outer):
        p = np.repeat([alive[i] for i in picks], n_inner)
        for outcome in itertools.product((0.0, 1.0), repeat=n_outer * n_inner):
            cells = np.array(outcome)
            weight = np.prod(np.where(cells == 1.0, p, 1.0 - p)) / len(alive) ** n_outer
            matrix = cells.reshape(n_outer, n_inner)
            within = matrix.var(axis=1, ddof=1).mean()
            raw = matrix.mean(axis=1).var(ddof=1)
            expected += weight * np.array([within, raw, max(0.0, raw - within / n_inner)])
    return expected


class TestEstimators:
    """Test cases for the within and between statistics."""

    def test_constant_rows(self):
        """Test that constant rows have no within variance."""
        matrix = np.repeat([[1.0], [3.0], [7.0]], 5, axis=1)
        assert estimate_within(matrix) == 0.0
        assert estimate_between(matrix) == pytest.approx(np.var([1.0, 3.0, 7.0], ddof=1))

    def test_hand_examples(self):
        """Test the (0, 2) row and the (0, 2) row means."""
        assert estimate_within(np.array([[0.0, 2.0]])) == 2.0
        assert estimate_between(np.array([[0.0, 0.0], [2.0, 2.0]])) == 2.0
        assert estimate_between(np.ones((4, 3))) == 0.0

    def test_standard_normal_matrix(self):
        """Test the within estimate on i.i.d. N(0, 1) draws."""
        matrix = RandomStream(77).normals((200, 200))
        assert 0.86 <= estimate_within(matrix) <= 1.14

    def test_too_few_draws(self):
        """Test that single rows or columns are rejected."""
        with pytest.raises(ArgumentError):
            estimate_within(np.ones((3, 1)))
        with pytest.raises(ArgumentError):
            estimate_between(np.ones((1, 3)))

    def test_adjusted_between(self):
        """Test the finite-inner-size correction and its floor."""
        assert adjusted_between(0.05, 0.2, 10) == pytest.approx(0.03)
        assert adjusted_between(0.01, 0.2, 10) == 0.0


class TestOmega:
    """Test cases for the systematic share."""

    @pytest.mark.parametrize("within, between, expected", [(1.0, 0.0, 0.0), (0.0, 1.0, 1.0), (3.0, 1.0, 0.25)])
    def test_values(self, within, between, expected):
        """Test omega = between / (within + between)."""
        assert omega(within, between) == expected

    def test_zero_total(self):
        """Test that zero total variance is degenerate."""
        with pytest.raises(DegeneracyError):
            omega(0.0, 0.0)


class TestNestedSimulate:
    """Test cases for one nested experiment."""

    def test_toy_model(self, toy):
        """Test the estimates against the exact law of total variance."""
        portfolio, scenarios = toy
        result = nested_simulate(portfolio, scenarios, 0.0, DecompositionConfig(n_outer=2000, n_inner=2000, seed=1))
        assert result.within == pytest.approx(TOY_WITHIN, abs=0.005)
        assert result.between == pytest.approx(TOY_BETWEEN, abs=1e-3)
        assert result.omega == pytest.approx(TOY_OMEGA, abs=0.002)
        assert result.total == pytest.approx(0.7 * 0.3, abs=0.006)
        assert result.grand_mean == pytest.approx(0.7, abs=4.0 * result.grand_mean_se + 1e-3)
        assert result.between_raw >= result.between

    def test_degenerate_generator(self, lc_model, drift, small_portfolio):
        """Test that a noiseless generator has no systematic share."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        config = DecompositionConfig(n_outer=20, n_inner=500, sigma_scale=0.0, seed=3)
        result = nested_simulate(small_portfolio, scenarios, 0.025, config)
        assert result.between == 0.0
        assert result.omega == 0.0
        plain = simulate_lambda(
            small_portfolio, scenarios.deterministic_table(), 0.025, 20000, RandomStream(4)
        )
        assert result.within == pytest.approx(plain.summary.sd**2, rel=0.1)

    def test_single_table_set_is_degenerate(self, toy):
        """Test that one table drawn with certainty forces between to zero."""
        portfolio, _ = toy
        scenarios = DiscreteScenarios(tuple(toy_tables((0.2, 0.4))), (1.0, 0.0))
        result = nested_simulate(portfolio, scenarios, 0.0, DecompositionConfig(n_outer=50, n_inner=50, seed=2))
        assert result.between == 0.0
        assert result.within == pytest.approx(0.16, abs=0.03)

    @pytest.mark.parametrize("workers", [4, 8])
    def test_thread_count_irrelevant(self, lc_model, drift, small_portfolio, workers):
        """Test identical results with one and several workers."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        single = nested_simulate(small_portfolio, scenarios, 0.025, DecompositionConfig(n_outer=12, n_inner=40, seed=5))
        config = DecompositionConfig(n_outer=12, n_inner=40, seed=5, workers=workers)
        assert nested_simulate(small_portfolio, scenarios, 0.025, config) == single

    def test_toy_model_thread_counts(self, toy):
        """Test that the toy decomposition serializes identically at 1, 4 and 8 workers."""
        portfolio, scenarios = toy
        documents = [
            json.dumps(
                nested_simulate(
                    portfolio, scenarios, 0.0, DecompositionConfig(n_outer=64, n_inner=64, seed=8, workers=w)
                ).to_dict(),
                sort_keys=True,
            )
            for w in (1, 4, 8)
        ]
        assert documents[0] == documents[1] == documents[2]

    def test_discrete_set_cannot_be_stressed(self, toy):
        """Test that a volatility scale other than one is refused for fixed tables."""
        portfolio, scenarios = toy
        with pytest.raises(ArgumentError):
            nested_simulate(portfolio, scenarios, 0.0, DecompositionConfig(n_outer=4, n_inner=4, sigma_scale=2.0))

    @pytest.mark.parametrize(
        "kwargs",
        [{"n_outer": 1}, {"n_inner": 1}, {"convergence_threshold": 0.0}, {"max_rounds": 1}, {"workers": 0}],
    )
    def test_config_validation(self, kwargs):
        """Test rejected experiment settings."""
        with pytest.raises(ArgumentError):
            DecompositionConfig(**kwargs)

    @pytest.mark.slow
    def test_estimator_expectations(self, toy):
        """Test the mean of many 3 x 3 experiments against exact enumeration."""
        portfolio, scenarios = toy
        exact = micro_expectations()
        stats = []
        for seed in range(5000):
            try:
                result = nested_simulate(portfolio, scenarios, 0.0, DecompositionConfig(n_outer=3, n_inner=3, seed=seed))
                stats.append((result.within, result.between_raw, result.between))
            except DegeneracyError:
                # all nine liabilities equal: every statistic is zero
                stats.append((0.0, 0.0, 0.0))
        stats = np.array(stats)
        se = stats.std(axis=0, ddof=1) / np.sqrt(stats.shape[0])
        assert exact[0] == pytest.approx(TOY_WITHIN)
        assert exact[1] == pytest.approx(TOY_BETWEEN + TOY_WITHIN / 3)
        assert np.all(np.abs(stats.mean(axis=0) - exact) < 3.0 * se)


class TestConverge:
    """Test cases for the doubling schedule and stopping rule."""

    def test_vacuous_threshold(self, toy):
        """Test that a threshold of one stops after the minimum two rounds."""
        portfolio, scenarios = toy
        result = converge(portfolio, scenarios, 0.0, DecompositionConfig(n_outer=50, n_inner=50, convergence_threshold=1.0, seed=6))
        assert result.converged
        assert [entry["n_outer"] for entry in result.trace] == [50, 100]
        assert result.trace[0]["delta_omega"] is None
        assert (result.n_outer, result.n_inner) == (100, 100)

    def test_zero_volatility(self, lc_model, drift, small_portfolio):
        """Test that a noiseless generator converges in two rounds with omega pinned at 0."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        config = DecompositionConfig(n_outer=50, n_inner=100, sigma_scale=0.0, convergence_threshold=0.1, seed=7)
        result = converge(small_portfolio, scenarios, 0.025, config)
        assert len(result.trace) == 2
        assert all(entry["omega"] == 0.0 for entry in result.trace)

    def test_toy_converges_to_exact_share(self, toy):
        """Test the converged omega against the enumerated value."""
        portfolio, scenarios = toy
        config = DecompositionConfig(n_outer=400, n_inner=100, convergence_threshold=0.03, max_rounds=5, seed=8)
        result = converge(portfolio, scenarios, 0.0, config)
        assert result.converged
        assert abs(result.omega - TOY_OMEGA) < 2 * 0.03

    def test_failure_carries_trace(self, toy):
        """Test that an unreachable threshold raises with every round recorded."""
        portfolio, scenarios = toy
        config = DecompositionConfig(n_outer=10, n_inner=10, convergence_threshold=1e-12, max_rounds=2, seed=9)
        with pytest.raises(ConvergenceError) as exc_info:
            converge(portfolio, scenarios, 0.0, config)
        trace = exc_info.value.trace
        assert [entry["round"] for entry in trace] == [0, 1]
        assert trace[1]["relative_delta_total"] is not None


class TestOmegaCurve:
    """Test cases for the volatility and size sweep."""

    def test_shape(self, lc_model, drift, small_portfolio):
        """Test one row per (size, sigma) pair, sizes varying slowest."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        config = DecompositionConfig(n_outer=10, n_inner=10, convergence_threshold=1.0, seed=10)
        curve = omega_curve(small_portfolio, scenarios, 0.025, config, sigma_scales=(0.0, 1.0), size_scales=(1, 2))
        assert list(curve.columns) == CURVE_COLUMNS
        assert list(curve["size_scale"]) == [1, 1, 2, 2]
        assert list(curve["sigma_scale"]) == [0.0, 1.0, 0.0, 1.0]
        assert list(curve.loc[curve["sigma_scale"] == 0.0, "omega"]) == [0.0, 0.0]
        assert curve["omega"].between(0.0, 1.0).all()
        assert (curve["rounds"] == 2).all()

    def test_first_result_reused(self, lc_model, drift, small_portfolio):
        """Test that a supplied leading result fills the first row without recomputation."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        config = DecompositionConfig(n_outer=10, n_inner=10, convergence_threshold=1.0, seed=10)
        first = DecompositionResult(
            within=1.0, between=0.5, between_raw=0.6, total=1.5, omega=0.123,
            grand_mean=0.0, grand_mean_se=0.0, n_outer=2, n_inner=2, trace=[{}], converged=True,
        )
        curve = omega_curve(
            small_portfolio, scenarios, 0.025, config, sigma_scales=(1.0, 0.0), size_scales=(1,), first=first
        )
        assert curve.loc[0, "omega"] == 0.123
        assert curve.loc[0, "total"] == 1.5
        assert curve.loc[0, "rounds"] == 1
        assert curve.loc[1, "omega"] == 0.0
        assert curve.loc[1, "rounds"] == 2

    def test_empty_grid(self, lc_model, drift, small_portfolio):
        """Test that an empty sweep is rejected."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        with pytest.raises(ArgumentError):
            omega_curve(small_portfolio, scenarios, 0.025, DecompositionConfig(), sigma_scales=(), size_scales=(1,))

    @pytest.mark.slow
    def test_monotone_in_volatility_and_size(self, lc_model, drift):
        """Test that omega grows with the volatility scale and the portfolio size."""
        portfolio = synthetic_portfolio(n=100, seed=5)
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR)
        config = DecompositionConfig(n_outer=50, n_inner=50, convergence_threshold=1.0, seed=11)
        curve = omega_curve(portfolio, scenarios, 0.025, config, sigma_scales=(1.0, 10.0), size_scales=(1, 20))
        grid = curve.set_index(["size_scale", "sigma_scale"])["omega"]
        assert grid[(1, 1.0)] < grid[(1, 10.0)]
        assert grid[(20, 1.0)] < grid[(20, 10.0)]
        assert grid[(1, 1.0)] < grid[(20, 1.0)]
        assert grid[(1, 10.0)] < grid[(20, 10.0)]


class TestLeeCarterScenarios:
    """Test cases for the Lee-Carter surface generator."""

    def test_drift_parameters_drawn_per_scenario(self, lc_model, drift):
        """Test that drift uncertainty varies the table across scenario streams only."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR, sigma_scale=0.0, drift_uncertainty=True)
        root = RandomStream(21)
        first = scenarios.draw(root.substream(SCENARIO, 0))
        again = scenarios.draw(root.substream(SCENARIO, 0))
        second = scenarios.draw(root.substream(SCENARIO, 1))
        assert not scenarios.is_degenerate
        assert np.array_equal(first.q, again.q)
        assert not np.array_equal(first.q, second.q)
        assert not np.array_equal(first.q, scenarios.deterministic_table().q)

    def test_without_drift_uncertainty_zero_scale_is_degenerate(self, lc_model, drift):
        """Test that a zero volatility scale makes every draw the trend table."""
        scenarios = LeeCarterScenarios(lc_model, drift, VALUATION_YEAR, sigma_scale=0.0)
        table = scenarios.draw(RandomStream(21).substream(SCENARIO, 3))
        assert scenarios.is_degenerate
        assert np.array_equal(table.q, scenarios.deterministic_table().q)
