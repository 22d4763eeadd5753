"""Nested Monte Carlo split of the liability variance.

V[L] = E[V(L | surface)] + V[E(L | surface)]: the first term is the
mutualizable risk of individual lifetimes, the second the systematic risk of
not knowing the future mortality surface. omega is the systematic share.

Outer draws pick a mortality surface from a scenario generator; for each of
them M portfolio lifetimes are simulated on that surface.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .annuity_engine import (
    LiabilityKernel,
    Portfolio,
    ScenarioGenerator,
    check_coverage,
    cohort_cumulative,
    cohort_rates,
    replicate,
)
from .errors import ArgumentError, ConvergenceError, DegeneracyError
from .leecarter import LeeCarterModel
from .mortality_data import DEFAULT_TERMINAL_AGE, ClosedTable, ClosureMethod
from .projection import (
    DriftModel,
    SurfaceKind,
    project_surface,
    sample_drift_params,
)
from .random_streams import DRIFT, LIVES, PICK, SCENARIO, TREND, RandomStream

__all__ = [
    "ScenarioGenerator",
    "LeeCarterScenarios",
    "DiscreteScenarios",
    "DecompositionConfig",
    "DecompositionResult",
    "nested_simulate",
    "estimate_within",
    "estimate_between",
    "adjusted_between",
    "omega",
    "converge",
    "omega_curve",
]

logger = logging.getLogger(__name__)

DEFAULT_OUTER = 100
DEFAULT_INNER = 200
DEFAULT_THRESHOLD = 1e-3
DEFAULT_MAX_ROUNDS = 6
DEFAULT_SEED = 20061231

STOPPING_RULE = "|omega_r - omega_(r-1)| < threshold and |total_r - total_(r-1)| / total_(r-1) < threshold"
CURVE_COLUMNS = ["sigma_scale", "size_scale", "omega", "within", "between", "total", "rounds"]


@dataclass(frozen=True)
class LeeCarterScenarios:
    """
    Random closed tables from a fitted Lee-Carter model and its drift.

    Each draw projects the years from ``valuation_year`` far enough for the
    youngest model age to reach ``terminal_age``. Noise and the bias
    correction use sigma_gamma * sigma_scale.

    With ``drift_uncertainty`` the trend parameters (a, b) are drawn once per
    scenario stream, together with that scenario's noise, and not in an
    extra nesting level: one outer draw is one (a, b) pair and one noise path,
    so the between-surface variance includes the parameter risk.
    """

    model: LeeCarterModel
    drift: DriftModel
    valuation_year: int
    terminal_age: int = DEFAULT_TERMINAL_AGE
    corrected: bool = True
    sigma_scale: float = 1.0
    drift_uncertainty: bool = False
    closure_method: ClosureMethod = ClosureMethod.LOGISTIC_CAP

    def __post_init__(self) -> None:
        if self.sigma_scale < 0.0 or not np.isfinite(self.sigma_scale):
            raise ArgumentError(f"sigma_scale must be a non-negative number, got {self.sigma_scale}")
        if self.valuation_year < self.model.year_min:
            raise ArgumentError(
                f"Valuation year {self.valuation_year} precedes the fitted window {self.model.year_min}"
            )
        if self.terminal_age <= self.model.age_max:
            raise ArgumentError(
                f"Terminal age {self.terminal_age} must exceed the last model age {self.model.age_max}"
            )
        if self.drift_uncertainty:
            logger.info("Drift parameter uncertainty enabled (experimental)")

    @property
    def years(self) -> np.ndarray:
        span = self.terminal_age - self.model.age_min
        return np.arange(self.valuation_year, self.valuation_year + span + 1)

    @property
    def kind(self) -> SurfaceKind:
        return SurfaceKind.STOCHASTIC_CORRECTED if self.corrected else SurfaceKind.STOCHASTIC_RAW

    @property
    def is_degenerate(self) -> bool:
        no_noise = self.sigma_scale == 0.0 or self.drift.sigma_gamma == 0.0
        return no_noise and not (self.drift_uncertainty and np.any(self.drift.cov_ab))

    def scaled(self, factor: float) -> LeeCarterScenarios:
        return dataclasses.replace(self, sigma_scale=self.sigma_scale * factor)

    def deterministic_table(self) -> ClosedTable:
        """Trend table; the noiseless limit of every draw."""
        return project_surface(self.model, self.drift, self.years).closed(
            self.terminal_age, self.closure_method
        )

    def draw(self, stream: RandomStream) -> ClosedTable:
        params = sample_drift_params(self.drift, stream.substream(DRIFT)) if self.drift_uncertainty else None
        surface = project_surface(
            self.model,
            self.drift,
            self.years,
            stream=stream.substream(TREND),
            corrected=self.corrected,
            sigma_scale=self.sigma_scale,
            params=params,
        )
        return surface.closed(self.terminal_age, self.closure_method)


@dataclass(frozen=True)
class DiscreteScenarios:
    """Finite set of closed tables drawn with fixed probabilities."""

    tables: tuple[ClosedTable, ...]
    probabilities: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        tables = tuple(self.tables)
        if not tables:
            raise ArgumentError("At least one table is required")
        probabilities = self.probabilities or tuple([1.0 / len(tables)] * len(tables))
        p = np.asarray(probabilities, dtype=np.float64)
        if p.shape != (len(tables),) or np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise ArgumentError(f"Probabilities {probabilities} must be non-negative and sum to 1")
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "probabilities", tuple(float(v) for v in p))

    @property
    def kind(self) -> str:
        return "discrete"

    @property
    def is_degenerate(self) -> bool:
        return sum(1 for p in self.probabilities if p > 0.0) == 1

    def scaled(self, factor: float) -> DiscreteScenarios:
        if factor != 1.0:
            raise ArgumentError("A discrete scenario set has no volatility to rescale")
        return self

    def draw(self, stream: RandomStream) -> ClosedTable:
        u = stream.substream(PICK).uniforms(1)[0]
        index = int(np.searchsorted(np.cumsum(self.probabilities), u, side="right"))
        return self.tables[min(index, len(self.tables) - 1)]


@dataclass(frozen=True)
class DecompositionConfig:
    n_outer: int = DEFAULT_OUTER
    n_inner: int = DEFAULT_INNER
    sigma_scale: float = 1.0
    convergence_threshold: float = DEFAULT_THRESHOLD
    max_rounds: int = DEFAULT_MAX_ROUNDS
    seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_outer < 2 or self.n_inner < 2:
            raise ArgumentError(
                f"Nested simulation needs at least 2 outer and 2 inner draws, got "
                f"{self.n_outer} x {self.n_inner}"
            )
        if not self.convergence_threshold > 0.0:
            raise ArgumentError(f"Convergence threshold must be positive, got {self.convergence_threshold}")
        if self.max_rounds < 2:
            raise ArgumentError(f"max_rounds must be at least 2, got {self.max_rounds}")
        if self.sigma_scale < 0.0:
            raise ArgumentError(f"sigma_scale must be non-negative, got {self.sigma_scale}")
        if self.workers < 1:
            raise ArgumentError(f"workers must be at least 1, got {self.workers}")


@dataclass(frozen=True)
class DecompositionResult:
    """Variance components of the liability; ``between`` is the adjusted value used for omega."""

    within: float
    between: float
    between_raw: float
    total: float
    omega: float
    grand_mean: float
    grand_mean_se: float
    n_outer: int
    n_inner: int
    trace: list[dict[str, Any]] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "within": self.within,
            "between": self.between,
            "between_raw": self.between_raw,
            "total": self.total,
            "omega": self.omega,
            "grand_mean": self.grand_mean,
            "grand_mean_se": self.grand_mean_se,
            "n_outer": self.n_outer,
            "n_inner": self.n_inner,
            "converged": self.converged,
            "stopping_rule": STOPPING_RULE,
            "trace": self.trace,
        }


def estimate_within(lambda_matrix: np.ndarray) -> float:
    """
    Mean over outer draws of the unbiased within-row variance.

    Raises:
        ArgumentError: If there are fewer than 2 columns
    """
    matrix = _as_matrix(lambda_matrix)
    if matrix.shape[1] < 2:
        raise ArgumentError(f"Within variance needs at least 2 inner draws, got {matrix.shape[1]}")
    return float(matrix.var(axis=1, ddof=1).mean())


def estimate_between(lambda_matrix: np.ndarray) -> float:
    """
    Unbiased variance of the row means (raw, without the finite-M adjustment).

    Raises:
        ArgumentError: If there are fewer than 2 rows
    """
    matrix = _as_matrix(lambda_matrix)
    if matrix.shape[0] < 2:
        raise ArgumentError(f"Between variance needs at least 2 outer draws, got {matrix.shape[0]}")
    return float(matrix.mean(axis=1).var(ddof=1))


def adjusted_between(raw: float, within: float, n_inner: int) -> float:
    """Raw between statistic net of its within / M sampling noise, floored at 0."""
    if n_inner < 1:
        raise ArgumentError(f"n_inner must be positive, got {n_inner}")
    return max(0.0, raw - within / n_inner)


def omega(within: float, between: float) -> float:
    """
    Systematic share between / (within + between), clamped to [0, 1].

    Raises:
        DegeneracyError: If the total variance is zero
    """
    total = within + between
    if not total > 0.0:
        logger.warning("Zero total variance (within %r, between %r)", within, between)
        raise DegeneracyError("Total variance is zero; the systematic share is undefined")
    return min(1.0, max(0.0, between / total))


def nested_simulate(
    portfolio: Portfolio,
    scenarios: ScenarioGenerator,
    discount_rate: float,
    config: DecompositionConfig,
) -> DecompositionResult:
    """
    One nested experiment of ``config.n_outer`` surfaces by ``config.n_inner`` lives.

    Outer draw n uses stream ``(SCENARIO, n)`` for its surface and
    ``(SCENARIO, n, LIVES, block)`` for its inner lifetimes, so a larger
    experiment extends a smaller one with the same seed.

    Args:
        portfolio: annuitants in payment
        scenarios: surface generator, volatility multiplied by ``config.sigma_scale``
        discount_rate: annual rate i > -1
        config: sizes, seed and worker count

    Returns:
        DecompositionResult: single-round estimates

    Raises:
        CoverageError: If a drawn table misses some cohort diagonal
        DegeneracyError: If the total variance is zero
    """
    generator = scenarios.scaled(config.sigma_scale) if config.sigma_scale != 1.0 else scenarios
    root = RandomStream(config.seed)
    distinct, _ = portfolio.age_groups
    first_table = generator.draw(root.substream(SCENARIO, 0))
    check_coverage(portfolio, first_table)
    kernel = LiabilityKernel(portfolio, discount_rate, first_table.terminal_age - int(distinct.min()) + 1)
    n_inner = config.n_inner

    def outer(n: int) -> tuple[float, float]:
        scenario = root.substream(SCENARIO, n)
        table = generator.draw(scenario)
        cumulative = cohort_cumulative(cohort_rates(table, distinct, portfolio.valuation_year))
        parts = []
        for block, start in enumerate(range(0, n_inner, kernel.block)):
            rows = min(kernel.block, n_inner - start)
            u = scenario.substream(LIVES, block).uniforms((kernel.block, len(portfolio)))
            parts.append(kernel.liabilities(u[:rows], cumulative))
        row = np.concatenate(parts)
        return float(row.mean()), float(row.var(ddof=1))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            moments = list(pool.map(outer, range(config.n_outer)))
    else:
        moments = [outer(n) for n in range(config.n_outer)]

    means = np.array([m for m, _ in moments])
    variances = np.array([v for _, v in moments])
    within = float(variances.mean())
    between_raw = float(means.var(ddof=1))
    if generator.is_degenerate:
        between = 0.0
    else:
        between = adjusted_between(between_raw, within, n_inner)
    share = omega(within, between)
    result = DecompositionResult(
        within=within,
        between=between,
        between_raw=between_raw,
        total=within + between,
        omega=share,
        grand_mean=float(means.mean()),
        grand_mean_se=float(np.sqrt(between_raw / config.n_outer)),
        n_outer=config.n_outer,
        n_inner=n_inner,
    )
    logger.debug(
        "Nested run %d x %d: within %.6g, between %.6g (raw %.6g), omega %.6g",
        config.n_outer, n_inner, within, between, between_raw, share,
    )
    return result


def converge(
    portfolio: Portfolio,
    scenarios: ScenarioGenerator,
    discount_rate: float,
    config: DecompositionConfig,
) -> DecompositionResult:
    """
    Repeat :func:`nested_simulate`, doubling both sizes each round, until stable.

    Round r uses (n_outer * 2**r, n_inner * 2**r) and the draws of round r - 1
    are a prefix of those of round r. The run stops at the first round r >= 1
    where omega moves by less than the threshold and the total variance by
    less than the threshold in relative terms.

    Raises:
        ConvergenceError: If ``config.max_rounds`` rounds do not meet the rule;
            the error carries the per-round trace
    """
    trace: list[dict[str, Any]] = []
    previous: DecompositionResult | None = None
    for r in range(config.max_rounds):
        sized = dataclasses.replace(config, n_outer=config.n_outer * 2**r, n_inner=config.n_inner * 2**r)
        result = nested_simulate(portfolio, scenarios, discount_rate, sized)
        entry: dict[str, Any] = {
            "round": r,
            "n_outer": sized.n_outer,
            "n_inner": sized.n_inner,
            "within": result.within,
            "between": result.between,
            "between_raw": result.between_raw,
            "total": result.total,
            "omega": result.omega,
            "grand_mean": result.grand_mean,
            "delta_omega": None,
            "relative_delta_total": None,
        }
        done = False
        if previous is not None:
            delta_omega = abs(result.omega - previous.omega)
            delta_total = abs(result.total - previous.total) / previous.total
            entry["delta_omega"] = delta_omega
            entry["relative_delta_total"] = delta_total
            done = delta_omega < config.convergence_threshold and delta_total < config.convergence_threshold
        trace.append(entry)
        logger.info(
            "Round %d (%d x %d): omega %.6g, total variance %.6g",
            r, sized.n_outer, sized.n_inner, result.omega, result.total,
        )
        if done:
            return dataclasses.replace(result, trace=trace, converged=True)
        previous = result

    logger.warning("No convergence after %d rounds at threshold %g", config.max_rounds, config.convergence_threshold)
    raise ConvergenceError(
        f"Nested simulation did not stabilise within {config.max_rounds} rounds "
        f"(threshold {config.convergence_threshold})",
        trace,
    )


def omega_curve(
    portfolio: Portfolio,
    scenarios: ScenarioGenerator,
    discount_rate: float,
    config: DecompositionConfig,
    sigma_scales: Sequence[float],
    size_scales: Sequence[int],
    first: DecompositionResult | None = None,
) -> pd.DataFrame:
    """
    Converged omega for every (sigma_scale, size_scale) pair.

    The portfolio is replicated ``size_scale`` times; ``config.sigma_scale`` is
    replaced by each entry of ``sigma_scales``. ``first``, when given, is the
    converged result of the leading pair and is not recomputed.

    Returns:
        pd.DataFrame: columns sigma_scale, size_scale, omega, within, between,
        total, rounds; sizes vary slowest
    """
    if not sigma_scales or not size_scales:
        raise ArgumentError("omega_curve needs at least one sigma scale and one size scale")
    rows = []
    for size in size_scales:
        grown = replicate(portfolio, int(size))
        for sigma in sigma_scales:
            if first is not None and not rows:
                result = first
            else:
                sized = dataclasses.replace(config, sigma_scale=float(sigma))
                result = converge(grown, scenarios, discount_rate, sized)
            rows.append(
                {
                    "sigma_scale": float(sigma),
                    "size_scale": int(size),
                    "omega": result.omega,
                    "within": result.within,
                    "between": result.between,
                    "total": result.total,
                    "rounds": len(result.trace),
                }
            )
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def _as_matrix(lambda_matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(lambda_matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ArgumentError(f"Expected a non-empty N x M matrix, got shape {matrix.shape}")
    return matrix
