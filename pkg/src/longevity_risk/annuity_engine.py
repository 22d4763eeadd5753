"""Annuity portfolio valuation and simulation of the discounted liability.

Rents are paid annually in arrears while the annuitant is alive. An annuitant
aged x at the valuation year y is exposed to q(x + s, y + s) in projection year
s (the cohort diagonal of the Lexis grid). Death times are drawn by inverting
the cumulative death-time distribution with one uniform per life, and each
life contributes r * a(T) with a(T) the closed-form annuity-immediate factor.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
import pandas as pd

from .errors import ArgumentError, CoverageError, StructuralError
from .mortality_data import DEFAULT_TERMINAL_AGE, ClosedTable
from .projection import ProjectedSurface
from .random_streams import LIVES, SCENARIO, RandomStream

logger = logging.getLogger(__name__)

# realizations per block shrink with portfolio size to bound memory
BLOCK_CELLS = 2**18
MAX_BLOCK = 1024
QUANTILE_METHOD = "linear"


@dataclass(frozen=True)
class Annuitant:
    id: str
    age: int
    rent: float

    def __post_init__(self) -> None:
        if not self.rent > 0.0 or not np.isfinite(self.rent):
            raise ArgumentError(f"Annuitant {self.id}: rent must be positive, got {self.rent}")
        if self.age < 0:
            raise ArgumentError(f"Annuitant {self.id}: age must be non-negative, got {self.age}")


@dataclass(frozen=True)
class Portfolio:
    """Annuitants in payment at the valuation date."""

    annuitants: tuple[Annuitant, ...]
    valuation_year: int

    def __post_init__(self) -> None:
        if not self.annuitants:
            raise ArgumentError("Portfolio has no annuitants")
        ids = [a.id for a in self.annuitants]
        if len(set(ids)) != len(ids):
            duplicates = sorted({i for i in ids if ids.count(i) > 1})
            raise StructuralError(f"Duplicate annuitant ids: {duplicates[:20]}")
        object.__setattr__(self, "annuitants", tuple(self.annuitants))

    def __len__(self) -> int:
        return len(self.annuitants)

    @cached_property
    def ids(self) -> list[str]:
        return [a.id for a in self.annuitants]

    @cached_property
    def ages(self) -> np.ndarray:
        return np.array([a.age for a in self.annuitants], dtype=np.int64)

    @cached_property
    def rents(self) -> np.ndarray:
        return np.array([a.rent for a in self.annuitants], dtype=np.float64)

    @cached_property
    def age_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct ages and, per annuitant, the index of its age."""
        distinct, index = np.unique(self.ages, return_inverse=True)
        return distinct, index.ravel()


@dataclass(frozen=True)
class SurvivalSchedule:
    """Law of the curtate death year T: P(T = i) = q_i prod_{j<i} (1 - q_j)."""

    age: int
    probabilities: np.ndarray = field(repr=False)
    cumulative: np.ndarray = field(repr=False)

    @classmethod
    def from_rates(cls, rates: Sequence[float] | np.ndarray, age: int = 0) -> SurvivalSchedule:
        q = np.asarray(rates, dtype=np.float64)
        if q.ndim != 1 or q.size == 0:
            raise ArgumentError("A schedule needs a non-empty sequence of death probabilities")
        if not np.all((q >= 0.0) & (q <= 1.0)):
            raise ArgumentError("Death probabilities must lie in [0, 1]")
        if q[-1] != 1.0:
            raise ArgumentError("The last death probability must be 1 (closed table)")
        survival = np.cumprod(1.0 - q)
        before = np.concatenate([[1.0], survival[:-1]])
        probabilities = q * before
        cumulative = 1.0 - survival
        probabilities.setflags(write=False)
        cumulative.setflags(write=False)
        return cls(age, probabilities, cumulative)

    @property
    def survival(self) -> np.ndarray:
        """P(T >= t) for t = 1, 2, ...: probability of receiving payment t."""
        return 1.0 - self.cumulative


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    sd: float
    cv: float
    q05: float
    q25: float
    q75: float
    q95: float
    relative_precision: float

    @property
    def var75(self) -> float:
        return self.q75

    def to_dict(self) -> dict[str, float | int]:
        return {
            "n": self.n,
            "mean": self.mean,
            "sd": self.sd,
            "cv": self.cv,
            "q05": self.q05,
            "q25": self.q25,
            "q75": self.q75,
            "q95": self.q95,
            "relative_precision": self.relative_precision,
            "quantile_method": QUANTILE_METHOD,
        }


@dataclass(frozen=True)
class LiabilityDistribution:
    """Simulated realizations of the discounted liability."""

    samples: np.ndarray = field(repr=False)
    seed: int
    discount_rate: float
    surface_kind: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @cached_property
    def summary(self) -> Summary:
        return summarize(self.samples)


class ScenarioGenerator(Protocol):
    """Source of random closed mortality tables, one per scenario stream."""

    @property
    def kind(self) -> Any:
        ...

    @property
    def is_degenerate(self) -> bool:
        """True when every draw returns the same table."""
        ...

    def scaled(self, factor: float) -> ScenarioGenerator:
        """Generator with its volatility multiplied by ``factor``."""
        ...

    def draw(self, stream: RandomStream) -> ClosedTable:
        ...


def load_portfolio_csv(path: str | Path, valuation_year: int) -> Portfolio:
    """
    Read a portfolio from an ``id,age,rent`` CSV file.

    Fractional ages are rounded to the nearest integer with a warning.

    Raises:
        ArgumentError: If the file is missing or unreadable
        StructuralError: On missing columns, empty fields or duplicate ids
    """
    path = Path(path)
    if not path.is_file():
        logger.warning("Portfolio file not found: %s", path)
        raise ArgumentError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, comment="#", dtype={"id": str}, encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise ArgumentError(f"Cannot read portfolio file {path}: {e}")
    missing = [c for c in ("id", "age", "rent") if c not in frame.columns]
    if missing:
        raise StructuralError(f"{path}: missing columns {missing}")
    if frame[["id", "age", "rent"]].isna().any().any():
        raise StructuralError(f"{path}: empty fields in portfolio rows")
    ages = frame["age"].to_numpy(dtype=np.float64)
    rounded = np.rint(ages)
    fractional = ages != rounded
    if fractional.any():
        logger.warning(
            "%d fractional ages in %s rounded to the nearest integer", int(fractional.sum()), path
        )
    annuitants = tuple(
        Annuitant(str(i), int(a), float(r))
        for i, a, r in zip(frame["id"], rounded, frame["rent"].to_numpy(dtype=np.float64))
    )
    return Portfolio(annuitants, int(valuation_year))


def replicate(portfolio: Portfolio, times: int) -> Portfolio:
    """Portfolio repeated ``times`` times; copies get ids ``<id>#<copy>``."""
    if times < 1:
        raise ArgumentError(f"Replication factor must be at least 1, got {times}")
    if times == 1:
        return portfolio
    annuitants = tuple(
        Annuitant(f"{a.id}#{copy}", a.age, a.rent)
        for copy in range(times)
        for a in portfolio.annuitants
    )
    return Portfolio(annuitants, portfolio.valuation_year)


def as_closed_table(
    table: ClosedTable | ProjectedSurface, terminal_age: int = DEFAULT_TERMINAL_AGE
) -> ClosedTable:
    if isinstance(table, ProjectedSurface):
        return table.closed(terminal_age)
    return table


def cohort_rates(table: ClosedTable, ages: np.ndarray, valuation_year: int) -> np.ndarray:
    """
    Death probabilities along each age's cohort diagonal.

    Row g holds q(ages[g] + s, valuation_year + s) for s = 0, 1, ... and is
    padded with 1 beyond the terminal age, so every row has the same length.
    """
    ages = np.asarray(ages, dtype=np.int64)
    length = table.terminal_age - int(ages.min()) + 1
    steps = np.arange(length)
    age_index = (ages - table.age_min)[:, None] + steps[None, :]
    year_index = (valuation_year - table.year_min) + steps
    last_age = table.q.shape[0] - 1
    last_year = table.q.shape[1] - 1
    rates = table.q[np.minimum(age_index, last_age), np.minimum(year_index, last_year)[None, :]]
    rates[age_index > last_age] = 1.0
    return rates


def cohort_cumulative(rates: np.ndarray) -> np.ndarray:
    """P(T <= i) from cohort death probabilities (last axis)."""
    return 1.0 - np.cumprod(1.0 - rates, axis=-1)


def check_coverage(portfolio: Portfolio, table: ClosedTable) -> None:
    """
    Raise CoverageError unless the table covers every cohort diagonal.

    Each annuitant needs ages from x to the terminal age and years from the
    valuation year to valuation year + (terminal age - x).
    """
    ages = portfolio.ages
    age_bad = (ages < table.age_min) | (ages > table.terminal_age)
    last_year_needed = portfolio.valuation_year + (table.terminal_age - ages)
    year_bad = (portfolio.valuation_year < table.year_min) | (last_year_needed > table.year_max)
    bad = age_bad | year_bad
    if bad.any():
        ids = [portfolio.ids[i] for i in np.nonzero(bad)[0]]
        logger.warning("Table does not cover %d annuitants: %s", len(ids), ids[:20])
        raise CoverageError(
            f"Table (ages {table.age_min}-{table.terminal_age}, years "
            f"{table.year_min}-{table.year_max}) does not cover the cohort diagonals of "
            f"annuitants {ids[:20]}{' ...' if len(ids) > 20 else ''} from valuation year "
            f"{portfolio.valuation_year}",
            ids,
        )


def build_schedule(
    annuitant: Annuitant,
    table: ClosedTable | ProjectedSurface,
    valuation_year: int | None = None,
    terminal_age: int = DEFAULT_TERMINAL_AGE,
) -> SurvivalSchedule:
    """
    Death-time law of one annuitant read along the cohort diagonal.

    Raises:
        CoverageError: If the table misses part of the diagonal
    """
    closed = as_closed_table(table, terminal_age)
    year = closed.year_min if valuation_year is None else valuation_year
    check_coverage(Portfolio((annuitant,), year), closed)
    rates = cohort_rates(closed, np.array([annuitant.age]), year)[0]
    return SurvivalSchedule.from_rates(rates[: closed.terminal_age - annuitant.age + 1], annuitant.age)


def sample_death_time(schedule: SurvivalSchedule, u: float) -> int:
    """Smallest j with P(T <= j) > u."""
    return int(np.searchsorted(schedule.cumulative, u, side="right"))


def expected_flows(
    portfolio: Portfolio,
    table: ClosedTable | ProjectedSurface,
    terminal_age: int = DEFAULT_TERMINAL_AGE,
) -> np.ndarray:
    """
    Expected payments F_t = sum_j r_j l(x_j + t) / l(x_j) for t = 1, 2, ...

    Returns:
        np.ndarray: F_t at index t - 1, up to the last year with a payment

    Raises:
        CoverageError: If some annuitant's diagonal is not covered
    """
    closed = as_closed_table(table, terminal_age)
    check_coverage(portfolio, closed)
    distinct, index = portfolio.age_groups
    survival = 1.0 - cohort_cumulative(cohort_rates(closed, distinct, portfolio.valuation_year))
    weights = np.bincount(index, weights=portfolio.rents, minlength=distinct.size)
    flows = weights @ survival
    # survival to the end of the last row is zero: trailing zero payment dropped
    return flows[:-1] if flows.size > 1 else flows[:0]


def reserve(flows: Sequence[float] | np.ndarray, discount_rate: float) -> float:
    """
    Present value sum_t F_t (1 + i)^-t of flows paid at t = 1, 2, ...

    Raises:
        ArgumentError: If discount_rate <= -1 or flows are not finite
    """
    _check_rate(discount_rate)
    flows = np.asarray(flows, dtype=np.float64)
    if not np.all(np.isfinite(flows)):
        raise ArgumentError("Flows must be finite")
    t = np.arange(1, flows.size + 1, dtype=np.float64)
    return float(np.sum(flows * np.power(1.0 + discount_rate, -t)))


def annuity_factors(length: int, discount_rate: float) -> np.ndarray:
    """a(T) = sum_{t=1..T} (1 + i)^-t for T = 0 .. length, in closed form."""
    _check_rate(discount_rate)
    n = np.arange(length + 1, dtype=np.float64)
    if discount_rate == 0.0:
        return n
    return -np.expm1(-n * np.log1p(discount_rate)) / discount_rate


def simulate_lambda(
    portfolio: Portfolio,
    table: ClosedTable | ProjectedSurface,
    discount_rate: float,
    n_sims: int,
    stream: RandomStream,
    terminal_age: int = DEFAULT_TERMINAL_AGE,
    workers: int = 1,
) -> LiabilityDistribution:
    """
    Realizations of the liability under one known mortality table.

    Args:
        portfolio: annuitants in payment
        table: closed table (or projected surface, closed at ``terminal_age``)
        discount_rate: annual rate i > -1
        n_sims: number of realizations N >= 1
        stream: root stream; realization block b draws from ``(LIVES, b)``
        workers: threads over realization blocks; does not affect results

    Returns:
        LiabilityDistribution: N samples of sum_j r_j a(T_j)

    Raises:
        CoverageError: If the table does not cover the portfolio
    """
    if n_sims < 1:
        raise ArgumentError(f"Number of simulations must be at least 1, got {n_sims}")
    closed = as_closed_table(table, terminal_age)
    check_coverage(portfolio, closed)
    distinct, _ = portfolio.age_groups
    cumulative = cohort_cumulative(cohort_rates(closed, distinct, portfolio.valuation_year))
    kernel = LiabilityKernel(portfolio, discount_rate, cumulative.shape[-1])

    def run(block: int, rows: slice) -> np.ndarray:
        u = stream.substream(LIVES, block).uniforms((kernel.block, len(portfolio)))
        return kernel.liabilities(u[: rows.stop - rows.start], cumulative)

    samples = _map_blocks(run, n_sims, kernel.block, workers)
    kind = table.kind.value if isinstance(table, ProjectedSurface) else "table"
    logger.debug("Simulated %d liabilities for %d annuitants", n_sims, len(portfolio))
    return LiabilityDistribution(
        samples, stream.seed, discount_rate, kind, {"n_annuitants": len(portfolio)}
    )


def simulate_lambda_stochastic(
    portfolio: Portfolio,
    scenarios: ScenarioGenerator,
    discount_rate: float,
    n_sims: int,
    stream: RandomStream,
    workers: int = 1,
) -> LiabilityDistribution:
    """
    Realizations with a fresh mortality table per realization.

    Realization n takes its table from ``(SCENARIO, n)`` and its lives from the
    same ``(LIVES, block)`` draws as :func:`simulate_lambda`, so a generator
    without noise reproduces the single-table samples bit for bit.
    """
    if n_sims < 1:
        raise ArgumentError(f"Number of simulations must be at least 1, got {n_sims}")
    distinct, _ = portfolio.age_groups
    first_table = scenarios.draw(stream.substream(SCENARIO, 0))
    check_coverage(portfolio, first_table)
    length = first_table.terminal_age - int(distinct.min()) + 1
    kernel = LiabilityKernel(portfolio, discount_rate, length)

    def run(block: int, rows: slice) -> np.ndarray:
        u = stream.substream(LIVES, block).uniforms((kernel.block, len(portfolio)))
        cumulative = np.stack(
            [
                cohort_cumulative(
                    cohort_rates(
                        scenarios.draw(stream.substream(SCENARIO, n)), distinct, portfolio.valuation_year
                    )
                )
                for n in range(rows.start, rows.stop)
            ]
        )
        return kernel.liabilities(u[: rows.stop - rows.start], cumulative)

    samples = _map_blocks(run, n_sims, kernel.block, workers)
    kind = scenarios.kind
    return LiabilityDistribution(
        samples,
        stream.seed,
        discount_rate,
        str(getattr(kind, "value", kind)),
        {"n_annuitants": len(portfolio)},
    )


def summarize(dist: LiabilityDistribution | Sequence[float] | np.ndarray) -> Summary:
    """
    Mean, sd (N - 1 denominator), cv = sd / mean and empirical quantiles.

    Quantiles interpolate linearly between order statistics.

    Raises:
        ArgumentError: If fewer than 2 samples
    """
    samples = dist.samples if isinstance(dist, LiabilityDistribution) else np.asarray(dist, dtype=np.float64)
    n = int(samples.size)
    if n < 2:
        raise ArgumentError(f"Summary statistics need at least 2 samples, got {n}")
    mean = float(samples.mean())
    sd = float(samples.std(ddof=1))
    q05, q25, q75, q95 = (float(v) for v in np.quantile(samples, [0.05, 0.25, 0.75, 0.95], method=QUANTILE_METHOD))
    cv = sd / mean if mean != 0.0 else float("nan")
    precision = (q95 - q05) / (2.0 * mean) if mean != 0.0 else float("nan")
    return Summary(n, mean, sd, cv, q05, q25, q75, q95, precision)


def histogram(
    dist: LiabilityDistribution | np.ndarray, bins: int | str = "fd"
) -> tuple[np.ndarray, np.ndarray]:
    """Bin edges and counts; Freedman-Diaconis width unless ``bins`` says otherwise."""
    samples = dist.samples if isinstance(dist, LiabilityDistribution) else np.asarray(dist)
    counts, edges = np.histogram(samples, bins=bins)
    return edges, counts


def block_size(n_annuitants: int) -> int:
    return max(1, min(MAX_BLOCK, BLOCK_CELLS // max(1, n_annuitants)))


class LiabilityKernel:
    """Inversion sampling and discounting shared by every engine."""

    def __init__(self, portfolio: Portfolio, discount_rate: float, length: int) -> None:
        self.rents = portfolio.rents
        distinct, groups = portfolio.age_groups
        self.members = [np.nonzero(groups == g)[0] for g in range(distinct.size)]
        self.factors = annuity_factors(length, discount_rate)
        self.block = block_size(len(portfolio))

    def death_times(self, u: np.ndarray, cumulative: np.ndarray) -> np.ndarray:
        """T[n, j] from uniforms u[n, j] and cumulative laws per age group.

        ``cumulative`` is (groups, L) for one shared table or
        (rows, groups, L) for one table per row.
        """
        times = np.empty(u.shape, dtype=np.int64)
        for g, cols in enumerate(self.members):
            if cumulative.ndim == 2:
                times[:, cols] = np.searchsorted(cumulative[g], u[:, cols], side="right")
            else:
                # count of cumulative values <= u, the per-row form of searchsorted
                times[:, cols] = (cumulative[:, g, None, :] <= u[:, cols, None]).sum(axis=-1)
        return times

    def liabilities(self, u: np.ndarray, cumulative: np.ndarray) -> np.ndarray:
        return (self.factors[self.death_times(u, cumulative)] * self.rents).sum(axis=1)


def _map_blocks(run: Any, n_rows: int, block: int, workers: int) -> np.ndarray:
    spans = [(b, slice(start, min(n_rows, start + block))) for b, start in enumerate(range(0, n_rows, block))]
    if workers <= 1 or len(spans) == 1:
        parts: Iterable[np.ndarray] = [run(b, rows) for b, rows in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda span: run(*span), spans))
    return np.concatenate(list(parts))


def _check_rate(discount_rate: float) -> None:
    if not discount_rate > -1.0:
        logger.warning("Discount rate %r not above -1", discount_rate)
        raise ArgumentError(f"Discount rate must exceed -1, got {discount_rate}")
