"""Shared fixtures for the longevity-risk test suite."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from longevity_risk.mortality_data import write_grid_csv

from .synthetic import (
    VALUATION_YEAR,
    reference_drift,
    reference_model,
    synthetic_portfolio,
    synthetic_surface,
)


@pytest.fixture(scope="session")
def lc_model():
    """Exact Lee-Carter parameters over ages 0-99, years 1950-1999."""
    return reference_model()


@pytest.fixture(scope="session")
def drift():
    """Affine trend of the synthetic time index with the reference volatility."""
    return reference_drift()


@pytest.fixture(scope="session")
def portfolio():
    """The 374-annuitant synthetic portfolio valued in 2000."""
    return synthetic_portfolio()


@pytest.fixture
def small_portfolio():
    """Twenty annuitants for quick engine runs."""
    return synthetic_portfolio(n=20, seed=7)


@pytest.fixture
def mortality_csv(tmp_path):
    """Noisy synthetic surface written as age,year,qx over ages 40-99."""
    surface, _, _, _ = synthetic_surface(ages=(40, 99), noise=0.02, seed=3)
    path = tmp_path / "rates.csv"
    write_grid_csv(path, surface.ages, surface.years, surface.q)
    return path


@pytest.fixture
def portfolio_csv(tmp_path):
    """Small portfolio file in id,age,rent layout."""
    book = synthetic_portfolio(n=30, seed=11, valuation_year=VALUATION_YEAR)
    lines = ["id,age,rent"] + [f"{a.id},{a.age},{a.rent!r}" for a in book.annuitants]
    path = tmp_path / "portfolio.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
