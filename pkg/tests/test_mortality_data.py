"""Unit tests for mortality table loading, rate conversion and closure."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from longevity_risk.errors import ArgumentError, DomainError, StructuralError
from longevity_risk.mortality_data import (
    ClosureMethod,
    CsvFormat,
    MortalitySurface,
    close_rates,
    close_table,
    load_closed_table,
    load_mortality_csv,
    mu_to_q,
    q_to_mu,
    write_grid_csv,
)


def write_rows(path, rows, header="age,year,qx"):
    path.write_text(header + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n", encoding="utf-8")
    return path


def grid_rows(ages, years, q=0.01):
    return [(a, y, q) for a in ages for y in years]


class TestLoadMortalityCsv:
    """Test cases for CSV ingestion and validation."""

    def test_minimal_grid(self, tmp_path):
        """Test a 3 x 2 grid with ranges inferred from the data."""
        path = write_rows(tmp_path / "q.csv", grid_rows([60, 61, 62], [2000, 2001]))
        surface = load_mortality_csv(path)
        assert surface.q.shape == (3, 2)
        assert (surface.age_min, surface.age_max, surface.year_min, surface.year_max) == (60, 62, 2000, 2001)
        assert np.all(surface.q == 0.01)

    def test_unordered_rows(self, tmp_path):
        """Test that row order does not matter."""
        rows = [(60, 2000, 0.01), (61, 2001, 0.04), (60, 2001, 0.02), (61, 2000, 0.03)]
        surface = load_mortality_csv(write_rows(tmp_path / "q.csv", rows))
        assert surface.rate(60, 2001) == 0.02
        assert surface.rate(61, 2000) == 0.03

    def test_missing_cell_reported(self, tmp_path):
        """Test that a deleted row is reported with its coordinates."""
        rows = [r for r in grid_rows([60, 61, 62], [2000, 2001]) if r[:2] != (61, 2001)]
        with pytest.raises(StructuralError) as exc_info:
            load_mortality_csv(write_rows(tmp_path / "q.csv", rows))
        assert exc_info.value.cells == [(61, 2001)]
        assert "(61, 2001)" in str(exc_info.value)

    def test_rate_of_one_rejected(self, tmp_path):
        """Test that q = 1 is a domain error at that cell."""
        rows = grid_rows([60, 61], [2000, 2001])
        rows[3] = (61, 2001, 1.0)
        with pytest.raises(DomainError) as exc_info:
            load_mortality_csv(write_rows(tmp_path / "q.csv", rows))
        assert exc_info.value.cells == [(61, 2001)]

    def test_rate_of_zero_rejected(self, tmp_path):
        """Test that q = 0 is rejected rather than smoothed."""
        rows = grid_rows([60, 61], [2000])
        rows[0] = (60, 2000, 0.0)
        with pytest.raises(DomainError):
            load_mortality_csv(write_rows(tmp_path / "q.csv", rows))

    def test_duplicate_cell_rejected(self, tmp_path):
        """Test that duplicated (age, year) rows are structural errors."""
        rows = grid_rows([60, 61], [2000]) + [(61, 2000, 0.02)]
        with pytest.raises(StructuralError) as exc_info:
            load_mortality_csv(write_rows(tmp_path / "q.csv", rows))
        assert (61, 2000) in exc_info.value.cells

    def test_missing_column(self, tmp_path):
        """Test that a file without the rate column is rejected."""
        path = write_rows(tmp_path / "q.csv", [(60, 2000)], header="age,year")
        with pytest.raises(StructuralError) as exc_info:
            load_mortality_csv(path)
        assert "qx" in str(exc_info.value)

    def test_non_numeric_rate(self, tmp_path):
        """Test that a text rate is a structural error naming its cell."""
        rows = grid_rows([60, 61], [2000, 2001])
        rows[3] = (61, 2001, "high")
        path = write_rows(tmp_path / "q.csv", rows)
        with pytest.raises(StructuralError) as exc_info:
            load_mortality_csv(path)
        assert exc_info.value.cells == [(61, 2001)]

    def test_non_numeric_year(self, tmp_path):
        """Test that a text year is a structural error naming its row."""
        rows = grid_rows([60, 61], [2000, 2001])
        rows[1] = (60, "y2001", 0.01)
        path = write_rows(tmp_path / "q.csv", rows)
        with pytest.raises(StructuralError, match=r"rows \[3\]"):
            load_mortality_csv(path)

    def test_missing_file(self, tmp_path):
        """Test that a missing file is an argument error."""
        with pytest.raises(ArgumentError) as exc_info:
            load_mortality_csv(tmp_path / "absent.csv")
        assert "File not found" in str(exc_info.value)

    def test_custom_format_and_ranges(self, tmp_path):
        """Test configurable column names and range restriction."""
        rows = [(a, y, 0.01 * (a - 59)) for a in range(60, 66) for y in range(1990, 1995)]
        path = write_rows(tmp_path / "q.csv", rows, header="x,t,q")
        surface = load_mortality_csv(
            path, CsvFormat(age_column="x", year_column="t", q_column="q"), age_range=(61, 63), year_range=(1991, 1992)
        )
        assert surface.q.shape == (3, 2)
        assert surface.rate(63, 1992) == pytest.approx(0.04)

    def test_load_is_bit_stable(self, tmp_path):
        """Test that loading the same file twice gives identical matrices."""
        rng = np.random.default_rng(0)
        rows = [(a, y, rng.uniform(0.001, 0.5)) for a in range(50, 60) for y in range(2000, 2010)]
        path = write_rows(tmp_path / "q.csv", [(a, y, float(q)) for a, y, q in rows])
        first = load_mortality_csv(path)
        second = load_mortality_csv(path)
        assert np.array_equal(first.q, second.q)
        assert first.rate(50, 2000) == rows[0][2]

    def test_comment_header_skipped(self, tmp_path):
        """Test that a leading configuration comment line is ignored."""
        surface = MortalitySurface(60, 61, 2000, 2001, np.full((2, 2), 0.02))
        path = tmp_path / "q.csv"
        write_grid_csv(path, surface.ages, surface.years, surface.q, header={"seed": 1})
        assert path.read_text(encoding="utf-8").startswith("# {")
        assert np.array_equal(load_mortality_csv(path).q, surface.q)


class TestMortalitySurface:
    """Test cases for the surface type."""

    def test_shape_mismatch(self):
        """Test that declared ranges must match the matrix."""
        with pytest.raises(StructuralError):
            MortalitySurface(60, 62, 2000, 2001, np.full((2, 2), 0.01))

    def test_read_only(self):
        """Test that the rate matrix cannot be modified."""
        surface = MortalitySurface(60, 61, 2000, 2000, np.array([[0.01], [0.02]]))
        with pytest.raises(ValueError):
            surface.q[0, 0] = 0.5

    def test_restrict(self):
        """Test sub-grid extraction."""
        q = np.arange(1, 13, dtype=float).reshape(3, 4) / 100.0
        surface = MortalitySurface(60, 62, 2000, 2003, q)
        sub = surface.restrict((61, 62), (2001, 2002))
        assert np.array_equal(sub.q, q[1:3, 1:3])
        with pytest.raises(ArgumentError):
            surface.restrict((59, 62))


class TestRateConversion:
    """Test cases for q_to_mu and mu_to_q."""

    def test_known_values(self):
        """Test exact points of the conversion."""
        assert q_to_mu(0.0) == 0.0
        assert q_to_mu(1.0 - np.exp(-1.0)) == pytest.approx(1.0, abs=1e-15)
        assert q_to_mu(0.01) == pytest.approx(0.01005033585350145, abs=1e-16)
        assert mu_to_q(0.0) == 0.0
        assert mu_to_q(1.0) == pytest.approx(0.6321205588285577, abs=1e-16)

    def test_round_trip(self):
        """Test q -> mu -> q on random probabilities."""
        q = np.random.default_rng(4).uniform(0.0, 1.0, 1000)
        assert np.max(np.abs(mu_to_q(q_to_mu(q)) - q)) < 1e-14
        edge = np.array([0.0, 1e-300, 1e-12, 0.5, 1.0 - 1e-12])
        assert np.max(np.abs(mu_to_q(q_to_mu(edge)) - edge)) < 1e-14

    def test_strictly_monotone(self):
        """Test q1 < q2 implies mu1 < mu2 on random pairs."""
        rng = np.random.default_rng(5)
        a, b = rng.uniform(0.0, 0.999, (2, 1000))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keep = lo < hi
        assert np.all(q_to_mu(lo[keep]) < q_to_mu(hi[keep]))

    @pytest.mark.parametrize("q", [1.0, 1.5, -0.1, float("nan")])
    def test_q_domain(self, q):
        """Test that q outside [0, 1) is a domain error."""
        with pytest.raises(DomainError):
            q_to_mu(q)

    @pytest.mark.parametrize("mu", [-1e-9, float("nan")])
    def test_mu_domain(self, mu):
        """Test that negative hazards are a domain error."""
        with pytest.raises(DomainError):
            mu_to_q(mu)

    def test_array_shape_kept(self):
        """Test vectorized conversion on a matrix."""
        q = np.full((3, 4), 0.1)
        assert q_to_mu(q).shape == (3, 4)


class TestCloseTable:
    """Test cases for closure to the terminal age."""

    @pytest.fixture
    def old_age_surface(self):
        ages = np.arange(60, 99)
        q98 = 0.35
        q = q98 * np.exp(0.09 * (ages - 98))
        return MortalitySurface(60, 98, 2000, 2002, np.repeat(q[:, None], 3, axis=1))

    def test_default_closure(self, old_age_surface):
        """Test appended ages, terminal certainty and monotonicity."""
        table = close_table(old_age_surface, terminal_age=120)
        assert table.q.shape == (61, 3)
        assert table.closure_method is ClosureMethod.LOGISTIC_CAP
        tail = table.q[98 - 60 :]
        assert tail.shape[0] == 23
        assert np.all(np.diff(tail, axis=0) >= 0.0)
        assert np.all(table.q[-1] == 1.0)
        assert np.all(table.q[-2] < 1.0)

    def test_base_rows_unchanged(self, old_age_surface):
        """Test that observed rates are kept as they are."""
        table = close_table(old_age_surface, terminal_age=110)
        assert np.array_equal(table.q[: old_age_surface.q.shape[0]], old_age_surface.q)
        assert table.rate(98, 2001) == old_age_surface.rate(98, 2001)

    def test_linear_blend(self, old_age_surface):
        """Test the linear closure reaches 1 along a straight line."""
        table = close_table(old_age_surface, terminal_age=108, method=ClosureMethod.LINEAR_BLEND)
        tail = table.q[98 - 60 :, 0]
        assert tail[-1] == 1.0
        assert np.allclose(np.diff(tail), (1.0 - 0.35) / 10.0)

    def test_terminal_not_above_last_age(self, old_age_surface):
        """Test that terminal_age = age_max is an argument error."""
        with pytest.raises(ArgumentError):
            close_table(old_age_surface, terminal_age=98)

    def test_vectorized_over_leading_axes(self, old_age_surface):
        """Test that a stack of surfaces closes like each surface alone."""
        stack = np.stack([old_age_surface.q, old_age_surface.q * 0.9])
        closed = close_rates(stack, old_age_surface.ages, 120)
        single = close_rates(old_age_surface.q * 0.9, old_age_surface.ages, 120)
        assert np.allclose(closed[1], single, rtol=0.0, atol=1e-15)

    def test_to_csv_and_back(self, old_age_surface, tmp_path):
        """Test that a written closed table reads back identically."""
        table = close_table(old_age_surface, terminal_age=115)
        path = table.to_csv(tmp_path / "closed.csv", header={"seed": 3})
        assert path.with_suffix(".json").exists()
        loaded = load_closed_table(path)
        assert np.array_equal(loaded.q, table.q)
        assert loaded.terminal_age == 115
        assert loaded.base.age_max == 98
