"""Historical mortality tables: loading, validation, rate conversion and closure.

Rates live on a dense (age, year) grid of annual death probabilities q. The
hazard view assumes a constant force of mortality on each Lexis square, so
mu = -ln(1 - q).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Callable

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .errors import ArgumentError, DomainError, StructuralError

logger = logging.getLogger(__name__)

DEFAULT_TERMINAL_AGE = 120
CLOSURE_WINDOW = 10
# cap on how many offending cells an error message spells out
_MAX_LISTED = 20


@dataclass(frozen=True)
class CsvFormat:
    """Column layout of a mortality CSV file."""

    age_column: str = "age"
    year_column: str = "year"
    q_column: str = "qx"
    comment: str = "#"


class ClosureMethod(str, Enum):
    """Tag selecting how a table is extended to its terminal age."""

    LOGISTIC_CAP = "logistic_cap"
    LINEAR_BLEND = "linear_blend"


@dataclass(frozen=True)
class MortalitySurface:
    """Dense grid of annual death probabilities q[age, year], all in (0, 1)."""

    age_min: int
    age_max: int
    year_min: int
    year_max: int
    q: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.age_min > self.age_max or self.year_min > self.year_max:
            raise ArgumentError(
                f"Empty range: ages {self.age_min}-{self.age_max}, "
                f"years {self.year_min}-{self.year_max}"
            )
        q = np.array(self.q, dtype=np.float64)
        expected = (self.age_max - self.age_min + 1, self.year_max - self.year_min + 1)
        if q.shape != expected:
            raise StructuralError(f"Rate matrix has shape {q.shape}, expected {expected}")
        bad = ~((q > 0.0) & (q < 1.0))
        if bad.any():
            cells = self._coordinates(bad)
            logger.warning("Death probabilities outside (0,1) at %s", cells[:_MAX_LISTED])
            raise DomainError(
                f"Death probabilities must lie in (0,1); offending (age, year) cells: "
                f"{_listing(cells)}",
                cells,
            )
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.age_min, self.age_max + 1)

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.year_min, self.year_max + 1)

    @property
    def mu(self) -> np.ndarray:
        """Hazard rates on the same grid."""
        return q_to_mu(self.q)

    def rate(self, age: int, year: int) -> float:
        return float(self.q[age - self.age_min, year - self.year_min])

    def restrict(
        self,
        ages: tuple[int, int] | None = None,
        years: tuple[int, int] | None = None,
    ) -> MortalitySurface:
        """Sub-grid over inclusive age and year ranges."""
        a0, a1 = ages if ages is not None else (self.age_min, self.age_max)
        y0, y1 = years if years is not None else (self.year_min, self.year_max)
        if a0 < self.age_min or a1 > self.age_max or y0 < self.year_min or y1 > self.year_max:
            raise ArgumentError(
                f"Requested ages {a0}-{a1}, years {y0}-{y1} outside the surface "
                f"({self.age_min}-{self.age_max}, {self.year_min}-{self.year_max})"
            )
        block = self.q[a0 - self.age_min : a1 - self.age_min + 1, y0 - self.year_min : y1 - self.year_min + 1]
        return MortalitySurface(a0, a1, y0, y1, block)

    def _coordinates(self, mask: np.ndarray) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(mask)
        return [(int(self.age_min + r), int(self.year_min + c)) for r, c in zip(rows, cols)]


@dataclass(frozen=True)
class ClosedTable:
    """Surface extended to a terminal age where death is certain.

    ``q`` covers ages ``base.age_min`` to ``terminal_age`` over the base years;
    rows above ``base.age_max`` come from the closure and the last row is 1.
    """

    base: MortalitySurface
    terminal_age: int
    closure_method: ClosureMethod
    q: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        q = np.array(self.q, dtype=np.float64)
        expected = (self.terminal_age - self.base.age_min + 1, self.base.q.shape[1])
        if q.shape != expected:
            raise StructuralError(f"Closed matrix has shape {q.shape}, expected {expected}")
        if not np.all(q[-1] == 1.0):
            raise DomainError(f"Terminal age {self.terminal_age} must carry q = 1")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def age_min(self) -> int:
        return self.base.age_min

    @property
    def age_max(self) -> int:
        return self.terminal_age

    @property
    def year_min(self) -> int:
        return self.base.year_min

    @property
    def year_max(self) -> int:
        return self.base.year_max

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.age_min, self.terminal_age + 1)

    @property
    def years(self) -> np.ndarray:
        return self.base.years

    def rate(self, age: int, year: int) -> float:
        return float(self.q[age - self.age_min, year - self.year_min])

    def to_csv(self, path: str | Path, header: dict[str, Any] | None = None) -> Path:
        """Write the closed grid as ``age,year,qx`` plus a JSON sidecar."""
        path = Path(path)
        write_grid_csv(path, self.ages, self.years, self.q, header=header)
        sidecar = {
            "closure_method": self.closure_method.value,
            "terminal_age": self.terminal_age,
            "observed_age_max": self.base.age_max,
        }
        if header is not None:
            sidecar["config"] = header
        path.with_suffix(".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return path


def q_to_mu(q: Any) -> Any:
    """Hazard rate -ln(1 - q) for death probabilities in [0, 1)."""
    arr = np.asarray(q, dtype=np.float64)
    if not np.all((arr >= 0.0) & (arr < 1.0)):
        logger.warning("q_to_mu called with values outside [0, 1)")
        raise DomainError("Death probability must satisfy 0 <= q < 1")
    mu = -np.log1p(-arr)
    return float(mu) if mu.ndim == 0 else mu


def mu_to_q(mu: Any) -> Any:
    """Annual death probability 1 - exp(-mu) for hazards mu >= 0."""
    arr = np.asarray(mu, dtype=np.float64)
    if not np.all(arr >= 0.0):
        logger.warning("mu_to_q called with negative or NaN hazards")
        raise DomainError("Hazard rate must satisfy mu >= 0")
    q = -np.expm1(-arr)
    return float(q) if q.ndim == 0 else q


def load_mortality_csv(
    path: str | Path,
    fmt: CsvFormat = CsvFormat(),
    age_range: tuple[int, int] | None = None,
    year_range: tuple[int, int] | None = None,
) -> MortalitySurface:
    """
    Load a dense mortality surface from a long-format CSV file.

    Args:
        path: CSV file with one row per (age, year) cell
        fmt: column names of the file
        age_range: optional inclusive age window applied before validation
        year_range: optional inclusive year window applied before validation

    Returns:
        MortalitySurface: validated surface, ranges inferred from the data

    Raises:
        ArgumentError: If the file is missing or unreadable
        StructuralError: On duplicate, missing or malformed cells
        DomainError: If any q lies outside (0, 1)
    """
    ages, years, q = _read_grid(path, fmt, age_range, year_range)
    bad = ~((q > 0.0) & (q < 1.0))
    if bad.any():
        rows, cols = np.nonzero(bad)
        cells = [(int(ages[r]), int(years[c])) for r, c in zip(rows, cols)]
        logger.warning("Rates outside (0,1) in %s at %s", path, cells[:_MAX_LISTED])
        raise DomainError(
            f"{path}: death probabilities must lie in (0,1); offending (age, year) "
            f"cells: {_listing(cells)}",
            cells,
        )
    surface = MortalitySurface(int(ages[0]), int(ages[-1]), int(years[0]), int(years[-1]), q)
    logger.debug(
        "Loaded %s: ages %d-%d, years %d-%d",
        path, surface.age_min, surface.age_max, surface.year_min, surface.year_max,
    )
    return surface


def load_closed_table(path: str | Path, fmt: CsvFormat = CsvFormat()) -> ClosedTable:
    """Read a table written by :meth:`ClosedTable.to_csv`."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.is_file():
        raise ArgumentError(f"Closed table sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    ages, years, q = _read_grid(path, fmt, None, None)
    observed_max = int(sidecar["observed_age_max"])
    n_obs = observed_max - int(ages[0]) + 1
    base = MortalitySurface(int(ages[0]), observed_max, int(years[0]), int(years[-1]), q[:n_obs])
    return ClosedTable(base, int(sidecar["terminal_age"]), ClosureMethod(sidecar["closure_method"]), q)


def close_table(
    surface: MortalitySurface,
    terminal_age: int = DEFAULT_TERMINAL_AGE,
    method: ClosureMethod = ClosureMethod.LOGISTIC_CAP,
) -> ClosedTable:
    """
    Extend a surface to ``terminal_age`` where q = 1.

    Args:
        surface: observed or projected surface
        terminal_age: age of certain death, strictly above ``surface.age_max``
        method: closure rule

    Returns:
        ClosedTable: base rows unchanged, appended rows non-decreasing in age

    Raises:
        ArgumentError: If terminal_age <= surface.age_max
    """
    if terminal_age <= surface.age_max:
        logger.warning("Terminal age %d not above last age %d", terminal_age, surface.age_max)
        raise ArgumentError(
            f"Terminal age {terminal_age} must exceed the last observed age {surface.age_max}"
        )
    closed = close_rates(surface.q, surface.ages, terminal_age, method)
    return ClosedTable(surface, terminal_age, ClosureMethod(method), closed)


def close_rates(
    q: np.ndarray,
    ages: np.ndarray,
    terminal_age: int,
    method: ClosureMethod = ClosureMethod.LOGISTIC_CAP,
) -> np.ndarray:
    """Vectorized closure of ``q[..., age, year]`` up to ``terminal_age``."""
    extra = np.arange(int(ages[-1]) + 1, terminal_age + 1, dtype=np.float64)
    weight = (extra - ages[-1]) / (terminal_age - ages[-1])
    tail = _CLOSURES[ClosureMethod(method)](q, np.asarray(ages, dtype=np.float64), extra, weight)
    # monotone from the last observed age, exact certainty at the end
    chained = np.maximum.accumulate(np.concatenate([q[..., -1:, :], tail], axis=-2), axis=-2)
    tail = chained[..., 1:, :]
    tail[..., -1, :] = 1.0
    return np.concatenate([q, tail], axis=-2)


def _logistic_cap(q: np.ndarray, ages: np.ndarray, extra: np.ndarray, weight: np.ndarray) -> np.ndarray:
    window = min(CLOSURE_WINDOW, ages.size)
    if window < 2:
        return _linear_blend(q, ages, extra, weight)
    x = ages[-window:]
    y = logit(q[..., -window:, :])
    x_mean = x.mean()
    xc = (x - x_mean)[:, None]
    y_mean = y.mean(axis=-2, keepdims=True)
    slope = ((y - y_mean) * xc).sum(axis=-2, keepdims=True) / float((xc**2).sum())
    fitted = expit(y_mean + slope * (extra - x_mean)[:, None])
    w = weight[:, None]
    return (1.0 - w) * fitted + w


def _linear_blend(q: np.ndarray, ages: np.ndarray, extra: np.ndarray, weight: np.ndarray) -> np.ndarray:
    last = q[..., -1:, :]
    return last + (1.0 - last) * weight[:, None]


_CLOSURES: dict[ClosureMethod, Callable[..., np.ndarray]] = {
    ClosureMethod.LOGISTIC_CAP: _logistic_cap,
    ClosureMethod.LINEAR_BLEND: _linear_blend,
}


def write_grid_csv(
    target: str | Path | IO[str],
    ages: np.ndarray,
    years: np.ndarray,
    q: np.ndarray,
    header: dict[str, Any] | None = None,
    fmt: CsvFormat = CsvFormat(),
) -> None:
    """Write a rate grid in long format, optionally led by a ``#`` JSON header."""
    frame = pd.DataFrame(
        {
            fmt.age_column: np.repeat(ages, len(years)),
            fmt.year_column: np.tile(years, len(ages)),
            fmt.q_column: np.asarray(q, dtype=np.float64).ravel(),
        }
    )
    if isinstance(target, (str, Path)):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="") as handle:
            _write_frame(handle, frame, header, fmt)
    else:
        _write_frame(target, frame, header, fmt)


def _write_frame(handle: IO[str], frame: pd.DataFrame, header: dict[str, Any] | None, fmt: CsvFormat) -> None:
    if header is not None:
        handle.write(f"{fmt.comment} {json.dumps(header, sort_keys=True)}\n")
    frame.to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")


def _read_grid(
    path: str | Path,
    fmt: CsvFormat,
    age_range: tuple[int, int] | None,
    year_range: tuple[int, int] | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        logger.warning("Mortality file not found: %s", path)
        raise ArgumentError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, comment=fmt.comment, encoding="utf-8", float_precision="round_trip")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        logger.warning("Cannot parse %s: %s", path, e)
        raise ArgumentError(f"Cannot read mortality file {path}: {e}")

    columns = [fmt.age_column, fmt.year_column, fmt.q_column]
    missing_columns = [c for c in columns if c not in frame.columns]
    if missing_columns:
        raise StructuralError(f"{path}: missing columns {missing_columns}; found {list(frame.columns)}")
    frame = frame[columns]
    if frame.empty:
        raise StructuralError(f"{path}: no data rows")
    if frame.isna().any().any():
        rows = [int(i) + 2 for i in np.nonzero(frame.isna().any(axis=1).to_numpy())[0]]
        raise StructuralError(f"{path}: empty fields on data rows {rows[:_MAX_LISTED]}")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad_index = numeric[[fmt.age_column, fmt.year_column]].isna().any(axis=1).to_numpy()
    if bad_index.any():
        rows = [int(i) + 2 for i in np.nonzero(bad_index)[0]]
        raise StructuralError(f"{path}: non-numeric age or year on data rows {rows[:_MAX_LISTED]}")
    bad_q = numeric[fmt.q_column].isna().to_numpy()
    if bad_q.any():
        cells = [
            (int(a), int(y))
            for a, y in numeric.loc[bad_q, [fmt.age_column, fmt.year_column]].to_numpy()
        ]
        logger.warning("Non-numeric rates in %s: %s", path, cells[:_MAX_LISTED])
        raise StructuralError(f"{path}: non-numeric {fmt.q_column} at (age, year) cells: {_listing(cells)}", cells)
    frame = numeric

    index = frame[[fmt.age_column, fmt.year_column]].to_numpy(dtype=np.float64)
    if not np.all(index == np.round(index)):
        raise StructuralError(f"{path}: ages and years must be integers")
    frame = frame.assign(
        **{fmt.age_column: index[:, 0].astype(int), fmt.year_column: index[:, 1].astype(int)}
    )
    if age_range is not None:
        frame = frame[frame[fmt.age_column].between(*age_range)]
    if year_range is not None:
        frame = frame[frame[fmt.year_column].between(*year_range)]
    if frame.empty:
        raise StructuralError(f"{path}: no cells inside ages {age_range}, years {year_range}")

    duplicated = frame.duplicated([fmt.age_column, fmt.year_column], keep="first")
    if duplicated.any():
        cells = sorted(
            {(int(a), int(y)) for a, y in frame.loc[duplicated, [fmt.age_column, fmt.year_column]].to_numpy()}
        )
        logger.warning("Duplicate cells in %s: %s", path, cells[:_MAX_LISTED])
        raise StructuralError(f"{path}: duplicate (age, year) cells: {_listing(cells)}", cells)

    ages = np.arange(frame[fmt.age_column].min(), frame[fmt.age_column].max() + 1)
    years = np.arange(frame[fmt.year_column].min(), frame[fmt.year_column].max() + 1)
    grid = frame.pivot(index=fmt.age_column, columns=fmt.year_column, values=fmt.q_column)
    grid = grid.reindex(index=ages, columns=years)
    holes = grid.isna().to_numpy()
    if holes.any():
        rows, cols = np.nonzero(holes)
        cells = [(int(ages[r]), int(years[c])) for r, c in zip(rows, cols)]
        logger.warning("Missing cells in %s: %s", path, cells[:_MAX_LISTED])
        raise StructuralError(f"{path}: grid is not rectangular; missing (age, year) cells: {_listing(cells)}", cells)
    return ages, years, grid.to_numpy(dtype=np.float64)


def _listing(cells: list[tuple[int, int]]) -> str:
    shown = ", ".join(f"({a}, {y})" for a, y in cells[:_MAX_LISTED])
    more = len(cells) - _MAX_LISTED
    return shown + (f" and {more} more" if more > 0 else "")
