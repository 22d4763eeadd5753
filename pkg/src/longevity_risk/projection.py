"""Time-index trend, deterministic and stochastic mortality surfaces.

The fitted k[t] is modelled as an affine trend in calendar year plus Gaussian
white noise, k*[t] = a t + b + gamma[t]. Projected hazards are
exp(alpha + beta k*), optionally shifted by -beta^2 sigma^2 / 2 so that the
stochastic hazard is unbiased for the trend hazard.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.stats import linregress

from .errors import ArgumentError, DomainError, NumericError
from .leecarter import LeeCarterModel
from .mortality_data import (
    DEFAULT_TERMINAL_AGE,
    ClosedTable,
    ClosureMethod,
    MortalitySurface,
    close_table,
    mu_to_q,
    write_grid_csv,
)
from .random_streams import RandomStream

logger = logging.getLogger(__name__)

# trend of the national series the method was calibrated on (absolute years)
REFERENCE_DRIFT_A = -2.05775
REFERENCE_DRIFT_B = 4059.94439
REFERENCE_SIGMA_GAMMA = 3.9388782

CHOLESKY_TOL = 1e-12


class SurfaceKind(str, Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC_RAW = "stochastic_raw"
    STOCHASTIC_CORRECTED = "stochastic_corrected"


@dataclass(frozen=True)
class DriftModel:
    """Affine trend of the time index with OLS parameter covariance."""

    a: float
    b: float
    sigma_gamma: float
    cov_ab: np.ndarray = field(repr=False)
    n_obs: int
    year_min: int
    year_max: int

    def __post_init__(self) -> None:
        cov = np.array(self.cov_ab, dtype=np.float64)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
            raise ArgumentError(f"cov_ab must be a symmetric 2x2 matrix, got {cov.tolist()}")
        if self.sigma_gamma < 0.0 or np.any(np.diag(cov) < 0.0):
            raise ArgumentError("sigma_gamma and the variances of (a, b) must be non-negative")
        if self.n_obs < 3:
            raise ArgumentError(f"A drift model needs at least 3 observations, got {self.n_obs}")
        cov.setflags(write=False)
        object.__setattr__(self, "cov_ab", cov)

    def line(self, years: np.ndarray) -> np.ndarray:
        return self.a * np.asarray(years, dtype=np.float64) + self.b

    def to_dict(self) -> dict[str, Any]:
        return {
            "a": self.a,
            "b": self.b,
            "sigma_gamma": self.sigma_gamma,
            "cov_ab": self.cov_ab.tolist(),
            "n_obs": self.n_obs,
            "years": [self.year_min, self.year_max],
            "regressor": "calendar_year",
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DriftModel:
        try:
            return cls(
                a=float(data["a"]),
                b=float(data["b"]),
                sigma_gamma=float(data["sigma_gamma"]),
                cov_ab=np.asarray(data["cov_ab"], dtype=np.float64),
                n_obs=int(data["n_obs"]),
                year_min=int(data["years"][0]),
                year_max=int(data["years"][1]),
            )
        except (KeyError, IndexError, TypeError) as e:
            raise ArgumentError(f"Malformed drift document: {e}")


@dataclass(frozen=True)
class ProjectedSurface:
    """Death probabilities over the model ages for a span of years."""

    base_model: LeeCarterModel = field(repr=False)
    years: np.ndarray = field(repr=False)
    q_future: np.ndarray = field(repr=False)
    kind: SurfaceKind
    k_path: np.ndarray = field(repr=False)
    sigma_gamma: float = 0.0

    @property
    def horizon(self) -> int:
        return int(self.years.size)

    def to_surface(self) -> MortalitySurface:
        return MortalitySurface(
            self.base_model.age_min,
            self.base_model.age_max,
            int(self.years[0]),
            int(self.years[-1]),
            self.q_future,
        )

    def closed(
        self,
        terminal_age: int = DEFAULT_TERMINAL_AGE,
        method: ClosureMethod = ClosureMethod.LOGISTIC_CAP,
    ) -> ClosedTable:
        return close_table(self.to_surface(), terminal_age, method)

    def to_csv(
        self,
        path: str | Path,
        terminal_age: int = DEFAULT_TERMINAL_AGE,
        drift: DriftModel | None = None,
        seed: int | None = None,
        header: dict[str, Any] | None = None,
    ) -> Path:
        """Write the closed surface as ``age,year,qx`` with a JSON sidecar."""
        path = Path(path)
        table = self.closed(terminal_age)
        write_grid_csv(path, table.ages, table.years, table.q, header=header)
        sidecar: dict[str, Any] = {
            "kind": self.kind.value,
            "sigma_gamma": self.sigma_gamma,
            "seed": seed,
            "drift": drift.to_dict() if drift is not None else None,
            "k_path": self.k_path.tolist(),
            "closure_method": table.closure_method.value,
            "terminal_age": terminal_age,
            "observed_age_max": self.base_model.age_max,
        }
        if header is not None:
            sidecar["config"] = header
        path.with_suffix(".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return path


def fit_drift(k: Sequence[float] | np.ndarray, years: Sequence[int] | np.ndarray) -> DriftModel:
    """
    Ordinary least squares of k on calendar year.

    Args:
        k: fitted time index values
        years: calendar years of those values

    Returns:
        DriftModel: slope, intercept, residual sd with n - 2 denominator and
        the OLS covariance of (a, b)

    Raises:
        ArgumentError: If fewer than 3 points or all years are equal
    """
    k = np.asarray(k, dtype=np.float64)
    t = np.asarray(years, dtype=np.float64)
    if k.shape != t.shape or k.ndim != 1:
        raise ArgumentError(f"k and years must be 1-d of equal length, got {k.shape} and {t.shape}")
    n = k.size
    if n < 3:
        logger.warning("Drift regression on %d points", n)
        raise ArgumentError(f"Drift regression needs at least 3 observations, got {n}")
    t_mean = float(t.mean())
    sxx = float(np.sum((t - t_mean) ** 2))
    if sxx == 0.0:
        raise ArgumentError("Drift regression needs at least two distinct years")

    result = linregress(t, k)
    a = float(result.slope)
    b = float(result.intercept)
    residuals = k - (a * t + b)
    variance = float(np.sum(residuals**2)) / (n - 2)
    cov = variance * np.array(
        [[1.0 / sxx, -t_mean / sxx], [-t_mean / sxx, 1.0 / n + t_mean**2 / sxx]]
    )
    drift = DriftModel(a, b, float(np.sqrt(variance)), cov, n, int(t.min()), int(t.max()))
    logger.debug("Drift fit: a=%.6g b=%.6g sigma_gamma=%.6g (n=%d)", a, b, drift.sigma_gamma, n)
    return drift


def extrapolate_k(
    drift: DriftModel,
    future_years: Sequence[float] | np.ndarray,
    params: tuple[float, float] | None = None,
) -> np.ndarray:
    """
    Trend line a t + b for years after the fit window.

    Raises:
        ArgumentError: If no years are given or one lies inside the fit window
    """
    t = _future_years(drift, future_years)
    if params is None:
        return drift.line(t)
    a, b = params
    return a * t + b


def sample_k_path(
    drift: DriftModel,
    future_years: Sequence[float] | np.ndarray,
    stream: RandomStream,
    sigma_gamma: float | None = None,
    params: tuple[float, float] | None = None,
) -> np.ndarray:
    """
    Noisy trend a t + b + gamma[t] with gamma i.i.d. N(0, sigma^2).

    The noise of the i-th requested year is the i-th inverse-CDF draw of
    ``stream``; ``sigma_gamma`` overrides the fitted volatility (stress runs).
    """
    sigma = drift.sigma_gamma if sigma_gamma is None else float(sigma_gamma)
    if sigma < 0.0:
        raise ArgumentError(f"sigma_gamma must be non-negative, got {sigma}")
    trend = extrapolate_k(drift, future_years, params)
    return trend + sigma * stream.normals(trend.size)


def build_surface(
    model: LeeCarterModel,
    k_path: Sequence[float] | np.ndarray,
    years: Sequence[int] | np.ndarray,
    corrected: bool = True,
    sigma_gamma: float | np.ndarray = 0.0,
    kind: SurfaceKind | None = None,
) -> ProjectedSurface:
    """
    Death probabilities from a time-index path.

    Args:
        model: fitted Lee-Carter parameters
        k_path: time index per year
        years: calendar years of ``k_path``
        corrected: subtract beta^2 sigma^2 / 2 from the log hazard
        sigma_gamma: noise volatility, scalar or one value per year
        kind: label; defaults to the stochastic kind matching ``corrected``

    Raises:
        DomainError: If ``k_path`` has non-finite entries or a rate leaves (0, 1)
    """
    k = np.asarray(k_path, dtype=np.float64)
    years = np.asarray(years)
    if k.ndim != 1 or k.shape != years.shape:
        raise ArgumentError(f"k_path {k.shape} and years {years.shape} must align")
    if not np.all(np.isfinite(k)):
        logger.warning("Non-finite time index in projection")
        raise DomainError("k_path contains non-finite values")
    sigma = np.broadcast_to(np.asarray(sigma_gamma, dtype=np.float64), k.shape)

    if corrected:
        log_mu = (
            model.alpha[:, None] - 0.5 * model.beta[:, None] ** 2 * sigma[None, :] ** 2
        ) + model.beta[:, None] * k[None, :]
    else:
        log_mu = model.log_mu(k)
    q = mu_to_q(np.exp(log_mu))
    if not np.all((q > 0.0) & (q < 1.0)):
        raise DomainError("Projected death probabilities left (0, 1); the time index is extreme")
    if kind is None:
        kind = SurfaceKind.STOCHASTIC_CORRECTED if corrected else SurfaceKind.STOCHASTIC_RAW
    q.setflags(write=False)
    k.setflags(write=False)
    scalar_sigma = float(np.max(sigma)) if sigma.size else 0.0
    return ProjectedSurface(model, years, q, kind, k, scalar_sigma)


def project_k(
    model: LeeCarterModel,
    drift: DriftModel,
    years: Sequence[int] | np.ndarray,
    stream: RandomStream | None = None,
    sigma_gamma: float | None = None,
    params: tuple[float, float] | None = None,
) -> np.ndarray:
    """Time index over any span: fitted k inside the fit window, trend beyond."""
    years = np.asarray(years, dtype=np.int64)
    if years.size == 0:
        raise ArgumentError("No projection years requested")
    if years.min() < model.year_min:
        raise ArgumentError(f"Year {int(years.min())} precedes the fitted window {model.year_min}")
    k = np.empty(years.size, dtype=np.float64)
    past = years <= model.year_max
    k[past] = model.k[years[past] - model.year_min]
    future = years[~past]
    if future.size:
        if stream is None:
            k[~past] = extrapolate_k(drift, future, params)
        else:
            k[~past] = sample_k_path(drift, future, stream, sigma_gamma, params)
    return k


def project_surface(
    model: LeeCarterModel,
    drift: DriftModel,
    years: Sequence[int] | np.ndarray,
    stream: RandomStream | None = None,
    corrected: bool = True,
    sigma_scale: float = 1.0,
    params: tuple[float, float] | None = None,
) -> ProjectedSurface:
    """
    Surface over ``years``; deterministic when no stream is given.

    Noise and the bias correction use sigma_gamma * sigma_scale and apply to
    years after the fitted window only.
    """
    if sigma_scale < 0.0:
        raise ArgumentError(f"sigma_scale must be non-negative, got {sigma_scale}")
    years = np.asarray(years, dtype=np.int64)
    if stream is None and params is None:
        k = project_k(model, drift, years)
        return build_surface(model, k, years, corrected=False, kind=SurfaceKind.DETERMINISTIC)
    sigma = drift.sigma_gamma * sigma_scale
    if stream is None:
        k = project_k(model, drift, years, params=params)
    else:
        k = project_k(model, drift, years, stream, sigma, params)
    per_year = np.where(years > model.year_max, sigma, 0.0)
    return build_surface(model, k, years, corrected=corrected, sigma_gamma=per_year)


def sample_drift_params(drift: DriftModel, stream: RandomStream) -> tuple[float, float]:
    """
    Draw (a, b) from N((a_hat, b_hat), cov_ab).

    Raises:
        NumericError: If cov_ab is not positive semi-definite
    """
    factor = _covariance_factor(drift.cov_ab)
    a, b = np.array([drift.a, drift.b]) + factor @ stream.normals(2)
    return float(a), float(b)


def bias_ratio_by_age(model: LeeCarterModel, sigma_gamma: float) -> np.ndarray:
    """E(mu*) / mu of the uncorrected generator, exp(beta^2 sigma^2 / 2) per age."""
    return np.exp(0.5 * model.beta**2 * float(sigma_gamma) ** 2)


def drift_window_sensitivity(
    model: LeeCarterModel, windows: Sequence[tuple[int, int]]
) -> pd.DataFrame:
    """Refit the trend on calendar sub-windows of the fitted time index."""
    rows = []
    for start, end in windows:
        if start < model.year_min or end > model.year_max or end - start < 2:
            raise ArgumentError(
                f"Window {start}-{end} must lie within {model.year_min}-{model.year_max} "
                "and span at least 3 years"
            )
        sl = slice(start - model.year_min, end - model.year_min + 1)
        drift = fit_drift(model.k[sl], model.years[sl])
        rows.append(
            {
                "window_start": start,
                "window_end": end,
                "a": drift.a,
                "b": drift.b,
                "sigma_gamma": drift.sigma_gamma,
                "n_obs": drift.n_obs,
            }
        )
    return pd.DataFrame(rows, columns=["window_start", "window_end", "a", "b", "sigma_gamma", "n_obs"])


def save_model(
    path: str | Path,
    model: LeeCarterModel,
    drift: DriftModel,
    header: dict[str, Any] | None = None,
) -> Path:
    """Write the Lee-Carter parameters with the drift under a ``drift`` key."""
    document = model.to_dict()
    document["drift"] = drift.to_dict()
    if header is not None:
        document["config"] = header
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_model(path: str | Path) -> tuple[LeeCarterModel, DriftModel]:
    """Read a document written by :func:`save_model`."""
    path = Path(path)
    if not path.is_file():
        logger.warning("Model file not found: %s", path)
        raise ArgumentError(f"File not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"Cannot read model file {path}: {e}")
    if "drift" not in document:
        raise ArgumentError(f"{path}: model document has no drift section")
    return LeeCarterModel.from_dict(document), DriftModel.from_dict(document["drift"])


def _future_years(drift: DriftModel, future_years: Sequence[float] | np.ndarray) -> np.ndarray:
    t = np.asarray(future_years, dtype=np.float64)
    if t.size == 0:
        raise ArgumentError("No future years requested")
    inside = t[t <= drift.year_max]
    if inside.size:
        logger.warning("Extrapolation requested inside the fit window: %s", inside.tolist())
        raise ArgumentError(
            f"Years {inside.tolist()} lie inside the fit window ending {drift.year_max}; "
            "use the fitted time index there"
        )
    return t


def _covariance_factor(cov: np.ndarray) -> np.ndarray:
    if not np.any(cov):
        return np.zeros((2, 2))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        if eigenvalues.min() < -CHOLESKY_TOL * max(1.0, float(np.abs(eigenvalues).max())):
            logger.warning("Drift covariance not positive semi-definite: %s", eigenvalues)
            raise NumericError(f"cov_ab is not positive semi-definite (eigenvalues {eigenvalues})")
        logger.debug("Cholesky failed on a singular covariance; using the symmetric square root")
        return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))
