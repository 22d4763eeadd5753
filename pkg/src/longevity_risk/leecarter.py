"""Lee-Carter decomposition ln mu[x, t] = alpha[x] + beta[x] * k[t] + eps[x, t].

Parameters are identified by sum(beta) = 1 and sum(k) = 0. The least-squares
fit takes alpha as the time average of the log hazards and (beta, k) from the
dominant singular triplet of the row-centered matrix, which is the global
minimizer of the squared-residual criterion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ArgumentError, ConvergenceError, DegeneracyError, InvariantError
from .mortality_data import MortalitySurface, q_to_mu

logger = logging.getLogger(__name__)

BETA_SUM_TOL = 1e-10
K_SUM_TOL = 1e-8
DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class LeeCarterModel:
    """
    Fitted Lee-Carter parameters and fit diagnostics.

    ``residual_sd`` is the bias-corrected sample standard deviation of the
    log-hazard residuals over all cells, net of the fitted parameters.
    """

    age_min: int
    age_max: int
    year_min: int
    year_max: int
    alpha: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    explained_variance: float
    residual_sd: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        n_ages = self.age_max - self.age_min + 1
        n_years = self.year_max - self.year_min + 1
        for name, size in (("alpha", n_ages), ("beta", n_ages), ("k", n_years)):
            values = np.array(getattr(self, name), dtype=np.float64)
            if values.shape != (size,):
                raise ArgumentError(f"{name} has shape {values.shape}, expected ({size},)")
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.age_min, self.age_max + 1)

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.year_min, self.year_max + 1)

    def log_mu(self, k: np.ndarray | None = None) -> np.ndarray:
        """Fitted log hazards alpha + beta * k over (age, year)."""
        path = self.k if k is None else np.asarray(k, dtype=np.float64)
        return self.alpha[:, None] + self.beta[:, None] * path[None, :]

    def check_constraints(self) -> None:
        """Raise InvariantError unless sum(beta) = 1 and sum(k) = 0."""
        if self.degenerate:
            return
        beta_gap = abs(float(self.beta.sum()) - 1.0)
        k_gap = abs(float(self.k.sum()))
        if beta_gap >= BETA_SUM_TOL or k_gap >= K_SUM_TOL * self.k.size:
            raise InvariantError(
                f"Identifiability constraints violated: |sum(beta) - 1| = {beta_gap:.3e}, "
                f"|sum(k)| = {k_gap:.3e}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "ages": [self.age_min, self.age_max],
            "years": [self.year_min, self.year_max],
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "k": self.k.tolist(),
            "explained_variance": self.explained_variance,
            "residual_sd": self.residual_sd,
            "degenerate": self.degenerate,
            "tolerances": {
                "beta_sum": BETA_SUM_TOL,
                "k_sum": K_SUM_TOL,
                "degeneracy": DEGENERACY_TOL,
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LeeCarterModel:
        try:
            return cls(
                age_min=int(data["ages"][0]),
                age_max=int(data["ages"][1]),
                year_min=int(data["years"][0]),
                year_max=int(data["years"][1]),
                alpha=np.asarray(data["alpha"], dtype=np.float64),
                beta=np.asarray(data["beta"], dtype=np.float64),
                k=np.asarray(data["k"], dtype=np.float64),
                explained_variance=float(data["explained_variance"]),
                residual_sd=float(data["residual_sd"]),
                degenerate=bool(data.get("degenerate", False)),
            )
        except (KeyError, IndexError, TypeError) as e:
            raise ArgumentError(f"Malformed Lee-Carter model document: {e}")


def fit(surface: MortalitySurface) -> LeeCarterModel:
    """
    Fit the Lee-Carter model to a historical surface.

    Args:
        surface: observed death probabilities, at least 2 ages by 2 years

    Returns:
        LeeCarterModel: constrained parameters; a surface without temporal
        signal yields k = 0, uniform beta and ``degenerate=True``

    Raises:
        ArgumentError: If the surface has fewer than 2 ages or 2 years
        ConvergenceError: If the singular value decomposition fails
    """
    n_ages, n_years = surface.q.shape
    if n_ages < 2 or n_years < 2:
        logger.warning("Surface too small to fit: %d ages x %d years", n_ages, n_years)
        raise ArgumentError(f"Need at least 2 ages and 2 years, got {n_ages} x {n_years}")

    log_mu = np.log(q_to_mu(surface.q))
    alpha = log_mu.mean(axis=1)
    centered = log_mu - alpha[:, None]
    total_ss = float(np.sum(centered**2))

    try:
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as e:
        logger.error("SVD failed on %d x %d log-hazard matrix: %s", n_ages, n_years, e)
        raise ConvergenceError(f"Singular value decomposition did not converge: {e}")

    scale = max(1.0, float(np.abs(log_mu).max())) * np.sqrt(log_mu.size)
    if s[0] <= DEGENERACY_TOL * scale:
        logger.warning(
            "No temporal signal in ages %d-%d, years %d-%d; reporting a constant model",
            surface.age_min, surface.age_max, surface.year_min, surface.year_max,
        )
        beta = np.full(n_ages, 1.0 / n_ages)
        k = np.zeros(n_years)
        degenerate = True
    else:
        # orient the age vector so that sum(beta) > 0 before rescaling
        sign = 1.0 if u[:, 0].sum() >= 0.0 else -1.0
        alpha, beta, k = normalize_constraints(alpha, sign * u[:, 0], sign * s[0] * vt[0])
        degenerate = False
        slope = np.polyfit(surface.years.astype(np.float64), k, 1)[0]
        if slope > 0.0:
            logger.info("Fitted time index trends upward (slope %.4g): mortality worsening", slope)

    residuals = log_mu - (alpha[:, None] + beta[:, None] * k[None, :])
    ssr = float(np.sum(residuals**2))
    explained = 0.0 if degenerate or total_ss == 0.0 else min(1.0, max(0.0, 1.0 - ssr / total_ss))
    model = LeeCarterModel(
        age_min=surface.age_min,
        age_max=surface.age_max,
        year_min=surface.year_min,
        year_max=surface.year_max,
        alpha=alpha,
        beta=beta,
        k=k,
        explained_variance=explained,
        residual_sd=_residual_sd(residuals, n_ages, n_years),
        degenerate=degenerate,
    )
    model.check_constraints()
    logger.debug(
        "Lee-Carter fit on %d x %d grid: explained variance %.10f, residual sd %.6g",
        n_ages, n_years, explained, model.residual_sd,
    )
    return model


def normalize_constraints(
    alpha: np.ndarray, beta: np.ndarray, k: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rescale parameters so that sum(beta) = 1 and sum(k) = 0.

    With c = sum(beta) and m = mean(k): k -> c (k - m), beta -> beta / c and
    alpha -> alpha + beta m. The fitted values alpha + beta k are unchanged.

    Raises:
        DegeneracyError: If sum(beta) is zero
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    c = float(beta.sum())
    if not np.isfinite(c) or abs(c) <= 1e-12 * float(np.abs(beta).sum()):
        logger.warning("Cannot normalize: sum(beta) = %r", c)
        raise DegeneracyError(f"Sum of beta is zero ({c!r}); the time index is not identifiable")
    k_mean = float(k.mean())
    return alpha + beta * k_mean, beta / c, c * (k - k_mean)


def residual_matrix(model: LeeCarterModel, surface: MortalitySurface) -> np.ndarray:
    """
    Residuals ln mu*[x, t] - alpha[x] - beta[x] k[t] over the fitted grid.

    Raises:
        ArgumentError: If the surface ranges differ from the model's
    """
    if (surface.age_min, surface.age_max, surface.year_min, surface.year_max) != (
        model.age_min, model.age_max, model.year_min, model.year_max,
    ):
        logger.warning("Residual request on mismatched ranges")
        raise ArgumentError(
            f"Surface ranges ages {surface.age_min}-{surface.age_max}, years "
            f"{surface.year_min}-{surface.year_max} do not match the model "
            f"(ages {model.age_min}-{model.age_max}, years {model.year_min}-{model.year_max})"
        )
    return np.log(q_to_mu(surface.q)) - model.log_mu()


def sum_squared_residuals(model: LeeCarterModel, surface: MortalitySurface) -> float:
    return float(np.sum(residual_matrix(model, surface) ** 2))


def _residual_sd(residuals: np.ndarray, n_ages: int, n_years: int) -> float:
    """
    Sample standard deviation of all residual cells, bias-corrected for the fit.

    The denominator is the cell count less the 2 * ages + years - 2 free
    parameters left after the two identifiability constraints, so the
    estimate is unbiased for the noise variance; grids too small for that
    fall back to cells - 1.
    """
    dof = residuals.size - (2 * n_ages + n_years - 2)
    if dof <= 0:
        dof = residuals.size - 1
    return float(np.sqrt(np.sum(residuals**2) / dof))
