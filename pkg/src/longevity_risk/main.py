"""Main entry point for the longevity-risk command line."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from .annuity_engine import (
    Portfolio,
    expected_flows,
    histogram,
    load_portfolio_csv,
    replicate,
    reserve,
    simulate_lambda,
    simulate_lambda_stochastic,
)
from .errors import (
    ArgumentError,
    ConvergenceError,
    InvariantError,
    LongevityRiskError,
)
from .leecarter import LeeCarterModel, fit, residual_matrix
from .mortality_data import ClosureMethod, load_mortality_csv
from .projection import (
    DriftModel,
    SurfaceKind,
    bias_ratio_by_age,
    drift_window_sensitivity,
    fit_drift,
    load_model,
    project_surface,
    save_model,
)
from .random_streams import SCENARIO, TREND, RandomStream
from .risk_decomposition import (
    DecompositionConfig,
    LeeCarterScenarios,
    converge,
    omega_curve,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_INTERNAL = 4

# portfolio growth factor of the scenario table when no --size-scale > 1 is given
STUDY_SIZE_SCALE = 100

logger = logging.getLogger("longevity_risk")


def setup_logging(level: str = "INFO", log_file: Path | None = None) -> logging.Logger:
    """Configure logging for the command line; ``log_file`` gets a copy of every record."""
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w", encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )
    return logging.getLogger("longevity_risk")


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one command: defaults, then ``--config`` file, then flags."""

    command: str = ""
    mortality: str | None = None
    portfolio: str | None = None
    model: str | None = None
    out_dir: str = "out"
    discount_rate: float = 0.025
    terminal_age: int = 120
    sims: int = 20000
    outer: int = 100
    inner: int = 200
    sigma_scales: tuple[float, ...] = (1.0,)
    size_scales: tuple[int, ...] = (1,)
    seed: int = 20061231
    threshold: float = 1e-3
    max_rounds: int = 6
    threads: int = 1
    valuation_year: int | None = None
    age_range: tuple[int, int] | None = None
    year_range: tuple[int, int] | None = None
    raw_bias: bool = False
    drift_uncertainty: bool = False
    stochastic: bool = False
    bins: str = "fd"
    closure: str = ClosureMethod.LOGISTIC_CAP.value
    drift_windows: tuple[tuple[int, int], ...] = ()
    log_level: str = "INFO"

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ArgumentError(f"Unknown configuration keys: {unknown}")
        cleaned = dict(values)
        for key in ("sigma_scales", "size_scales", "age_range", "year_range"):
            if cleaned.get(key) is not None:
                cleaned[key] = tuple(cleaned[key])
        if cleaned.get("bins") is not None:
            cleaned["bins"] = str(cleaned["bins"])
        if cleaned.get("drift_windows") is not None:
            cleaned["drift_windows"] = tuple(tuple(w) for w in cleaned["drift_windows"])
        return cls(**cleaned)

    def validate(self) -> None:
        """
        Check every numeric setting before any computation starts.

        Raises:
            ArgumentError: On the first invalid setting
        """
        checks: list[tuple[bool, str]] = [
            (self.discount_rate > -1.0, f"discount_rate must exceed -1, got {self.discount_rate}"),
            (self.terminal_age > 0, f"terminal_age must be positive, got {self.terminal_age}"),
            (self.sims >= 2, f"sims must be at least 2, got {self.sims}"),
            (self.outer >= 2, f"outer must be at least 2, got {self.outer}"),
            (self.inner >= 2, f"inner must be at least 2, got {self.inner}"),
            (len(self.sigma_scales) > 0, "at least one sigma scale is required"),
            (all(s >= 0.0 for s in self.sigma_scales), f"sigma scales must be non-negative: {self.sigma_scales}"),
            (len(self.size_scales) > 0, "at least one size scale is required"),
            (all(s >= 1 for s in self.size_scales), f"size scales must be at least 1: {self.size_scales}"),
            (self.seed >= 0, f"seed must be non-negative, got {self.seed}"),
            (self.threshold > 0.0, f"threshold must be positive, got {self.threshold}"),
            (self.max_rounds >= 2, f"max_rounds must be at least 2, got {self.max_rounds}"),
            (self.threads >= 1, f"threads must be at least 1, got {self.threads}"),
            (self.closure in {m.value for m in ClosureMethod}, f"unknown closure method {self.closure!r}"),
        ]
        for ok, message in checks:
            if not ok:
                logger.warning("Invalid configuration: %s", message)
                raise ArgumentError(message)
        for name in ("age_range", "year_range"):
            bounds = getattr(self, name)
            if bounds is not None and (len(bounds) != 2 or bounds[0] > bounds[1]):
                raise ArgumentError(f"{name} must be an increasing pair, got {bounds}")
        for window in self.drift_windows:
            if len(window) != 2 or window[1] - window[0] < 2:
                raise ArgumentError(f"drift window {window} must span at least 3 years")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def histogram_bins(self) -> int | str:
        return int(self.bins) if self.bins.isdigit() else self.bins


def validate_and_sanitize_path(file_path: str | None, what: str = "File") -> Path:
    """
    Validate a user supplied path.

    Args:
        file_path: The path to validate
        what: label used in error messages

    Returns:
        Path: Resolved Path object

    Raises:
        ArgumentError: If the path is missing, empty or malformed
    """
    if not file_path or not str(file_path).strip():
        raise ArgumentError(f"{what} path is required")
    if "\x00" in str(file_path):
        raise ArgumentError(f"Invalid characters in {what.lower()} path")
    try:
        return Path(file_path).resolve()
    except (OSError, ValueError) as e:
        raise ArgumentError(f"Invalid {what.lower()} path: {e}")


def require_file(file_path: str | None, what: str) -> Path:
    path = validate_and_sanitize_path(file_path, what)
    if not path.is_file():
        logger.warning("%s not found: %s", what, path)
        raise ArgumentError(f"{what} not found: {file_path}")
    return path


def write_file(path: Path, content: str) -> Path:
    """
    Write text output, creating parent directories.

    Raises:
        ArgumentError: If the file cannot be written
    """
    if path.exists() and path.is_dir():
        logger.warning("Cannot write to directory: %s", path)
        raise ArgumentError(f"Cannot write to directory: {path}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    except PermissionError:
        logger.warning("Permission denied writing file: %s", path)
        raise ArgumentError(f"Permission denied writing file: {path}")
    except OSError as e:
        logger.error("OS error writing file %s: %s", path, e)
        raise ArgumentError(f"Error writing file: {e}")
    logger.debug("Wrote %s (%d characters)", path, len(content))
    return path


def write_json(path: Path, data: dict[str, Any]) -> Path:
    return write_file(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, frame: pd.DataFrame, config: RunConfig) -> Path:
    """CSV led by a ``#`` line holding the resolved configuration."""
    header = f"# {json.dumps(config.to_dict(), sort_keys=True)}\n"
    body = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    return write_file(path, header + body)


def cmd_fit(config: RunConfig) -> list[Path]:
    """Fit Lee-Carter and the drift; write model, residuals and report."""
    source = require_file(config.mortality, "Mortality file")
    surface = load_mortality_csv(source, age_range=config.age_range, year_range=config.year_range)
    model = fit(surface)
    drift = fit_drift(model.k, model.years)
    out = Path(config.out_dir)
    header = config.to_dict()

    residuals = residual_matrix(model, surface)
    frame = pd.DataFrame(
        {
            "age": np.repeat(model.ages, model.years.size),
            "year": np.tile(model.years, model.ages.size),
            "residual": residuals.ravel(),
        }
    )
    report = {
        "ages": [model.age_min, model.age_max],
        "years": [model.year_min, model.year_max],
        "explained_variance": model.explained_variance,
        "residual_sd": model.residual_sd,
        "degenerate": model.degenerate,
        "a": drift.a,
        "b": drift.b,
        "sigma_gamma": drift.sigma_gamma,
        "config": header,
    }
    written = [
        save_model(out / "model.json", model, drift, header),
        write_csv(out / "residuals.csv", frame, config),
        write_json(out / "fit_report.json", report),
    ]
    if config.drift_windows:
        windows = drift_window_sensitivity(model, config.drift_windows)
        written.append(write_csv(out / "drift_windows.csv", windows, config))
    logger.info(
        "Fitted ages %d-%d over %d-%d: explained variance %.6f, a=%.6g, b=%.6g, sigma_gamma=%.6g",
        model.age_min, model.age_max, model.year_min, model.year_max,
        model.explained_variance, drift.a, drift.b, drift.sigma_gamma,
    )
    return written


def cmd_project(config: RunConfig) -> list[Path]:
    """Write one closed projected surface and the per-age bias of the raw generator."""
    model, drift = _load_model(config)
    scenarios = _scenarios(config, model, drift)
    out = Path(config.out_dir)
    header = config.to_dict()
    sigma_scale = config.sigma_scales[0]
    if config.stochastic:
        stream = RandomStream(config.seed).substream(SCENARIO, 0, TREND)
        surface = project_surface(
            model, drift, scenarios.years, stream=stream,
            corrected=not config.raw_bias, sigma_scale=sigma_scale,
        )
    else:
        surface = project_surface(model, drift, scenarios.years)
    target = surface.to_csv(
        out / "projected_surface.csv", config.terminal_age, drift, config.seed, header
    )
    bias = pd.DataFrame(
        {
            "age": model.ages,
            "beta": model.beta,
            "ratio": bias_ratio_by_age(model, drift.sigma_gamma * sigma_scale),
        }
    )
    logger.info("Projected %s surface over %d-%d", surface.kind.value, surface.years[0], surface.years[-1])
    return [target, target.with_suffix(".json"), write_csv(out / "bias_by_age.csv", bias, config)]


def cmd_simulate(config: RunConfig) -> list[Path]:
    """Simulate the liability distribution; write samples, summary, histogram and flows."""
    model, drift = _load_model(config)
    scenarios = _scenarios(config, model, drift)
    portfolio = _load_portfolio(config, scenarios.valuation_year)
    table = scenarios.deterministic_table()
    stream = RandomStream(config.seed)
    if config.stochastic:
        dist = simulate_lambda_stochastic(
            portfolio, scenarios, config.discount_rate, config.sims, stream, config.threads
        )
    else:
        dist = simulate_lambda(
            portfolio, table, config.discount_rate, config.sims, stream,
            config.terminal_age, config.threads,
        )
    flows = expected_flows(portfolio, table)
    analytic = reserve(flows, config.discount_rate)
    summary = dist.summary
    standard_error = summary.sd / np.sqrt(summary.n)
    out = Path(config.out_dir)
    edges, counts = histogram(dist, config.histogram_bins)

    document = {
        "summary": summary.to_dict(),
        "var75": summary.var75,
        "analytic_reserve": analytic,
        "mean_minus_reserve_in_se": (summary.mean - analytic) / standard_error if standard_error > 0 else 0.0,
        "seed": config.seed,
        "n_sims": config.sims,
        "n_annuitants": len(portfolio),
        # the single-table engine only sees a closed table, whose origin is the trend
        "surface_kind": dist.surface_kind if config.stochastic else SurfaceKind.DETERMINISTIC.value,
        "config": config.to_dict(),
    }
    logger.info(
        "Liability mean %.2f, sd %.2f, cv %.4f%%; analytic reserve %.2f",
        summary.mean, summary.sd, 100.0 * summary.cv, analytic,
    )
    return [
        write_csv(out / "samples.csv", pd.DataFrame({"lambda": dist.samples}), config),
        write_json(out / "summary.json", document),
        write_csv(
            out / "histogram.csv",
            pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts}),
            config,
        ),
        write_csv(
            out / "flows.csv",
            pd.DataFrame({"t": np.arange(1, flows.size + 1), "F_t": flows}),
            config,
        ),
    ]


def cmd_decompose(config: RunConfig) -> list[Path]:
    """Converged variance split at the first scales, then the omega curve over both grids."""
    model, drift = _load_model(config)
    # the nested runs apply each sigma scale themselves
    scenarios = dataclasses.replace(_scenarios(config, model, drift), sigma_scale=1.0)
    portfolio = _load_portfolio(config, scenarios.valuation_year)
    base = DecompositionConfig(
        n_outer=config.outer,
        n_inner=config.inner,
        sigma_scale=config.sigma_scales[0],
        convergence_threshold=config.threshold,
        max_rounds=config.max_rounds,
        seed=config.seed,
        workers=config.threads,
    )
    result = converge(replicate(portfolio, config.size_scales[0]), scenarios, config.discount_rate, base)
    curve = omega_curve(
        portfolio, scenarios, config.discount_rate, base, config.sigma_scales, config.size_scales,
        first=result,
    )
    out = Path(config.out_dir)
    document = result.to_dict()
    document["config"] = config.to_dict()
    logger.info("omega %.6g after %d rounds", result.omega, len(result.trace))
    return [
        write_json(out / "decomposition.json", document),
        write_csv(out / "omega_curve.csv", curve, config),
    ]


def cmd_scenarios(config: RunConfig) -> list[Path]:
    """
    Liability summaries for the standard set of stress scenarios.

    Rows: deterministic, corrected stochastic at x1 and x10 volatility, raw
    stochastic at x10 and x20, then deterministic and corrected stochastic on
    the portfolio grown by each size scale above 1 (x100 by default).
    """
    model, drift = _load_model(config)
    base = _scenarios(config, model, drift)
    portfolio = _load_portfolio(config, base.valuation_year)
    table = base.deterministic_table()
    stream = RandomStream(config.seed)
    grown = [s for s in config.size_scales if s > 1] or [STUDY_SIZE_SCALE]

    specs: list[tuple[str, float, int, bool | None]] = [
        ("deterministic", 0.0, 1, None),
        ("stochastic", 1.0, 1, True),
        ("stochastic_x10", 10.0, 1, True),
        ("raw_x10", 10.0, 1, False),
        ("raw_x20", 20.0, 1, False),
    ]
    for size in grown:
        specs.append((f"deterministic_size_x{size}", 0.0, size, None))
        specs.append((f"stochastic_size_x{size}", 1.0, size, True))

    rows = []
    for name, sigma, size, corrected in specs:
        book = replicate(portfolio, size)
        if corrected is None:
            dist = simulate_lambda(
                book, table, config.discount_rate, config.sims, stream,
                config.terminal_age, config.threads,
            )
        else:
            generator = dataclasses.replace(base, corrected=corrected, sigma_scale=sigma)
            dist = simulate_lambda_stochastic(
                book, generator, config.discount_rate, config.sims, stream, config.threads
            )
        summary = dist.summary
        rows.append(
            {
                "scenario": name,
                "sigma_scale": sigma,
                "size_scale": size,
                "corrected": corrected if corrected is not None else "",
                **{k: v for k, v in summary.to_dict().items() if k != "quantile_method"},
                "analytic_reserve": reserve(expected_flows(book, table), config.discount_rate),
            }
        )
        logger.info("Scenario %s: mean %.2f, cv %.4f%%", name, summary.mean, 100.0 * summary.cv)
    frame = pd.DataFrame(rows)
    out = Path(config.out_dir)
    return [
        write_csv(out / "scenarios.csv", frame, config),
        write_json(out / "scenarios.json", {"rows": rows, "config": config.to_dict()}),
    ]


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "fit": cmd_fit,
    "project": cmd_project,
    "simulate": cmd_simulate,
    "decompose": cmd_decompose,
    "scenarios": cmd_scenarios,
}

# input files each command reads, checked before anything is written
INPUTS: dict[str, tuple[tuple[str, str], ...]] = {
    "fit": (("mortality", "Mortality file"),),
    "project": (("model", "Model file"),),
    "simulate": (("model", "Model file"), ("portfolio", "Portfolio file")),
    "decompose": (("model", "Model file"), ("portfolio", "Portfolio file")),
    "scenarios": (("model", "Model file"), ("portfolio", "Portfolio file")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longevity-risk",
        description="Lee-Carter projection and longevity risk of annuity portfolios",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        p = sub.add_parser(name, help=(handler.__doc__ or "").splitlines()[0])
        _add_common_arguments(p)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the optional JSON file and explicit flags.

    Raises:
        ArgumentError: If the file is unreadable or holds unknown keys
    """
    values: dict[str, Any] = {}
    if args.config is not None:
        path = require_file(args.config, "Config file")
        try:
            values.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ArgumentError(f"Cannot parse config file {path}: {e}")
    flags = {k: v for k, v in vars(args).items() if k != "config" and v is not None}
    values.update(flags)
    config = RunConfig.from_mapping(values)
    config.validate()
    return config


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        config = load_config(args)
        for field_name, what in INPUTS[config.command]:
            require_file(getattr(config, field_name), what)
    except (LongevityRiskError, ValueError) as e:
        logger.error("Invalid input: %s", e)
        return EXIT_INPUT

    out = Path(config.out_dir)
    setup_logging(config.log_level, out / "run.log")
    logger.info("Running %s with seed %d", config.command, config.seed)
    try:
        written = COMMANDS[config.command](config)
    except ConvergenceError as e:
        logger.error("%s", e)
        write_json(out / "convergence_trace.json", {"error": str(e), "trace": e.trace, "config": config.to_dict()})
        return EXIT_CONVERGENCE
    except InvariantError as e:
        logger.error("Internal invariant violated: %s", e)
        return EXIT_INTERNAL
    except (LongevityRiskError, ValueError, OSError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    except Exception as e:
        logger.error("Unexpected error in %s: %s", config.command, e, exc_info=True)
        return EXIT_INTERNAL
    for path in written:
        logger.info("Wrote %s", path)
    return EXIT_OK


def run_cli() -> None:
    """Entry point of the console script."""
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(130)


def _add_common_arguments(p: argparse.ArgumentParser) -> None:
    # every default is None so that only explicit flags override the config file
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--mortality", help="historical rates CSV (age,year,qx)")
    p.add_argument("--portfolio", help="portfolio CSV (id,age,rent)")
    p.add_argument("--model", help="model JSON written by the fit command")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--discount-rate", dest="discount_rate", type=float)
    p.add_argument("--terminal-age", dest="terminal_age", type=int)
    p.add_argument("--sims", type=int, help="realizations of the liability")
    p.add_argument("--outer", type=int, help="surfaces per nested round")
    p.add_argument("--inner", type=int, help="portfolio simulations per surface")
    p.add_argument("--sigma-scale", dest="sigma_scales", type=float, nargs="+")
    p.add_argument("--size-scale", dest="size_scales", type=int, nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="convergence threshold")
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--valuation-year", dest="valuation_year", type=int)
    p.add_argument("--age-range", dest="age_range", type=int, nargs=2)
    p.add_argument("--year-range", dest="year_range", type=int, nargs=2)
    p.add_argument("--raw-bias", dest="raw_bias", action="store_true", default=None)
    p.add_argument("--drift-uncertainty", dest="drift_uncertainty", action="store_true", default=None)
    p.add_argument("--stochastic", action="store_true", default=None)
    p.add_argument("--bins", help="histogram bins: a count or a numpy rule such as fd")
    p.add_argument("--closure", choices=[m.value for m in ClosureMethod])
    p.add_argument("--drift-windows", dest="drift_windows", type=_window, nargs="+", help="START:END")
    p.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _window(text: str) -> tuple[int, int]:
    try:
        start, end = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}")
    return start, end


def _load_model(config: RunConfig) -> tuple[LeeCarterModel, DriftModel]:
    return load_model(require_file(config.model, "Model file"))


def _load_portfolio(config: RunConfig, valuation_year: int) -> Portfolio:
    return load_portfolio_csv(require_file(config.portfolio, "Portfolio file"), valuation_year)


def _scenarios(config: RunConfig, model: LeeCarterModel, drift: DriftModel) -> LeeCarterScenarios:
    valuation_year = config.valuation_year if config.valuation_year is not None else model.year_max + 1
    return LeeCarterScenarios(
        model,
        drift,
        valuation_year,
        terminal_age=config.terminal_age,
        corrected=not config.raw_bias,
        sigma_scale=config.sigma_scales[0],
        drift_uncertainty=config.drift_uncertainty,
        closure_method=ClosureMethod(config.closure),
    )


if __name__ == "__main__":
    run_cli()
