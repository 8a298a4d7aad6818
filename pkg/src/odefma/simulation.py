"""Monte Carlo study of the differential averaging estimator.

Covariates are independent normal series sampled on a grid of spacing
``delta``; the response level obeys ``y(t+h) - y(t) = (h/6) alpha'(Y_t + 4
Y_{t+h/2} + Y_{t+h})`` and is observed with i.i.d. N(0, sigma^2) error.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .averaging import (
    AveragedFit,
    OptimizerConfig,
    fitted_means,
    loss_ratio_diagnostic,
    optimize_weight_params,
)
from .errors import InfeasibleWeightsError, NumericalError, ReplicationFailureError
from .estimators import PartitionedDesign, SubmodelSpec, all_submodels, fit_with_submodels
from .ode_core import TrajectoryGrid, discretize, half_step_count

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.01
# the loss-ratio study needs some mass forced onto biased submodels
DIAGNOSTIC_RHO = 0.5


@dataclass(frozen=True)
class SimulationScenario:
    name: str
    alpha: tuple[float, ...]
    means: tuple[float, ...]
    spreads: tuple[float, ...]
    main: tuple[int, ...] = (0, 1)
    auxiliary: tuple[int, ...] = (2, 3)
    sigma: float = 1.0
    spread_is_variance: bool = False
    h: float = 2.0
    delta: float = 1.0
    stride: int = 1
    sample_sizes: tuple[int, ...] = (200, 300)
    comparison_sizes: tuple[int, ...] = (40, 80, 120, 160, 200)
    replications: int = 1000
    comparison_replications: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "means", "spreads", "main", "auxiliary", "sample_sizes", "comparison_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        d = len(self.alpha)
        if len(self.means) != d or len(self.spreads) != d:
            raise ValueError("alpha, means and spreads must have the same length")
        if set(self.main) & set(self.auxiliary):
            raise ValueError("main and auxiliary indices overlap")
        if any(i < 0 or i >= d for i in self.main + self.auxiliary):
            raise ValueError(f"covariate indices must lie in [0, {d})")
        if any(s < 0 for s in self.spreads) or self.sigma < 0:
            raise ValueError("spreads and sigma must be non-negative")
        half_step_count(self.h, self.delta)
        floor = 2 * (len(self.main) + len(self.auxiliary)) + 2
        small = [n for n in self.sample_sizes + self.comparison_sizes if n < floor]
        if small:
            raise ValueError(f"sample sizes {small} are below the minimum {floor}")
        if self.replications < 1 or self.comparison_replications < 1:
            raise ValueError("replication counts must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationScenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def sd(self) -> np.ndarray:
        spreads = np.asarray(self.spreads, dtype=float)
        return np.sqrt(spreads) if self.spread_is_variance else spreads

    @property
    def true_beta(self) -> np.ndarray:
        return np.asarray(self.alpha)[list(self.main)]

    @property
    def true_gamma(self) -> np.ndarray:
        return np.asarray(self.alpha)[list(self.auxiliary)]

    def unbiased_set(self, specs: Sequence[SubmodelSpec]) -> tuple[int, ...]:
        """Submodels whose auxiliaries cover every nonzero true auxiliary coefficient."""
        support = {i for i, g in enumerate(self.true_gamma) if g != 0}
        return tuple(j for j, s in enumerate(specs) if support <= set(s.included))


SCENARIO_1 = SimulationScenario(
    name="scenario1",
    alpha=(0.1, 0.2, 0.3, 0.4),
    means=(1.0, 2.0, 3.0, 4.0),
    spreads=(0.2, 0.3, 0.4, 0.3),
)

SCENARIO_2 = SimulationScenario(
    name="scenario2",
    alpha=(0.4, 0.5, 0.6, 0.7),
    means=(1.5, 2.5, 3.5, 4.5),
    spreads=(0.3, 0.4, 0.5, 0.6),
    seed=1,
)


@dataclass(frozen=True)
class SimulatedData:
    design: PartitionedDesign
    mu: np.ndarray
    raw: np.ndarray
    grid: TrajectoryGrid


def generate_dataset(scenario: SimulationScenario, n: int, seed) -> SimulatedData:
    """Draw one synthetic sample with ``n`` regression rows."""
    rng = np.random.default_rng(seed)
    s = half_step_count(scenario.h, scenario.delta)
    T = (n - 1) * scenario.stride + 2 * s + 1
    cov = rng.normal(scenario.means, scenario.sd, size=(T, len(scenario.alpha)))
    combined = cov[: T - 2 * s] + 4.0 * cov[s : T - s] + cov[2 * s :]
    increments = scenario.h / 6.0 * combined @ np.asarray(scenario.alpha)

    level = np.zeros(T)
    for t in range(T - 2 * s):
        level[t + 2 * s] = level[t] + increments[t]
    observed = level + rng.normal(0.0, scenario.sigma, size=T) if scenario.sigma > 0 else level

    times = scenario.delta * np.arange(T)
    grid = TrajectoryGrid(times, np.column_stack([observed, cov]))
    cols = [1 + i for i in scenario.main + scenario.auxiliary]
    dd = discretize(grid, 0, scenario.h, stride=scenario.stride, regressor_indices=cols)
    k = len(scenario.main)
    design = PartitionedDesign(dd.delta_y, dd.regressors[:, :k], dd.regressors[:, k:], scenario.h)
    starts = dd.start_index
    raw = cov[starts][:, list(scenario.main + scenario.auxiliary)]
    return SimulatedData(design, increments[starts], raw, grid)


def averaged_fit_mse(design: PartitionedDesign, specs, config: OptimizerConfig) -> tuple[float, AveragedFit]:
    fit = fit_with_submodels(design, specs)
    avg = optimize_weight_params(fit, config)
    fitted = avg.weights @ fitted_means(fit)
    resid = design.delta_y - fitted
    return float(resid @ resid) / design.n, avg


def linear_baseline_fit(
    raw,
    delta_y,
    main: Sequence[int],
    auxiliary: Sequence[int],
    specs: Sequence[SubmodelSpec] | None = None,
    config: OptimizerConfig | None = None,
) -> float:
    """In-sample MSE of the weight-averaged regression of delta_y on raw time-t covariates."""
    raw = np.asarray(raw, dtype=float)
    dy = np.asarray(delta_y, dtype=float)
    config = config or OptimizerConfig()
    if raw.size == 0 or raw.shape[-1] == 0:
        return float(np.mean((dy - dy.mean()) ** 2))
    # h = 6 makes the h/6 factor unity
    design = PartitionedDesign(dy, raw[:, list(main)], raw[:, list(auxiliary)], 6.0)
    specs = all_submodels(design.m) if specs is None else specs
    mse, _ = averaged_fit_mse(design, specs, config)
    return mse


@dataclass(frozen=True)
class SimulationRow:
    scenario: str
    n: int
    replications: int
    failures: int
    real_value: tuple[float, ...]
    simulated_value: tuple[float, ...]
    deviation: tuple[float, ...]
    mse: tuple[float, ...]
    mse1: float = float("nan")
    mse2: float = float("nan")


@dataclass
class SimulationReport:
    scenario: str
    coefficient_rows: list[SimulationRow] = field(default_factory=list)
    comparison_rows: list[SimulationRow] = field(default_factory=list)


def _optimizer_for(scenario: SimulationScenario, specs, base: OptimizerConfig) -> OptimizerConfig:
    if base.rho > 0 and not base.unbiased_set:
        return replace(base, unbiased_set=scenario.unbiased_set(specs))
    return base


def run_monte_carlo(
    scenario: SimulationScenario,
    n: int,
    replications: int | None = None,
    baseline: bool = False,
    config: OptimizerConfig | None = None,
) -> SimulationRow:
    """Replicate generate -> fit -> average and aggregate the main coefficients."""
    reps = scenario.replications if replications is None else replications
    specs = all_submodels(len(scenario.auxiliary))
    config = _optimizer_for(scenario, specs, config or OptimizerConfig())
    estimates, mse1, mse2, failures = [], [], [], []
    for rep in range(reps):
        try:
            data = generate_dataset(scenario, n, [scenario.seed, n, rep])
            fit_mse, avg = averaged_fit_mse(data.design, specs, config)
            if baseline:
                k = len(scenario.main)
                m2 = linear_baseline_fit(
                    data.raw, data.design.delta_y, range(k), range(k, data.raw.shape[1]), specs, config
                )
        except NumericalError as exc:
            failures.append(f"replication {rep}: {exc}")
            log.warning("n=%d replication %d failed: %s", n, rep, exc)
            continue
        estimates.append(avg.beta_f)
        mse1.append(fit_mse)
        if baseline:
            mse2.append(m2)
    if len(failures) > FAILURE_LIMIT * reps:
        raise ReplicationFailureError(len(failures), reps, failures)
    est = np.array(estimates)
    truth = scenario.true_beta
    mean = est.mean(axis=0)
    return SimulationRow(
        scenario=scenario.name,
        n=n,
        replications=reps,
        failures=len(failures),
        real_value=tuple(float(v) for v in truth),
        simulated_value=tuple(float(v) for v in mean),
        deviation=tuple(float(v) for v in mean - truth),
        mse=tuple(float(v) for v in np.mean((est - truth) ** 2, axis=0)),
        mse1=float(np.mean(mse1)),
        mse2=float(np.mean(mse2)) if baseline else float("nan"),
    )


def run_scenario(scenario: SimulationScenario, config: OptimizerConfig | None = None) -> SimulationReport:
    report = SimulationReport(scenario.name)
    for n in scenario.sample_sizes:
        report.coefficient_rows.append(run_monte_carlo(scenario, n, config=config))
    for n in scenario.comparison_sizes:
        report.comparison_rows.append(
            run_monte_carlo(scenario, n, scenario.comparison_replications, baseline=True, config=config)
        )
    return report


COEFFICIENT_HEADER = ["real_value", "simulated_value", "deviation", "mse"]
LONG_HEADER = ["n", "coefficient", "replications", "failures"] + COEFFICIENT_HEADER
COMPARISON_HEADER = ["n", "mse1", "mse2"]


def _write(path: Path, header, rows) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_tables(report: SimulationReport, outdir) -> list[Path]:
    """Write coefficient, comparison and plot-data CSV files; returns the paths."""
    outdir = Path(outdir)
    name = report.scenario
    paths = []
    long_rows = []
    for row in report.coefficient_rows:
        table = list(zip(row.real_value, row.simulated_value, row.deviation, row.mse))
        paths.append(_write(outdir / f"{name}_coefficients_n{row.n}.csv", COEFFICIENT_HEADER, [map(repr, r) for r in table]))
        for j, r in enumerate(table):
            long_rows.append([row.n, j + 1, row.replications, row.failures, *map(repr, r)])
    paths.append(_write(outdir / f"{name}_coefficients.csv", LONG_HEADER, long_rows))
    comp = [[row.n, repr(row.mse1), repr(row.mse2)] for row in report.comparison_rows]
    paths.append(_write(outdir / f"{name}_comparison.csv", COMPARISON_HEADER, comp))

    # plot data: estimate trajectory and parameter MSE against n
    traj = [[row.n, j + 1, repr(v)] for row in report.coefficient_rows for j, v in enumerate(row.simulated_value)]
    paths.append(_write(outdir / f"{name}_plot_estimates.csv", ["x", "series", "y"], traj))
    mse = [[row.n, j + 1, repr(v)] for row in report.coefficient_rows for j, v in enumerate(row.mse)]
    paths.append(_write(outdir / f"{name}_plot_mse.csv", ["x", "series", "y"], mse))
    return paths


def read_tables(outdir, name: str) -> SimulationReport:
    """Parse files written by :func:`emit_tables` back into a report."""
    outdir = Path(outdir)
    report = SimulationReport(name)
    with (outdir / f"{name}_coefficients.csv").open(newline="") as fh:
        grouped: dict[int, list[dict]] = {}
        for rec in csv.DictReader(fh):
            grouped.setdefault(int(rec["n"]), []).append(rec)
    for n, recs in grouped.items():
        recs.sort(key=lambda r: int(r["coefficient"]))
        col = {key: tuple(float(r[key]) for r in recs) for key in COEFFICIENT_HEADER}
        report.coefficient_rows.append(
            SimulationRow(
                scenario=name,
                n=n,
                replications=int(recs[0]["replications"]),
                failures=int(recs[0]["failures"]),
                **col,
            )
        )
    with (outdir / f"{name}_comparison.csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            report.comparison_rows.append(
                SimulationRow(name, int(rec["n"]), 0, 0, (), (), (), (), float(rec["mse1"]), float(rec["mse2"]))
            )
    return report


@dataclass(frozen=True)
class DiagnosticRow:
    n: int
    replications: int
    failures: int
    median_ratio: float
    mean_ratio: float
    max_ratio: float


DIAGNOSTIC_HEADER = ["n", "replications", "failures", "median_ratio", "mean_ratio", "max_ratio"]


def run_loss_diagnostic(
    scenario: SimulationScenario,
    sample_sizes: Sequence[int] = (50, 100, 200, 400),
    replications: int = 200,
    config: OptimizerConfig | None = None,
    grid_densities: tuple[int, int, int] = (25, 17, 21),
) -> list[DiagnosticRow]:
    """Loss at the chosen weights over the best grid loss, summarised per n.

    Without a config the constraint uses ``rho = DIAGNOSTIC_RHO`` with the
    scenario's unbiased submodels.
    """
    specs = all_submodels(len(scenario.auxiliary))
    config = _optimizer_for(scenario, specs, config or OptimizerConfig(rho=DIAGNOSTIC_RHO))
    eval_grid = config.grid(grid_densities)
    rows = []
    for n in sample_sizes:
        ratios, failures = [], []
        for rep in range(replications):
            try:
                data = generate_dataset(scenario, n, [scenario.seed, n, rep])
                fit = fit_with_submodels(data.design, specs)
                diag = loss_ratio_diagnostic(fit, data.mu, config, eval_grid=eval_grid)
            except NumericalError as exc:
                if isinstance(exc, InfeasibleWeightsError):
                    raise
                failures.append(f"replication {rep}: {exc}")
                continue
            ratios.append(diag.ratio)
        if len(failures) > FAILURE_LIMIT * replications:
            raise ReplicationFailureError(len(failures), replications, failures)
        r = np.array(ratios)
        rows.append(
            DiagnosticRow(n, replications, len(failures), float(np.median(r)), float(r.mean()), float(r.max()))
        )
    return rows


def emit_diagnostic(rows: Sequence[DiagnosticRow], outdir, name: str) -> Path:
    body = [[r.n, r.replications, r.failures, repr(r.median_ratio), repr(r.mean_ratio), repr(r.max_ratio)] for r in rows]
    return _write(Path(outdir) / f"{name}_loss_ratio.csv", DIAGNOSTIC_HEADER, body)
