"""Applied pipeline for a monthly market series.

CSV in, standardise, Simpson-combined design with step h, a family of
submodels averaged with optimal weights, fit metrics, residual checks and
fitted level reconstruction.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .averaging import AveragedFit, OptimizerConfig, fitted_means, optimize_weight_params
from .errors import (
    AlignmentError,
    DiagnosticUnavailableError,
    IngestionError,
    UndefinedMetricError,
    ZeroVarianceError,
)
from .estimators import PartitionedDesign, SubmodelSpec, all_submodels, fit_with_submodels
from .ode_core import TrajectoryGrid, discretize

COLUMNS = tuple(f"y{i}" for i in range(9))
DESCRIPTIONS = {
    "y0": "closing price",
    "y1": "amplitude %",
    "y2": "total lots",
    "y3": "amount",
    "y4": "DEA",
    "y5": "price movement",
    "y6": "DIFF",
    "y7": "rising amplitude %",
    "y8": "5-day average",
}
RESPONSE = "y0"
DEFAULT_MAIN = ("y1", "y4", "y6")

# regressors of the seven submodels used for the monthly index study
SEVEN_MODELS = {
    "Model 1": ("y1", "y2", "y3", "y4", "y5", "y6", "y7", "y8"),
    "Model 2": ("y1", "y2", "y3", "y4", "y5", "y6", "y7"),
    "Model 3": ("y1", "y2", "y3", "y4", "y5", "y6"),
    "Model 4": ("y1", "y4", "y6"),
    "Model 5": ("y1", "y2", "y3", "y4", "y6"),
    "Model 6": ("y1", "y2", "y3", "y4", "y6", "y7"),
    "Model 7": ("y1", "y2", "y3", "y4", "y6", "y8"),
}

SAMPLE_PATH = Path(__file__).parent / "data" / "sample_market.csv"


@dataclass(frozen=True)
class MarketDataset:
    dates: tuple[dt.date, ...]
    values: np.ndarray
    columns: tuple[str, ...] = COLUMNS

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        if values.shape != (len(self.dates), len(self.columns)):
            raise IngestionError(
                f"values shape {values.shape} does not match {len(self.dates)} dates x {len(self.columns)} columns"
            )
        if len(self.columns) != 9:
            raise IngestionError(f"expected 9 variables, got {len(self.columns)}")
        if not np.all(np.isfinite(values)):
            raise IngestionError("dataset contains missing or non-finite values")
        for i in range(1, len(self.dates)):
            if self.dates[i] <= self.dates[i - 1]:
                raise IngestionError("dates are not strictly increasing", row=i + 1, column="date")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "columns", tuple(self.columns))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def __len__(self) -> int:
        return len(self.dates)


def load_csv(path, mapping: Mapping[str, str] | None = None) -> MarketDataset:
    """Read ``date,y0,...,y8`` (ISO dates). ``mapping`` renames file headers to y-names.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    mapping = dict(mapping or {})
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path} is empty") from None
        header = [mapping.get(h.strip(), h.strip()) for h in header]
        needed = ("date",) + COLUMNS
        missing = [c for c in needed if c not in header]
        if missing:
            raise IngestionError(f"missing column(s) {missing} in {path}", row=1)
        pos = {c: header.index(c) for c in needed}
        dates, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            try:
                dates.append(dt.date.fromisoformat(rec[pos["date"]].strip()))
            except (ValueError, IndexError):
                raise IngestionError("unparsable date", row=lineno, column="date") from None
            row = []
            for c in COLUMNS:
                try:
                    value = float(rec[pos[c]])
                except (ValueError, IndexError):
                    raise IngestionError("unparsable number", row=lineno, column=c) from None
                if not math.isfinite(value):
                    raise IngestionError("missing or non-finite value", row=lineno, column=c)
                row.append(value)
            rows.append(row)
    if not rows:
        raise IngestionError(f"{path} has no data rows")
    for i in range(1, len(dates)):
        if dates[i] <= dates[i - 1]:
            raise IngestionError(
                f"date {dates[i].isoformat()} does not follow {dates[i - 1].isoformat()}",
                row=i + 2,
                column="date",
            )
    return MarketDataset(tuple(dates), np.array(rows))


def write_csv(dataset: MarketDataset, path, decimals: int = 4) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("date",) + dataset.columns)
        for d, row in zip(dataset.dates, dataset.values):
            writer.writerow([d.isoformat()] + [f"{v:.{decimals}f}" for v in row])
    return path


@dataclass(frozen=True)
class ColumnScale:
    mean: float
    sd: float


def standardize(dataset: MarketDataset) -> tuple[MarketDataset, dict[str, ColumnScale]]:
    """Centre each column and divide by its sample standard deviation (ddof=1)."""
    means = dataset.values.mean(axis=0)
    sds = dataset.values.std(axis=0, ddof=1)
    scales = {}
    for name, mu, sd in zip(dataset.columns, means, sds):
        if not sd > 1e-12 * max(1.0, abs(mu)):
            raise ZeroVarianceError(name)
        scales[name] = ColumnScale(float(mu), float(sd))
    z = (dataset.values - means) / sds
    return MarketDataset(dataset.dates, z, dataset.columns), scales


def destandardize(dataset: MarketDataset, scales: Mapping[str, ColumnScale]) -> MarketDataset:
    mu = np.array([scales[c].mean for c in dataset.columns])
    sd = np.array([scales[c].sd for c in dataset.columns])
    return MarketDataset(dataset.dates, dataset.values * sd + mu, dataset.columns)


@dataclass(frozen=True)
class EmpiricalDesign:
    design: PartitionedDesign
    main: tuple[str, ...]
    auxiliary: tuple[str, ...]
    start_index: np.ndarray
    steps: int
    raw: np.ndarray


def build_design(
    dataset: MarketDataset,
    h: float = 2.0,
    main: Sequence[str] = DEFAULT_MAIN,
    auxiliary: Sequence[str] | None = None,
    stride: int = 1,
    delta: float = 1.0,
) -> EmpiricalDesign:
    """Difference the response over step h and Simpson-combine the covariates.

    Rows are one sampling interval (``delta``, a month by default) apart.
    """
    main = tuple(main)
    if auxiliary is None:
        auxiliary = tuple(c for c in dataset.columns if c != RESPONSE and c not in main)
    auxiliary = tuple(auxiliary)
    unknown = [c for c in main + auxiliary if c not in dataset.columns or c == RESPONSE]
    if unknown:
        raise ValueError(f"{unknown} are not covariate columns")
    if set(main) & set(auxiliary):
        raise ValueError("main and auxiliary variables overlap")
    times = delta * np.arange(len(dataset))
    grid = TrajectoryGrid(times, dataset.values)
    cols = [dataset.columns.index(c) for c in main + auxiliary]
    dd = discretize(grid, dataset.columns.index(RESPONSE), h, stride=stride, regressor_indices=cols)
    k = len(main)
    design = PartitionedDesign(dd.delta_y, dd.regressors[:, :k], dd.regressors[:, k:], h)
    raw = dataset.values[dd.start_index][:, cols]
    return EmpiricalDesign(design, main, auxiliary, dd.start_index, 2 * dd.half_steps, raw)


def specs_from_models(
    models: Mapping[str, Sequence[str]], main: Sequence[str], auxiliary: Sequence[str]
) -> list[SubmodelSpec]:
    specs = []
    for name, variables in models.items():
        absent = [v for v in main if v not in variables]
        if absent:
            raise ValueError(f"{name} omits main variable(s) {absent}")
        extra = [v for v in variables if v not in main and v not in auxiliary]
        if extra:
            raise ValueError(f"{name} uses {extra}, which are neither main nor auxiliary")
        specs.append(SubmodelSpec(tuple(auxiliary.index(v) for v in variables if v in auxiliary)))
    return specs


def model_family(family: str, main: Sequence[str], auxiliary: Sequence[str]) -> dict[str, SubmodelSpec]:
    """Named submodels: ``"seven"`` for the fixed seven-model family, ``"all"`` for every subset."""
    if family == "seven":
        return dict(zip(SEVEN_MODELS, specs_from_models(SEVEN_MODELS, main, auxiliary)))
    if family == "all":
        return {
            "+".join(auxiliary[i] for i in s.included) or "main only": s
            for s in all_submodels(len(auxiliary))
        }
    raise ValueError(f"unknown model family {family!r}")


@dataclass(frozen=True)
class FitMetrics:
    standard_error: float
    mse: float
    mae: float
    r2: float

    def as_dict(self) -> dict:
        return {
            "standard_error": self.standard_error,
            "mean_square_error": self.mse,
            "mean_absolute_error": self.mae,
            "goodness_of_fit": self.r2,
        }


def fit_metrics(predicted, actual, n_params: float = 0.0) -> FitMetrics:
    """Standard error uses ``RSS / (n - n_params)``; R^2 is about the mean of ``actual``."""
    pred = np.asarray(predicted, dtype=float)
    act = np.asarray(actual, dtype=float)
    if pred.shape != act.shape or pred.ndim != 1:
        raise AlignmentError(f"predicted {pred.shape} and actual {act.shape} differ")
    n = act.shape[0]
    if n < 2:
        raise ValueError("at least two observations are required")
    if not n_params < n:
        raise ValueError(f"n_params={n_params} leaves no residual degrees of freedom")
    resid = act - pred
    rss = float(resid @ resid)
    tss = float(((act - act.mean()) ** 2).sum())
    if tss == 0:
        raise UndefinedMetricError("actual values are constant; R^2 is undefined")
    return FitMetrics(
        standard_error=math.sqrt(rss / (n - n_params)),
        mse=rss / n,
        mae=float(np.abs(resid).mean()),
        r2=1.0 - rss / tss,
    )


@dataclass(frozen=True)
class ResidualDiagnostics:
    bin_edges: np.ndarray
    counts: np.ndarray
    theoretical: np.ndarray
    sample: np.ndarray
    mean: float
    sd: float
    skew: float

    @property
    def qq_slope(self) -> float:
        return float(np.polyfit(self.theoretical, self.sample, 1)[0])


def residual_diagnostics(residuals) -> ResidualDiagnostics:
    """Sturges histogram and normal QQ points of the standardised residuals."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 10:
        raise DiagnosticUnavailableError(f"need at least 10 residuals, got {r.size}")
    sd = float(r.std(ddof=1))
    if not sd > 1e-12 * max(1.0, float(np.abs(r).max())):
        raise DiagnosticUnavailableError("residuals have no spread (degenerate distribution)")
    counts, edges = np.histogram(r, bins="sturges")
    n = r.size
    probs = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return ResidualDiagnostics(
        bin_edges=edges,
        counts=counts,
        theoretical=stats.norm.ppf(probs),
        sample=np.sort((r - r.mean()) / sd),
        mean=float(r.mean()),
        sd=sd,
        skew=float(stats.skew(r)),
    )


def reconstruct_levels(fitted_diff, levels, start_index, steps: int) -> np.ndarray:
    """Fitted levels ``y_hat[t + steps] = y[t] + fitted_diff`` for each design row.

    Returns an array aligned with ``levels``; positions no design row reaches
    are NaN.
    """
    fd = np.asarray(fitted_diff, dtype=float)
    lv = np.asarray(levels, dtype=float)
    idx = np.asarray(start_index, dtype=int)
    if fd.shape != idx.shape:
        raise AlignmentError(f"{fd.shape[0]} fitted differences for {idx.shape[0]} design rows")
    if idx.size and (idx.min() < 0 or idx.max() + steps >= lv.shape[0]):
        raise AlignmentError("design rows reach beyond the observed level series")
    out = np.full(lv.shape, np.nan)
    out[idx + steps] = lv[idx] + fd
    return out


@dataclass
class SuiteResult:
    names: list[str]
    weights: np.ndarray
    averaged: AveragedFit
    fitted: np.ndarray
    fitted_avg: np.ndarray
    metrics: dict[str, FitMetrics]
    coefficients: dict[str, dict[str, float]]


def fit_submodel_suite(
    design: PartitionedDesign,
    specs: Mapping[str, SubmodelSpec] | Sequence[SubmodelSpec],
    config: OptimizerConfig | None = None,
    variable_names: tuple[Sequence[str], Sequence[str]] | None = None,
    averaged_label: str = "averaged",
) -> SuiteResult:
    """Fit each submodel, choose weights over the family and score every model."""
    if not isinstance(specs, Mapping):
        specs = {f"Model {i + 1}": s for i, s in enumerate(specs)}
    names = list(specs)
    spec_list = list(specs.values())
    config = config or OptimizerConfig()
    if not config.unbiased_set and config.rho > 0:
        full = tuple(i for i, s in enumerate(spec_list) if len(s.included) == design.m)
        config = OptimizerConfig(**{**config.__dict__, "unbiased_set": full})
    fit = fit_with_submodels(design, spec_list)
    avg = optimize_weight_params(fit, config)
    fitted = fitted_means(fit)
    fitted_avg = avg.weights @ fitted
    q = np.array([s.q for s in fit.submodels], dtype=float)

    main_names, aux_names = variable_names or (
        [f"x{i + 1}" for i in range(design.k)],
        [f"z{i + 1}" for i in range(design.m)],
    )
    labels = list(main_names) + list(aux_names)
    metrics, coefs = {}, {}
    for name, sub, f in zip(names, fit.submodels, fitted):
        metrics[name] = fit_metrics(f, design.delta_y, sub.q)
        coefs[name] = dict(zip(labels, map(float, np.concatenate([sub.beta, sub.gamma]))))
    metrics[averaged_label] = fit_metrics(fitted_avg, design.delta_y, float(avg.weights @ q))
    coefs[averaged_label] = dict(zip(labels, map(float, np.concatenate([avg.beta_f, avg.gamma_f]))))
    return SuiteResult(names, avg.weights, avg, fitted, fitted_avg, metrics, coefs)


@dataclass(frozen=True)
class EmpiricalConfig:
    h: float = 2.0
    stride: int = 1
    main: tuple[str, ...] = DEFAULT_MAIN
    auxiliary: tuple[str, ...] | None = None
    family: str = "seven"
    compare_linear: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class EmpiricalReport:
    dataset: MarketDataset
    scales: dict[str, ColumnScale]
    design: EmpiricalDesign
    suite: SuiteResult
    diagnostics: ResidualDiagnostics
    fitted_levels: np.ndarray
    fitted_levels_original: np.ndarray
    linear: SuiteResult | None = None

    def to_json(self) -> dict:
        out = {
            "n_observations": len(self.dataset),
            "n_design_rows": self.design.design.n,
            "main": list(self.design.main),
            "auxiliary": list(self.design.auxiliary),
            "weights": dict(zip(self.suite.names, map(float, self.suite.weights))),
            "weight_params": {
                "a": self.suite.averaged.params.a,
                "b": self.suite.averaged.params.b,
                "c": self.suite.averaged.params.c,
            },
            "risk": self.suite.averaged.risk,
            "coefficients": self.suite.coefficients,
            "metrics": {k: v.as_dict() for k, v in self.suite.metrics.items()},
            "residuals": {
                "mean": self.diagnostics.mean,
                "sd": self.diagnostics.sd,
                "skew": self.diagnostics.skew,
                "qq_slope": self.diagnostics.qq_slope,
            },
            "scales": {k: {"mean": v.mean, "sd": v.sd} for k, v in self.scales.items()},
        }
        if self.linear is not None:
            out["linear"] = {
                "weights": dict(zip(self.linear.names, map(float, self.linear.weights))),
                "coefficients": self.linear.coefficients,
                "metrics": {k: v.as_dict() for k, v in self.linear.metrics.items()},
            }
            out["comparison"] = {
                "differential": self.suite.metrics["averaged"].as_dict(),
                "linear averaged": self.linear.metrics["linear averaged"].as_dict(),
            }
        return out


def run_pipeline(dataset: MarketDataset, config: EmpiricalConfig | None = None) -> EmpiricalReport:
    config = config or EmpiricalConfig()
    std, scales = standardize(dataset)
    ed = build_design(std, config.h, config.main, config.auxiliary, config.stride)
    family = model_family(config.family, ed.main, ed.auxiliary)
    suite = fit_submodel_suite(ed.design, family, config.optimizer, (ed.main, ed.auxiliary))
    resid = ed.design.delta_y - suite.fitted_avg
    diag = residual_diagnostics(resid)
    y_std = std.column(RESPONSE)
    levels = reconstruct_levels(suite.fitted_avg, y_std, ed.start_index, ed.steps)
    s0 = scales[RESPONSE]
    levels_orig = reconstruct_levels(
        suite.fitted_avg * s0.sd, dataset.column(RESPONSE), ed.start_index, ed.steps
    )
    linear = None
    if config.compare_linear:
        k = ed.design.k
        lin_design = PartitionedDesign(ed.design.delta_y, ed.raw[:, :k], ed.raw[:, k:], 6.0)
        linear = fit_submodel_suite(
            lin_design, family, config.optimizer, (ed.main, ed.auxiliary), "linear averaged"
        )
    return EmpiricalReport(dataset, scales, ed, suite, diag, levels, levels_orig, linear)


def make_synthetic_market(seed: int = 20201030, n_months: int = 57, noise: float = 0.3) -> MarketDataset:
    """Monthly sample with the nine-variable schema generated from the differential model.

    Covariates are independent; the closing price follows
    ``y(t+2) - y(t) = (1/3) alpha'(Y_t + 4 Y_{t+1} + Y_{t+2})`` in
    standardised units, observed with N(0, noise^2) error, then mapped to
    plausible raw scales.
    """
    rng = np.random.default_rng(seed)
    alpha = np.array([0.45, -0.35, 0.4, -0.3, 0.35, -0.3, 0.3, 0.25])
    u = rng.normal(size=(n_months, 8))
    u = (u - u.mean(axis=0)) / u.std(axis=0, ddof=1)
    h, s = 2.0, 1
    combined = u[:-2 * s] + 4 * u[s:-s] + u[2 * s:]
    inc = h / 6 * combined @ alpha
    level = np.zeros(n_months)
    for t in range(n_months - 2 * s):
        level[t + 2 * s] = level[t] + inc[t]
    y0 = level + rng.normal(0.0, noise, size=n_months)
    centres = np.array([3000.0, 1.6, 20000.0, 2500.0, 0.0, 2.0, 0.0, 0.1, 2400.0])
    spreads = np.array([120.0, 0.5, 5000.0, 700.0, 30.0, 40.0, 35.0, 1.2, 600.0])
    values = centres + spreads * np.column_stack([y0, u])
    dates = []
    year, month = 2016, 1
    for _ in range(n_months):
        nxt = dt.date(year + month // 12, month % 12 + 1, 1)
        dates.append(nxt - dt.timedelta(days=1))
        year, month = year + month // 12, month % 12 + 1
    return MarketDataset(tuple(dates), values)
