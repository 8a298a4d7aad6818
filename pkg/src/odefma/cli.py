"""Command-line front end: ``simulate``, ``fit`` and ``diagnose``.

Exit codes: 0 success, 2 usage/config/IO error, 3 numerical failure.
Each run writes into one directory with a ``manifest.json`` echoing the
resolved configuration, seed and package version.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import tomli

from . import __version__
from .averaging import OptimizerConfig
from .empirical import SAMPLE_PATH, EmpiricalConfig, load_csv, run_pipeline
from .errors import DiagnosticUnavailableError, NumericalError, OdeFmaError, ReplicationFailureError
from .simulation import (
    DIAGNOSTIC_RHO,
    SimulationScenario,
    emit_diagnostic,
    emit_tables,
    run_loss_diagnostic,
    run_scenario,
)

log = logging.getLogger("odefma")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
OUTPUT_ENV = "ODEFMA_OUTPUT_DIR"
DATA_DIR = Path(__file__).parent / "data"


class ConfigError(Exception):
    """Bad configuration or unusable input; maps to exit code 2."""


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except tomli.TOMLDecodeError as exc:
        where = f"line {exc.lineno}, column {exc.colno}"
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid TOML at {where}: {exc.msg}") from None


def resolve_scenario_path(ref: str) -> Path:
    """A file path, or the name of a bundled scenario such as ``scenario1``."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = DATA_DIR / (ref if ref.endswith(".toml") else f"{ref}.toml")
    if len(path.parts) == 1 and bundled.exists():
        return bundled
    raise ConfigError(f"scenario file {ref} not found")


def load_scenario(ref: str) -> tuple[SimulationScenario, bool]:
    """Returns the scenario and whether the file set a seed."""
    path = resolve_scenario_path(ref)
    data = read_toml(path)
    table = data.get("scenario", data)
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: [scenario] must be a table")
    try:
        return SimulationScenario.from_dict(dict(table)), "seed" in table
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def optimizer_from(section: dict | None, base: OptimizerConfig | None = None) -> OptimizerConfig:
    base = base or OptimizerConfig()
    if not section:
        return base
    known = set(OptimizerConfig.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"optimizer config: {exc}") from None


def output_dir(arg: str | None, command: str) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path("odefma-output") / command


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dump_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(outdir: Path, command: str, seed, config: dict, files) -> Path:
    entries = {}
    for f in sorted(files, key=lambda p: Path(p).name):
        f = Path(f)
        entries[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "files": entries,
    }
    return dump_json(manifest, outdir / "manifest.json")


def _write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _cell(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def _config_section(args, name: str) -> dict:
    if not args.config:
        return {}
    data = read_toml(args.config)
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{args.config}: [{name}] must be a table")
    section = dict(section)
    if "optimizer" in data:
        section.setdefault("optimizer", data["optimizer"])
    return section


def _take(section: dict, key: str, cli_value, default):
    if cli_value is not None:
        return cli_value
    return section.pop(key, default)


def cmd_simulate(args) -> int:
    section = _config_section(args, "simulate")
    ref = _take(section, "scenario", args.scenario, None)
    if ref is None:
        raise ConfigError("simulate needs --scenario (a TOML file or a bundled name)")
    scenario, has_seed = load_scenario(ref)
    seed = _take(section, "seed", args.seed, None)
    if seed is None and not has_seed:
        raise ConfigError("simulate needs a seed (--seed or 'seed' in the scenario file)")
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    for key, cli in (
        ("replications", args.replications),
        ("comparison_replications", args.comparison_replications),
        ("sample_sizes", args.sizes),
        ("comparison_sizes", args.comparison_sizes),
    ):
        value = _take(section, key, cli, None)
        if value is not None:
            changes[key] = tuple(value) if isinstance(value, list) else value
    if args.no_comparison:
        changes["comparison_sizes"] = ()
    optimizer = optimizer_from(section.pop("optimizer", None))
    if section:
        raise ConfigError(f"unknown [simulate] keys: {sorted(section)}")
    try:
        scenario = replace(scenario, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    outdir = output_dir(args.output, "simulate")
    outdir.mkdir(parents=True, exist_ok=True)
    log.info("simulating %s into %s", scenario.name, outdir)
    report = run_scenario(scenario, optimizer)
    files = emit_tables(report, outdir)
    config = {"scenario": scenario.to_dict(), "optimizer": asdict(optimizer)}
    write_manifest(outdir, "simulate", scenario.seed, config, files)
    for row in report.coefficient_rows:
        print(f"n={row.n}: mean={list(row.simulated_value)} mse={list(row.mse)}")
    for row in report.comparison_rows:
        print(f"n={row.n}: mse1={row.mse1:.6g} mse2={row.mse2:.6g}")
    return EXIT_OK


def cmd_fit(args) -> int:
    section = _config_section(args, "fit")
    data_path = Path(_take(section, "data", args.data, str(SAMPLE_PATH)))
    if not data_path.exists():
        raise ConfigError(f"dataset {data_path} not found")
    mapping = section.pop("columns", None)
    main = _take(section, "main", args.main, None)
    aux = _take(section, "auxiliary", args.auxiliary, None)
    try:
        cfg = EmpiricalConfig(
            h=float(_take(section, "h", args.h, 2.0)),
            stride=int(_take(section, "stride", args.stride, 1)),
            main=tuple(main) if main is not None else EmpiricalConfig.main,
            auxiliary=tuple(aux) if aux is not None else None,
            family=_take(section, "family", args.family, "seven"),
            compare_linear=bool(args.compare_linear or section.pop("compare_linear", False)),
            optimizer=optimizer_from(section.pop("optimizer", None)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if section:
        raise ConfigError(f"unknown [fit] keys: {sorted(section)}")

    dataset = load_csv(data_path, mapping)
    try:
        report = run_pipeline(dataset, cfg)
    except ValueError as exc:
        if isinstance(exc, OdeFmaError):
            raise
        raise ConfigError(str(exc)) from None

    outdir = output_dir(args.output, "fit")
    outdir.mkdir(parents=True, exist_ok=True)
    files = [dump_json(report.to_json(), outdir / "report.json")]

    ed = report.design
    observed = dataset.column("y0")
    files.append(
        _write_rows(
            outdir / "levels.csv",
            ["date", "observed", "fitted"],
            [
                [d.isoformat(), _cell(obs), _cell(fit)]
                for d, obs, fit in zip(dataset.dates, observed, report.fitted_levels_original)
            ],
        )
    )
    targets = ed.start_index + ed.steps
    files.append(
        _write_rows(
            outdir / "differences.csv",
            ["date", "observed", "fitted", "residual"],
            [
                [dataset.dates[t].isoformat(), _cell(o), _cell(f), _cell(o - f)]
                for t, o, f in zip(targets, ed.design.delta_y, report.suite.fitted_avg)
            ],
        )
    )
    diag = report.diagnostics
    files.append(
        _write_rows(
            outdir / "residual_histogram.csv",
            ["left", "right", "count"],
            [[_cell(lo), _cell(hi), int(c)] for lo, hi, c in zip(diag.bin_edges[:-1], diag.bin_edges[1:], diag.counts)],
        )
    )
    files.append(
        _write_rows(
            outdir / "residual_qq.csv",
            ["theoretical", "sample"],
            [[_cell(t), _cell(s)] for t, s in zip(diag.theoretical, diag.sample)],
        )
    )
    config = {
        "data": data_path.name,
        "data_sha256": hashlib.sha256(data_path.read_bytes()).hexdigest(),
        "columns": mapping,
        "h": cfg.h,
        "stride": cfg.stride,
        "main": list(ed.main),
        "auxiliary": list(ed.auxiliary),
        "family": cfg.family,
        "compare_linear": cfg.compare_linear,
        "optimizer": asdict(cfg.optimizer),
    }
    write_manifest(outdir, "fit", cfg.optimizer.seed, config, files)

    for name, w in zip(report.suite.names, report.suite.weights):
        print(f"{name}: weight={w:.6g}")
    for name, m in report.suite.metrics.items():
        print(f"{name}: mse={m.mse:.6g} r2={m.r2:.6g}")
    if report.linear is not None:
        lin = report.linear.metrics["linear averaged"]
        print(f"linear averaged: mse={lin.mse:.6g} r2={lin.r2:.6g}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    section = _config_section(args, "diagnose")
    if args.data or section.get("data"):
        raise ConfigError(
            "diagnose needs the noiseless mean of the response, which only a synthetic "
            "scenario provides; pass --scenario instead of --data"
        )
    scenario, _ = load_scenario(_take(section, "scenario", args.scenario, "scenario1"))
    seed = _take(section, "seed", args.seed, None)
    if seed is not None:
        scenario = replace(scenario, seed=int(seed))
    sizes = tuple(_take(section, "sizes", args.sizes, (50, 100, 200, 400)))
    reps = int(_take(section, "replications", args.replications, 200))
    opt_section = dict(section.pop("optimizer", None) or {})
    if args.rho is not None:
        opt_section["rho"] = args.rho
    if args.unbiased is not None:
        opt_section["unbiased_set"] = args.unbiased
    optimizer = optimizer_from(opt_section, OptimizerConfig(rho=DIAGNOSTIC_RHO))
    if section:
        raise ConfigError(f"unknown [diagnose] keys: {sorted(section)}")
    if reps < 1 or not sizes:
        raise ConfigError("diagnose needs at least one sample size and one replication")

    rows = run_loss_diagnostic(scenario, sizes, reps, optimizer)
    outdir = output_dir(args.output, "diagnose")
    outdir.mkdir(parents=True, exist_ok=True)
    files = [emit_diagnostic(rows, outdir, scenario.name)]
    config = {
        "scenario": scenario.to_dict(),
        "sizes": list(sizes),
        "replications": reps,
        "optimizer": asdict(optimizer),
    }
    write_manifest(outdir, "diagnose", scenario.seed, config, files)
    for r in rows:
        print(f"n={r.n}: median ratio={r.median_ratio:.6g} mean ratio={r.mean_ratio:.6g}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _name_list(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split() if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odefma", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML file with [optimizer] and per-command sections")
        p.add_argument("--output", help=f"output directory (default: ${OUTPUT_ENV} or ./odefma-output/<command>)")

    sim = sub.add_parser("simulate", help="Monte Carlo tables for a synthetic scenario")
    common(sim)
    sim.add_argument("--scenario", help="scenario TOML file, or 'scenario1' / 'scenario2'")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replications", type=int)
    sim.add_argument("--comparison-replications", type=int)
    sim.add_argument("--sizes", type=_int_list, help="sample sizes for the coefficient tables")
    sim.add_argument("--comparison-sizes", type=_int_list)
    sim.add_argument("--no-comparison", action="store_true", help="skip the linear-baseline comparison")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit the averaged differential model to a market CSV")
    common(fit)
    fit.add_argument("--data", help="CSV with date,y0..y8 (default: bundled synthetic sample)")
    fit.add_argument("--h", type=float)
    fit.add_argument("--stride", type=int)
    fit.add_argument("--main", type=_name_list, help="main variables, e.g. y1,y4,y6")
    fit.add_argument("--auxiliary", type=_name_list)
    fit.add_argument("--family", choices=("seven", "all"))
    fit.add_argument("--compare-linear", action="store_true", help="also fit the linear averaging baseline")
    fit.set_defaults(func=cmd_fit)

    diag = sub.add_parser("diagnose", help="loss-ratio study on a synthetic scenario")
    common(diag)
    diag.add_argument("--scenario", help="scenario TOML file or bundled name (default scenario1)")
    diag.add_argument("--data", help=argparse.SUPPRESS)
    diag.add_argument("--seed", type=int)
    diag.add_argument("--sizes", type=_int_list)
    diag.add_argument("--replications", type=int)
    diag.add_argument("--rho", type=float)
    diag.add_argument("--unbiased", type=_int_list, help="submodel indices forming the unbiased set")
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ReplicationFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for msg in exc.messages:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DiagnosticUnavailableError, OdeFmaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
