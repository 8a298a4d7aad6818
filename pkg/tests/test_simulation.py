from dataclasses import replace

import numpy as np
import pytest

from odefma import simulation
from odefma.errors import IntegrationOverflowError, ReplicationFailureError
from odefma.estimators import all_submodels, fit_full
from odefma.simulation import (
    SCENARIO_1,
    SCENARIO_2,
    SimulationScenario,
    emit_diagnostic,
    emit_tables,
    generate_dataset,
    linear_baseline_fit,
    read_tables,
    run_loss_diagnostic,
    run_monte_carlo,
    run_scenario,
)


def test_noiseless_data_has_exact_means_and_recovers_alpha():
    sc = replace(SCENARIO_1, sigma=0.0)
    data = generate_dataset(sc, 60, 11)
    np.testing.assert_allclose(data.design.delta_y, data.mu, atol=1e-12)
    fit = fit_full(data.design)
    np.testing.assert_allclose(fit.beta_u, sc.true_beta, atol=1e-9)
    np.testing.assert_allclose(fit.gamma, sc.true_gamma, atol=1e-9)


def test_dataset_shapes_and_seeding():
    a = generate_dataset(SCENARIO_2, 80, [1, 2, 3])
    b = generate_dataset(SCENARIO_2, 80, [1, 2, 3])
    c = generate_dataset(SCENARIO_2, 80, [1, 2, 4])
    assert a.design.n == 80 and a.design.k == 2 and a.design.m == 2
    assert np.array_equal(a.design.delta_y, b.design.delta_y)
    assert not np.array_equal(a.design.delta_y, c.design.delta_y)
    assert a.raw.shape == (80, 4)


def test_covariate_laws():
    sc = replace(SCENARIO_1, h=2.0, delta=1.0)
    data = generate_dataset(sc, 20000, 0)
    cov = data.grid.values[:, 1:]
    np.testing.assert_allclose(cov.mean(axis=0), sc.means, atol=0.02)
    np.testing.assert_allclose(cov.std(axis=0), sc.spreads, rtol=0.03)
    var_reading = replace(sc, spread_is_variance=True)
    np.testing.assert_allclose(var_reading.sd, np.sqrt(sc.spreads))


def test_scenario_round_trip_and_validation():
    assert SimulationScenario.from_dict(SCENARIO_1.to_dict()) == SCENARIO_1
    with pytest.raises(ValueError):
        SimulationScenario.from_dict({**SCENARIO_1.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        replace(SCENARIO_1, main=(0, 2))
    with pytest.raises(ValueError):
        replace(SCENARIO_1, h=3.0)
    with pytest.raises(ValueError):
        replace(SCENARIO_1, sample_sizes=(5,))
    assert SCENARIO_1.true_beta.tolist() == [0.1, 0.2]


def test_unbiased_set_covers_true_support():
    specs = all_submodels(2)
    assert SCENARIO_1.unbiased_set(specs) == (3,)
    sparse = replace(SCENARIO_1, alpha=(0.1, 0.2, 0.0, 0.4))
    assert sparse.unbiased_set(specs) == (2, 3)


def test_monte_carlo_is_reproducible():
    sc = replace(SCENARIO_1, seed=3)
    a = run_monte_carlo(sc, 60, replications=15, baseline=True)
    b = run_monte_carlo(sc, 60, replications=15, baseline=True)
    assert a == b
    assert a.replications == 15 and a.failures == 0
    assert len(a.mse) == 2 and a.mse2 > 0


def test_tables_round_trip(tmp_path):
    sc = replace(SCENARIO_2, sample_sizes=(40,), comparison_sizes=(40,), replications=5, comparison_replications=4)
    report = run_scenario(sc)
    paths = emit_tables(report, tmp_path)
    assert {p.name for p in paths} >= {"scenario2_coefficients_n40.csv", "scenario2_comparison.csv"}
    back = read_tables(tmp_path, "scenario2")
    table = lambda r: (r.n, r.replications, r.failures, r.real_value, r.simulated_value, r.deviation, r.mse)
    assert [table(r) for r in back.coefficient_rows] == [table(r) for r in report.coefficient_rows]
    assert [(r.n, r.mse1, r.mse2) for r in back.comparison_rows] == [
        (r.n, r.mse1, r.mse2) for r in report.comparison_rows
    ]
    header = (tmp_path / "scenario2_coefficients_n40.csv").read_text().splitlines()[0]
    assert header == "real_value,simulated_value,deviation,mse"


def test_failures_are_skipped_then_abort(monkeypatch):
    real = simulation.generate_dataset

    def flaky(scenario, n, seed):
        if seed[2] in fail_at:
            raise IntegrationOverflowError("k1", 0.0)
        return real(scenario, n, seed)

    monkeypatch.setattr(simulation, "generate_dataset", flaky)
    fail_at = {7}
    row = run_monte_carlo(SCENARIO_1, 40, replications=200)
    assert row.failures == 1
    fail_at = {1, 2, 3}
    with pytest.raises(ReplicationFailureError) as info:
        run_monte_carlo(SCENARIO_1, 40, replications=200)
    assert info.value.failures == 3 and len(info.value.messages) == 3


def test_linear_baseline_edge_cases():
    dy = np.array([1.0, 2.0, 3.0, 6.0])
    assert linear_baseline_fit(np.empty((4, 0)), dy, (), ()) == pytest.approx(np.var(dy))
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(50, 3))
    dy = raw @ [1.0, -1.0, 0.5]
    assert linear_baseline_fit(raw, dy, (0,), (1, 2)) < 1e-20


def test_loss_diagnostic_rows(tmp_path):
    rows = run_loss_diagnostic(SCENARIO_1, (50,), 3, grid_densities=(5, 3, 3))
    assert len(rows) == 1 and rows[0].n == 50 and rows[0].median_ratio >= 1.0
    path = emit_diagnostic(rows, tmp_path, "x")
    assert path.read_text().splitlines()[0] == "n,replications,failures,median_ratio,mean_ratio,max_ratio"
