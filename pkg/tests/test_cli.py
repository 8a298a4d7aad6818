import json

import pytest

from odefma import __version__
from odefma.cli import main

FAST_SIM = ["--replications", "6", "--comparison-replications", "3", "--sizes", "40", "--comparison-sizes", "40"]


def _tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_fit_default_sample(tmp_path, capsys):
    assert main(["fit", "--output", str(tmp_path)]) == 0
    names = set(_tree(tmp_path))
    assert {"report.json", "manifest.json", "levels.csv", "differences.csv", "residual_qq.csv"} <= names
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["weights"]) == 7 and "linear" not in report
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["version"] == __version__
    assert manifest["config"]["main"] == ["y1", "y4", "y6"]
    assert "Model 1" in capsys.readouterr().out


def test_fit_compare_linear(tmp_path):
    assert main(["fit", "--compare-linear", "--output", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["comparison"]) == {"differential", "linear averaged"}


def test_fit_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--compare-linear", "--output", str(a)]) == 0
    assert main(["fit", "--compare-linear", "--output", str(b)]) == 0
    assert _tree(a) == _tree(b)


def test_fit_missing_dataset(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--output", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_fit_bad_csv_reports_location(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,y0,y1,y2,y3,y4,y5,y6,y7,y8\n2020-01-31,1,2,3,4,5,6,7,8,oops\n")
    assert main(["fit", "--data", str(bad), "--output", str(tmp_path / "o")]) == 2
    assert "row 2" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ODEFMA_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["fit"]) == 0
    assert (tmp_path / "env" / "report.json").exists()


def test_config_file_sections(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[optimizer]\nc_bar = 3.0\n\n[fit]\nfamily = "all"\nh = 2.0\n')
    assert main(["fit", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["family"] == "all"
    assert manifest["config"]["optimizer"]["c_bar"] == 3.0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(report["weights"]) == 32


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[fit]\nunknown_key = 1\n")
    assert main(["fit", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    cfg.write_text("[fit]\nh = = 2\n")
    assert main(["fit", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenario", "scenario1", "--seed", "7", *FAST_SIM, "--output", str(a)]) == 0
    assert main(["simulate", "--scenario", "scenario1", "--seed", "7", *FAST_SIM, "--output", str(b)]) == 0
    assert _tree(a) == _tree(b)
    assert "scenario1_coefficients_n40.csv" in _tree(a)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["scenario"]["replications"] == 6


def test_simulate_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[scenario]\nname = "x"\nalpha = [1, 2\n')
    assert main(["simulate", "--scenario", str(bad), "--seed", "1"]) == 2
    assert "line" in capsys.readouterr().err


def test_simulate_requires_seed(tmp_path, capsys):
    text = (pytest.importorskip("odefma.cli").DATA_DIR / "scenario1.toml").read_text()
    unseeded = tmp_path / "s.toml"
    unseeded.write_text(text.replace("seed = 0\n", ""))
    assert main(["simulate", "--scenario", str(unseeded), *FAST_SIM, "--output", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["simulate", "--scenario", str(unseeded), "--seed", "2", *FAST_SIM, "--output", str(tmp_path / "o")]) == 0


def test_diagnose_single_row(tmp_path):
    assert main(["diagnose", "--sizes", "50", "--replications", "1", "--output", str(tmp_path)]) == 0
    lines = (tmp_path / "scenario1_loss_ratio.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("50,1,0,")


def test_diagnose_rejects_real_data(tmp_path, capsys):
    assert main(["diagnose", "--data", "market.csv", "--output", str(tmp_path)]) == 2
    assert "synthetic" in capsys.readouterr().err


def test_diagnose_surfaces_infeasibility(tmp_path, capsys):
    code = main(["diagnose", "--sizes", "50", "--replications", "1", "--rho", "1", "--unbiased", "3", "--output", str(tmp_path)])
    assert code == 3
    assert "unbiased-model mass" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
