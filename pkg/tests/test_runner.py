import json
import math

import pytest

from decoquench import __version__
from decoquench.cli import main
from decoquench.runner import (OUTPUT_ROOT_ENV, ConfigError, analyze, expected_exponents,
                               parse_config, run_experiment)

MINIMAL = """
[experiment]
kind = momentum_quench
[schedule]
tau = 64
gamma = 0
"""


def momentum_cfg(out, taus="4, 8, 16", n=24, extra=""):
    return f"""
[experiment]
kind = momentum_quench
output = {out}
workers = 1
[schedule]
tau = {taus}
gamma = 0
[grid]
n = {n}
[observables]
snapshots = 81
{extra}
"""


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.runs() == [(64.0, 0.0)]
    assert cfg.n == 128 and cfg.k_max is None and cfg.t0 is None and cfg.tf is None
    assert cfg.method == "auto" and cfg.snapshots == 201


def test_negative_gamma_names_key():
    with pytest.raises(ConfigError, match="schedule.gamma"):
        parse_config(MINIMAL.replace("gamma = 0", "gamma = -1"))


def test_nonpositive_tau():
    with pytest.raises(ConfigError, match="schedule.tau"):
        parse_config(MINIMAL.replace("tau = 64", "tau = 0"))


def test_unknown_keys_listed():
    with pytest.raises(ConfigError, match="schedule.speed.*grid.colour"):
        parse_config(MINIMAL + "speed = 3\n[grid]\ncolour = red\n")


def test_missing_kind():
    with pytest.raises(ConfigError, match="kind"):
        parse_config("[schedule]\ntau = 1\n")


def test_gamma_rule_expansion():
    cfg = parse_config(MINIMAL.replace("tau = 64", "tau = 16, 32, 64").replace(
        "gamma = 0", "gamma_rule = gamma = 10 * tau ^ 0.5"))
    runs = cfg.runs()
    assert [t for t, _ in runs] == [16, 32, 64]
    assert [g for _, g in runs] == pytest.approx([40, 10 * math.sqrt(32), 80])


def test_config_round_trip():
    text = momentum_cfg("x", extra="hall_T = 3.5\n[lattice]\nseeds = 0-3, 9\nL = 12\n")
    cfg = parse_config(text)
    assert cfg.seeds == [0, 1, 2, 3, 9]
    assert parse_config(cfg.to_text()) == cfg
    rule = parse_config(MINIMAL.replace("gamma = 0", "gamma_rule = 2 * tau ^ 0.5"))
    assert parse_config(rule.to_text()) == rule


def test_momentum_sweep_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = parse_config(momentum_cfg("a"))
    man = run_experiment(cfg)
    assert man.status == "complete" and man.exit_code == 0
    first = {f: (tmp_path / "a" / f).read_bytes() for f in man.files}
    assert "summary.csv" in first and len(first) == 2 * 3 + 1
    man2 = run_experiment(cfg)
    assert {f: (tmp_path / "a" / f).read_bytes() for f in man2.files} == first
    data = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert data["version"] == __version__ and data["config_hash"] == cfg.digest()
    assert set(data["files"]) == set(first)


def test_fig5_gamma_values_give_three_series(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    text = momentum_cfg("g", taus="16", n=24).replace("gamma = 0", "gamma = 0, 4, 40")
    man = run_experiment(parse_config(text))
    assert sorted(f for f in man.files if f.endswith("_observables.csv")) == [
        "run000_observables.csv", "run001_observables.csv", "run002_observables.csv"]


def test_censored_run_recorded_and_sweep_continues(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    # tau = 400 freezes out near t = 20, so a window ending at t = 0.5 sees no relaxation
    text = momentum_cfg("p", taus="1, 400").replace("gamma = 0", "gamma = 0\ntf = 0.5")
    man = run_experiment(parse_config(text))
    assert man.status == "partial" and man.exit_code == 3
    assert len(man.runs) == 2
    assert "relaxation incomplete" in man.runs[1]["error"]


def test_lattice_quench_files(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    text = """
[experiment]
kind = lattice_quench
output = lat
workers = 1
[schedule]
tau = 2
gamma = 0
[lattice]
L = 6
seeds = 0, 1
"""
    man = run_experiment(parse_config(text))
    fex = [f for f in man.files if f.endswith("_fex.csv")]
    assert len(fex) == 2
    assert "ensemble_summary.csv" in man.files


def test_analyze_reports_expected_columns(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    run_experiment(parse_config(momentum_cfg("sweep", taus="16, 64, 256", n=48)))
    text = f"""
[experiment]
kind = analyze
output = fit
[analyze]
manifests = {tmp_path / 'sweep' / 'manifest.json'}
quantity = t_half
against = tau
"""
    man = analyze(parse_config(text))
    assert man.status == "complete"
    report = (tmp_path / "fit" / "fit_report.csv").read_text().splitlines()
    assert report[0] == "label,exponent,prefactor,residual,n_points"
    exponent = float(report[1].split(",")[1])
    assert exponent == pytest.approx(0.5, abs=0.1)
    summary = (tmp_path / "fit" / "fit_summary.txt").read_text()
    assert "0.5, 0.6667" in summary


def test_expected_exponent_table():
    assert expected_exponents("t_half", "tau") == pytest.approx((0.5, 2 / 3))
    assert expected_exponents("xi_mean", "tau") == pytest.approx((0.5, 1 / 3))


def test_analyze_errors(tmp_path):
    with pytest.raises(ConfigError, match="manifests"):
        parse_config("[experiment]\nkind = analyze\n")
    cfg = parse_config(f"[experiment]\nkind = analyze\noutput = {tmp_path}/o\n"
                       f"[analyze]\nmanifests = {tmp_path}/nope/manifest.json\n")
    with pytest.raises(FileNotFoundError, match="nope"):
        analyze(cfg)


def test_cli_verbs(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__
    good = tmp_path / "good.ini"
    good.write_text(momentum_cfg("cli", taus="4", n=16))
    bad = tmp_path / "bad.ini"
    bad.write_text(MINIMAL.replace("gamma = 0", "gamma = -2"))
    assert main(["validate", str(good)]) == 0
    assert main(["validate", str(bad)]) == 1
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(good)]) == 0
    assert (tmp_path / "cli" / "manifest.json").exists()
    missing = tmp_path / "an.ini"
    missing.write_text("[experiment]\nkind = analyze\n[analyze]\nmanifests = gone/manifest.json\n")
    assert main(["analyze", str(missing)]) == 2
