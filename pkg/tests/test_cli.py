import csv
import json
import subprocess
import sys

import pytest

from greedyrates import __version__, cli
from greedyrates.errors import NumericError

RATE = {"seed": 3, "family": "minus", "n_values": [16, 64, 256], "replications": 10}
AUDIT = {"seed": 1, "x_points": 11, "a_points": 11, "t_points": 50, "stability_trials": 200,
         "envelope_trials": 200}
LEMMAS = {"seed": 2, "n_mc": 2000, "trials": 2}
TV = {"seed": 0, "densities": [{"kind": "uniform"}, {"kind": "spike", "name": "atom"}]}


def run(tmp_path, command, config, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    out = tmp_path / f"out-{command}-{len(list(tmp_path.iterdir()))}"
    code = cli.main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def read_csv(out):
    with open(out / "report.csv") as fh:
        header = fh.readline()
        rows = list(csv.reader(fh))
    return header, rows


def test_rate_outputs(tmp_path):
    code, out = run(tmp_path, "rate", RATE)
    assert code == 0
    header, rows = read_csv(out)
    assert header.startswith("# greedyrates rate report csv-v") and f"version={__version__}" in header
    assert rows[0][:3] == ["n", "mean_regret", "ci95"] and len(rows) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"] == RATE and summary["version"] == __version__
    assert "fitted_exponent" in summary


def test_rate_byte_identical_reruns(tmp_path):
    _, a = run(tmp_path, "rate", RATE)
    _, b = run(tmp_path, "rate", RATE)
    _, c = run(tmp_path, "rate", RATE, "--workers", "2")
    for name in ("report.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_seed_override(tmp_path):
    _, a = run(tmp_path, "rate", RATE, "--seed", "99")
    summary = json.loads((a / "summary.json").read_text())
    assert summary["seed"] == 99 and summary["config"]["seed"] == 99
    _, b = run(tmp_path, "rate", {**RATE, "seed": 99})
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()


@pytest.mark.parametrize("config", [
    {k: v for k, v in RATE.items() if k != "seed"},
    {**RATE, "p": 0.5, "q": 1.0},
    {**RATE, "colour": "blue"},
    {**RATE, "n_values": []},
])
def test_rate_config_errors(tmp_path, config, capsys):
    code, _ = run(tmp_path, "rate", config)
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_p_below_q_message_names_precondition(tmp_path, capsys):
    run(tmp_path, "rate", {**RATE, "p": 0.5, "q": 1.0})
    assert "p >= q" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    assert cli.main(["rate", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["rate", "--config", str(bad)]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(config, workers=1):
        raise NumericError("diverged")
    monkeypatch.setitem(cli.COMMANDS, "rate", boom)
    code, _ = run(tmp_path, "rate", RATE)
    assert code == 3


def test_audit_clean_and_forced_violation(tmp_path):
    code, out = run(tmp_path, "audit", AUDIT)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["total_violations"] == 0 and summary["audits"]
    code, out = run(tmp_path, "audit", {**AUDIT, "bound_scale": 0.0})
    assert code == 4
    assert json.loads((out / "summary.json").read_text())["total_violations"] > 0


def test_audit_empty_lattice(tmp_path):
    assert run(tmp_path, "audit", {**AUDIT, "x_points": 0})[0] == 2


def test_lemmas_default_and_tampered(tmp_path):
    code, out = run(tmp_path, "lemmas", LEMMAS)
    assert code == 0
    _, rows = read_csv(out)
    assert {r[0] for r in rows[1:]} == {"truncation", "inverse_moment", "holder", "sign_power"}
    assert run(tmp_path, "lemmas", {**LEMMAS, "rhs_scale": 0.0})[0] == 4


def test_lemmas_bad_exponents(tmp_path):
    assert run(tmp_path, "lemmas", {**LEMMAS, "holder": [{"p": 1.5, "q": 1.5}]})[0] == 2
    assert run(tmp_path, "lemmas", {**LEMMAS, "inverse_moment": [{"m": 2.0, "alpha": 0.7}]})[0] == 2


def test_tv_fits_and_atom_flag(tmp_path):
    code, out = run(tmp_path, "tv", TV)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    fits = {f["name"]: f for f in summary["fits"]}
    assert fits["uniform-0"]["q_bar"] == pytest.approx(1.0, abs=0.05) and fits["uniform-0"]["regular"]
    assert summary["irregular"] == ["atom"]


def test_tv_unnormalized_density(tmp_path):
    dens = tmp_path / "dens.csv"
    dens.write_text("w0,density\n0,2\n0.5,2\n1,2\n")
    assert run(tmp_path, "tv", {"seed": 0, "densities": [{"kind": "csv", "path": str(dens)}]})[0] == 2


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "tv.json"
    cfg.write_text(json.dumps({"seed": 0, "densities": [{"kind": "uniform"}]}))
    res = subprocess.run([sys.executable, "-m", "greedyrates", "tv", "--config", str(cfg),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "summary.json").exists()
