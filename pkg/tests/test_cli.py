import json

import pytest

from diffusion_workbench.cli import main
from diffusion_workbench.series import ingest_series


@pytest.fixture
def simulated(tmp_path):
    path = tmp_path / "syn.csv"
    argv = ["simulate", "--q", "0.3", "--m", "1000", "--y0", "2", "--shock", "F3:A=8,a=10,c=1",
            "--sigma", "2", "--seed", "3", "--country", "SYN", "--out", str(path)]
    assert main(argv) == 0
    return path


def test_simulate_writes_readable_series(simulated):
    (s,) = ingest_series(simulated)
    assert s.country == "SYN" and len(s) == 25 and s.years[0] == 1992


def test_validate(simulated, tmp_path, capsys):
    assert main(["validate", "--series", str(simulated)]) == 0
    assert "SYN: 25 observations" in capsys.readouterr().out
    targets = tmp_path / "t.csv"
    targets.write_text("country,min_target_mw,long_target_mw\nXXX,10,\n")
    assert main(["validate", "--series", str(simulated), "--targets", str(targets)]) == 1
    assert "SYN: no target row" in capsys.readouterr().out


def test_validate_flags_bad_country(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("country,year,cumulative_mw\nAAA,2000,1\nAAA,2001,3\nBBB,2000,5\nBBB,2001,4\n")
    assert main(["validate", "--series", str(path)]) == 1
    out = capsys.readouterr().out
    assert "AAA: 2 observations" in out and "BBB: INVALID" in out


def test_fit_and_forecast(simulated, tmp_path, capsys):
    report = tmp_path / "fit.json"
    argv = ["fit", "--series", str(simulated), "--country", "SYN", "--m", "1000",
            "--max-shocks", "1", "--forms", "F3", "--out", str(report)]
    assert main(argv) == 0
    doc = json.loads(report.read_text())
    assert doc["fit"]["model"]["label"] == "F3"
    assert doc["fit"]["model"]["q"] == pytest.approx(0.3, rel=0.1)
    capsys.readouterr()
    assert main(["forecast", "--report", str(report), "--horizon", "2030"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "t,year,cumulative_mw,annual_rate_mw"
    assert len(lines) == 1 + 12 * (2030 - 1992) + 1


def test_fit_without_market_potential_is_refused(simulated, capsys):
    assert main(["fit", "--series", str(simulated), "--country", "SYN"]) == 1
    assert "market potential" in capsys.readouterr().err


def test_run_missing_target_exit_code(simulated, tmp_path, capsys):
    targets = tmp_path / "t.csv"
    targets.write_text("country,min_target_mw,long_target_mw\nXXX,5,\n")
    out = tmp_path / "out"
    assert main(["run", "--series", str(simulated), "--targets", str(targets), "--out", str(out)]) == 1
    assert "SYN" in capsys.readouterr().err
    assert not out.exists()


def test_run_and_replay_manifest(simulated, tmp_path):
    targets = tmp_path / "t.csv"
    targets.write_text("country,min_target_mw,long_target_mw\nSYN,1000,\n")
    first, second = tmp_path / "a", tmp_path / "b"
    argv = ["run", "--series", str(simulated), "--targets", str(targets), "--max-shocks", "1",
            "--horizon", "2035", "--out", str(first)]
    assert main(argv) == 0
    assert main(["run", "--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    for name in ("summary.csv", "countries/SYN.json", "plots/SYN_forecast.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_cluster_command(tmp_path, capsys):
    points = tmp_path / "p.csv"
    rows = ["country,q,efficacy"]
    for i, (q, e) in enumerate([(0.1, 1), (0.5, 1), (0.3, 20)]):
        for j in range(4):
            rows.append(f"C{i}{j},{q + 0.01 * j},{e + 0.1 * j}")
    points.write_text("\n".join(rows) + "\n")
    assert main(["cluster", "--points", str(points), "--k-max", "5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["k"] == 3


def test_bad_shock_argument_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--q", "0.3", "--m", "10", "--shock", "F3:A=1", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 2
