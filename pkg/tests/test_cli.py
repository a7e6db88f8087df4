import json

import numpy as np
import pytest

from btwalk import cli
from btwalk._io import read_csv, write_csv
from btwalk.stats import loglog_fit


def run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def summary(tmp_path, stem):
    return json.loads((tmp_path / f"{stem}.summary.json").read_text())


def test_env_report_a(tmp_path):
    assert run(tmp_path, "env-report", "--law", "A") == 0
    s = summary(tmp_path, "env_report")
    assert s["kappa"] == pytest.approx(3.0, abs=1e-9)
    assert len(s["conditions"]) >= 4 and all(c["ok"] for c in s["conditions"])
    header, rows = read_csv(tmp_path / "env_report.csv")
    assert header == ["t", "psi"]
    psi = {float(t): float(v) for t, v in rows}
    assert psi[1.0] == pytest.approx(1.0) and psi[3.0] == pytest.approx(1.0)


def test_env_report_bad_psi(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"branches": [{"prob": "1", "weights": ["0.45", "0.45"]}]}))
    assert run(tmp_path, "env-report", "--law", str(p)) == 3
    err = capsys.readouterr().err
    assert "psi(1) = 1" in err


def test_lattice_law_warns_but_runs(tmp_path):
    p = tmp_path / "lat.json"
    p.write_text(json.dumps({"branches": [{"prob": "1", "weights": ["0.5", "0.5"]}]}))
    assert run(tmp_path, "env-report", "--law", str(p)) == 0
    rows = {c["name"]: c for c in summary(tmp_path, "env_report")["conditions"]}
    assert not rows["non-lattice support (heuristic)"]["ok"]


def test_unknown_field(tmp_path, capsys):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"samplez": 10}))
    assert run(tmp_path, "env-report", "--config", str(c)) == 3
    assert "samplez" in capsys.readouterr().err


@pytest.mark.parametrize("fld,val", [("samples", 0), ("seed", -1), ("format", "xml"), ("freeze_eps", 2.0)])
def test_invalid_values_name_field(fld, val):
    with pytest.raises(cli.ConfigError) as ei:
        cli.ScenarioConfig.from_mapping({fld: val}).validate()
    assert ei.value.field == fld


def test_missing_law_file(tmp_path, capsys):
    assert run(tmp_path, "env-report", "--law", str(tmp_path / "nope.json")) == 3
    assert "law" in capsys.readouterr().err


def test_determinism_and_replicas(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["tail-maxl", "--law", "B", "--samples", "400", "--seed", "11", "--replicas", "3"]
    assert cli.main(args + ["--out", str(a)]) in (0, 2)
    assert cli.main(args + ["--out", str(b)]) in (0, 2)
    assert (a / "tail_maxl.csv").read_bytes() == (b / "tail_maxl.csv").read_bytes()


def test_worker_count_does_not_change_output(tmp_path, monkeypatch):
    args = ["nbm-check", "--samples", "2000", "--seed", "3", "--replicas", "2"]
    monkeypatch.setenv("BTW_THREADS", "1")
    cli.main(args + ["--out", str(tmp_path / "one")])
    monkeypatch.setenv("BTW_THREADS", "2")
    cli.main(args + ["--out", str(tmp_path / "two")])
    assert (tmp_path / "one" / "nbm_check.csv").read_bytes() == (tmp_path / "two" / "nbm_check.csv").read_bytes()


def test_csv_header_notes(tmp_path):
    run(tmp_path, "pij-table", "--law", "A")
    text = (tmp_path / "pij_table.csv").read_text()
    assert text.startswith("#")


def test_json_format(tmp_path):
    assert run(tmp_path, "env-report", "--format", "json") == 0
    d = json.loads((tmp_path / "env_report.json").read_text())
    assert d["header"] == ["t", "psi"]


def test_tail_maxl_b_slope(tmp_path):
    # desk-scale version of the slope-row example; the full-size run is an acceptance criterion
    assert run(tmp_path, "tail-maxl", "--law", "B", "--samples", "20000", "--seed", "5") in (0, 2)
    s = summary(tmp_path, "tail_maxl")
    assert abs(s["fit"]["slope"] + 1.0) < 0.3


def test_plot_deterministic(tmp_path):
    x = np.geomspace(1, 100, 20)
    write_csv(tmp_path / "s.csv", ["x", "S"], list(zip(x.tolist(), (1 / x).tolist())))
    cli.emit_plot(tmp_path / "s.csv", tmp_path / "a.svg")
    cli.emit_plot(tmp_path / "s.csv", tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_plot_empty_series(tmp_path):
    write_csv(tmp_path / "e.csv", ["x", "S"], [])
    assert cli.emit_plot(tmp_path / "e.csv", tmp_path / "e.svg") is None
    svg = (tmp_path / "e.svg").read_text()
    assert "<svg" in svg and "slope" not in svg


def test_plot_pareto_slope_matches_fit(tmp_path):
    rng = np.random.default_rng(0)
    s = rng.pareto(1.5, 50_000) + 1
    g = np.geomspace(1, 30, 15)
    S = np.array([(s >= v).mean() for v in g])
    write_csv(tmp_path / "p.csv", ["x", "S"], list(zip(g.tolist(), S.tolist())))
    slope = cli.emit_plot(tmp_path / "p.csv", tmp_path / "p.svg")
    assert slope == pytest.approx(loglog_fit(g, S)[0], rel=1e-12)
    assert f"slope {slope:.3f}" in (tmp_path / "p.svg").read_text()


def test_plot_two_series_overlay(tmp_path):
    assert run(tmp_path, "maxln-converge", "--law", "B", "--samples", "40", "--n", "5",
               "--plot", str(tmp_path / "m.svg")) in (0, 2)
    header, _ = read_csv(tmp_path / "maxln_converge.plot.csv")
    assert len(header) == 3


def test_malformed_csv(tmp_path):
    (tmp_path / "bad.csv").write_text("x,S\n1,abc\n")
    with pytest.raises(cli.MalformedCSV):
        cli.emit_plot(tmp_path / "bad.csv", tmp_path / "bad.svg")


def test_plot_without_series_is_config_error(tmp_path):
    assert run(tmp_path, "pij-table", "--plot", str(tmp_path / "x.svg")) == 3


@pytest.mark.parametrize("sc,extra", [
    ("mto-check", ["--samples", "20000"]),
    ("spine-check", ["--samples", "300"]),
    ("tree-equivalence", ["--samples", "3000", "--law", "B"]),
    ("ladder-report", ["--samples", "2000"]),
])
def test_assertion_scenarios_pass(tmp_path, sc, extra):
    assert run(tmp_path, sc, *extra) == 0
