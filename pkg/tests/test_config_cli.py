import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flab import cli
from flab.config import Scenario, load_config, parse_ladder
from flab.diffusion import read_path_dump
from flab.errors import ConfigInvalid


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.run([*argv, "--out", str(out)])
    report = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else None
    return code, report, out


# -- scenario and config files -----------------------------------------------------------------

def test_scenario_round_trip():
    sc = Scenario(command="diffusion", preset="ou", grid={"lo": -1.0, "hi": 1.0, "step": 0.5},
                  times=[0.5, 1.0], indicators=["x(1) > 0"], weight=[1.0, 0.0, 2.0])
    again = Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert again == sc


@given(st.integers(0, 2 ** 64 - 1), st.floats(1e-6, 1.0), st.integers(1, 10 ** 6))
def test_scenario_round_trip_property(seed, dt, n):
    sc = Scenario(command="extended", seed=seed, dt=dt, n_paths=n)
    assert Scenario.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc


@pytest.mark.parametrize("data", [
    {},
    {"preset": "bm"},
    {"command": "fly"},
    {"command": "axioms", "bogus": 1},
    {"command": "diffusion", "dt": 0},
    {"command": "diffusion", "n_paths": 1.5},
    {"command": "diffusion", "seed": -1},
    {"command": "axioms", "grid": {"lo": 1, "hi": 0, "step": 0.1}},
    {"command": "axioms", "grid": {"lo": 0, "hi": 1}},
    {"command": "axioms", "times": [-1.0]},
    {"command": "counterexample", "t_ladder": [0.0]},
])
def test_scenario_rejects(data):
    with pytest.raises(ConfigInvalid):
        Scenario.from_dict(data)


def test_load_toml_and_json(tmp_path):
    (tmp_path / "a.toml").write_text('command = "poly"\npreset = "ou"\ntimes = [0.5, 1.0]\n')
    (tmp_path / "a.json").write_text('{"command": "poly", "preset": "ou", "times": [0.5, 1.0]}')
    assert load_config(tmp_path / "a.toml") == load_config(tmp_path / "a.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.json")


@pytest.mark.parametrize("text, expected", [
    ("1e-1..1e-6", [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]),
    ("1e-3..1e-1", [1e-3, 1e-2, 1e-1]),
    ("1..1e-2", [1.0, 0.1, 0.01]),
    ("0.5, 0.25,0.125", [0.5, 0.25, 0.125]),
])
def test_parse_ladder(text, expected):
    assert parse_ladder(text) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("text", ["2e-1..1e-3", "a..b", "0..1e-2", "1,x"])
def test_parse_ladder_rejects(text):
    with pytest.raises(ConfigInvalid):
        parse_ladder(text)


# -- exit codes ----------------------------------------------------------------------------

def test_axioms_contraction_passes(tmp_path):
    code, rep, _ = run(tmp_path, "axioms", "--preset", "transport-contraction")
    assert code == 0 and rep["passed"]
    assert set(rep["verdicts"]) == {"P1", "P2", "P3", "P4", "P5"} and all(rep["verdicts"].values())


def test_counterexample_fails_p4(tmp_path):
    code, rep, out = run(tmp_path, "counterexample", "--alpha", "2", "--t-ladder", "1e-1..1e-6")
    assert code == 1 and rep["verdicts"]["P4"] is False
    assert rep["verdicts"]["forward_equations"]
    rows = (out / "blowup.csv").read_text().splitlines()
    assert rows[0] == "t,log_s,s_or_inf_flag,argmax_n,truncated"
    assert len(rows) == 7 and rows[-1].split(",")[2] == "inf"


@pytest.mark.parametrize("flag", ["p4", "P4"])
def test_counterexample_expected_failure(tmp_path, flag):
    code, rep, _ = run(tmp_path, "counterexample", "--t-ladder", "1e-1..1e-6", "--expect-fail", flag)
    assert code == 0 and rep["passed"]


def test_expect_fail_on_passing_verdict(tmp_path):
    code, _, _ = run(tmp_path, "axioms", "--preset", "identity", "--expect-fail", "P1")
    assert code == 1


def test_expect_fail_unknown_verdict(tmp_path):
    assert cli.run(["axioms", "--preset", "identity", "--expect-fail", "P9", "--out", str(tmp_path)]) == 2


def test_chain_axioms(tmp_path):
    assert run(tmp_path, "axioms", "--preset", "chain", name="a")[0] == 1
    code, rep, _ = run(tmp_path, "axioms", "--preset", "chain", "--expect-fail", "P4", name="b")
    assert code == 0 and rep["result"]["p4_blowup"]["increasing"]


def test_empty_config(tmp_path):
    cfg = tmp_path / "empty.json"
    cfg.write_text("")
    assert cli.run(["axioms", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("{}")
    assert cli.run(["axioms", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("argv", [
    ["axioms", "--preset", "nope"],
    ["transport"],
    ["approx", "--function", "tan"],
    ["approx", "--weight", "heavy"],
    ["approx", "--weight", "unit", "--degrees", "3,x"],
    ["extended", "--preset", "bm", "--indicator", "x(1) >"],
])
def test_bad_flags_exit_2(tmp_path, argv, capsys):
    assert cli.run([*argv, "--out", str(tmp_path)]) == 2
    assert "invalid config" in capsys.readouterr().err


def test_config_command_mismatch(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"command": "poly", "preset": "bm"}')
    assert cli.run(["axioms", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_runtime_finding_writes_report(tmp_path):
    code, rep, _ = run(tmp_path, "extended", "--preset", "ou", "--omega", "0", "--n-paths", "100", "--dt", "0.1")
    assert code == 1
    assert rep["verdicts"]["completed"] is False
    assert rep["result"]["error"]["type"] == "QuasiContractionViolated"


# -- other commands ---------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["contraction", "shift", "logistic", "linear-rk4"])
def test_transport_presets(tmp_path, preset):
    code, rep, out = run(tmp_path, "transport", "--preset", preset)
    assert code == 0, rep["verdicts"]
    assert (out / "operator_norm.csv").exists()


@pytest.mark.parametrize("preset", ["bm", "ou", "gbm"])
def test_poly_presets(tmp_path, preset):
    code, rep, out = run(tmp_path, "poly", "--preset", preset, "--degree", "3")
    assert code == 0
    assert len(rep["result"]["basis"]) == 4


def test_approx(tmp_path):
    code, rep, out = run(tmp_path, "approx", "--function", "sin", "--R", "10")
    assert code == 0
    errs = [r["error"] for r in rep["result"]["errors"]]
    assert errs[-1] < 0.1 * errs[0]


def test_approx_polynomial_weight(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('command = "approx"\nweight = [2.0, 0.0, 1.0]\nR = 11.0\ndegrees = [1, 3]\n')
    code, rep, _ = run(tmp_path, "approx", "--config", str(cfg))
    assert code == 0 and rep["config"]["weight"] == [2.0, 0.0, 1.0]


def test_diffusion_with_dump(tmp_path):
    dump = tmp_path / "paths.bin"
    code, rep, out = run(tmp_path, "diffusion", "--preset", "bm", "--n-paths", "500", "--dt", "0.01",
                         "--dump-paths", str(dump))
    assert code == 0
    arr = read_path_dump(dump)
    assert arr.shape == (500, 101, 1)
    np.testing.assert_array_equal(arr[:, 0, 0], 0.0)
    assert (out / "summary.csv").read_text().startswith("t,mean,mean_se")


def test_extended_bm(tmp_path):
    code, rep, out = run(tmp_path, "extended", "--preset", "bm", "--n-paths", "5000", "--dt", "0.01")
    assert code == 0
    assert len(rep["result"]["rn"]) == len(cli.DEFAULT_INDICATORS)


# -- determinism and audit trail ---------------------------------------------------------------

def test_csvs_byte_identical(tmp_path):
    argv = ["extended", "--preset", "bm", "--n-paths", "3000", "--dt", "0.01", "--seed", "5"]
    _, rep_a, a = run(tmp_path, *argv, name="a")
    _, rep_b, b = run(tmp_path, *argv, name="b")
    names = sorted(p.name for p in a.glob("*.csv"))
    assert names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    assert rep_a["verdicts"] == rep_b["verdicts"]


def test_csvs_identical_across_thread_counts(tmp_path, monkeypatch):
    argv = ["diffusion", "--preset", "ou", "--n-paths", "20000", "--dt", "0.05", "--seed", "2"]
    monkeypatch.setenv("FLAB_THREADS", "1")
    _, _, a = run(tmp_path, *argv, name="a")
    monkeypatch.setenv("FLAB_THREADS", "3")
    _, _, b = run(tmp_path, *argv, name="b")
    for n in ("summary.csv", "supermartingale.csv"):
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_csv_format(tmp_path):
    _, _, out = run(tmp_path, "poly", "--preset", "ou")
    raw = (out / "generator.csv").read_bytes()
    assert b"\r\n" not in raw and raw.endswith(b"\n")


def test_report_embeds_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "poly", "preset": "bm", "times": [0.25, 0.5], "degree": 4}))
    code, rep, _ = run(tmp_path, "poly", "--config", str(cfg), "--degree", "2")
    assert code == 0
    assert rep["config"]["times"] == [0.25, 0.5]
    assert rep["config"]["degree"] == 2  # flags override the file
    assert Scenario.from_dict(rep["config"]).preset == "bm"
    assert "timestamp" in rep["metadata"]


def test_decide():
    assert cli.decide({"a": True, "P4": False}, ["p4"])
    assert not cli.decide({"a": True, "P4": False}, [])
    with pytest.raises(ConfigInvalid):
        cli.decide({"a": True}, ["b"])
