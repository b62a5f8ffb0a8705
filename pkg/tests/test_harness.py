"""Config round-trip, CLI error contract and the per-command outputs."""

import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rtelab.harness import ConfigError, ExperimentConfig, load_config, run
from rtelab.harness import runner
from rtelab.harness.cli import main
from rtelab.harness.runner import SUMMARY_KEYS, write_csv
from rtelab.entropy import profile_seminorm
from rtelab.transport import kernel_hat

SMALL_GRID = {"n_r": 12, "n_theta": 16, "n_dir": 16}


def small_config(tmp_path, **kw):
    d = {"epsilon": [0.2], "L": 2, "grid": SMALL_GRID, "out": str(tmp_path / "out")}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def read_csv(path):
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        rows = list(csv.reader(fh))
    return first, rows[0], rows[1:]


# ---- config ----------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".yaml", ".json"])
def test_config_round_trip(tmp_path, suffix):
    cfg = ExperimentConfig.from_dict({"epsilon": [0.3, 0.07], "absorption": {"family": "bump", "center": [0.1, -0.2],
                                                                               "width": 0.3}, "seed": 2**63 + 5})
    path = tmp_path / f"cfg{suffix}"
    cfg.save(path)
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_config_hash_ignores_output_and_workers():
    a = ExperimentConfig()
    assert a.config_hash() == a.with_overrides(out="elsewhere", workers=4).config_hash()
    assert a.config_hash() != a.with_overrides(seed=1).config_hash()
    assert len(a.config_hash()) == 16


def test_yaml_numeric_strings_are_coerced(tmp_path):
    # PyYAML reads 1e-3 (no dot) as a string
    path = tmp_path / "c.yaml"
    path.write_text("epsilon: [1e-1, 5e-2]\ndelta: 1e-3\ngrid: {n_dir: '32'}\n")
    cfg = load_config(path)
    assert cfg.epsilon == [0.1, 0.05]
    assert cfg.delta == [1e-3]
    assert cfg.grid.n_dir == 32


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"grid": {"n_points": 3}},
    {"epsilon": [0.0]},
    {"epsilon": [0.9]},
    {"epsilon": ["abc"]},
    {"L": 2.5},
    {"tau": 1.0},
    {"s": 1.0},
    {"delta": [0.5]},
    {"grid": {"n_dir": 30}},
    {"absorption": {"family": "plaid"}},
    {"absorption": {"family": "constant", "amplitude": 0.9}},
    {"absorption": {"family": "bump", "center": [0.8, 0.0], "width": 0.3}},
    {"sweep": ["sweep"]},
    {"seed": -1},
    {"d": 3},
])
def test_invalid_config_rejected(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


# ---- CLI contract ----------------------------------------------------------


def _cli_error(capsys, argv):
    code = main(argv)
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2
    assert len(err) == 1 and err[0].startswith("error: ")
    return json.loads(err[0][len("error: "):])


def test_cli_invalid_config_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epsilon: [2.0]\n")
    payload = _cli_error(capsys, ["omega", "--config", str(bad)])
    assert payload["type"] == "ConfigError" and "epsilon" in payload["message"]


def test_cli_unparsable_and_missing_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epsilon: [0.1\n  - :\n")
    assert _cli_error(capsys, ["omega", "--config", str(bad)])["type"] == "ConfigError"
    assert _cli_error(capsys, ["omega", "--config", str(tmp_path / "none.yaml")])["type"] == "ConfigError"


def test_cli_success_line(tmp_path, capsys):
    code = main(["omega", "--out", str(tmp_path / "o")])
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert code == 0 and line["status"] == "ok" and line["failures"] == 0
    assert (tmp_path / "o" / "summary.json").exists()


# ---- outputs ---------------------------------------------------------------


def test_write_csv_format(tmp_path):
    p = write_csv(tmp_path / "x.csv", ["a", "b", "c"], [(0.1, 3, True), (np.float64(1 / 3), np.int64(2), False)], "abc")
    lines = p.read_text().splitlines()
    assert lines == ["# config_hash=abc", "a,b,c", "0.10000000000000001,3,true", "0.33333333333333331,2,false"]


def test_kernelcheck_outputs(tmp_path):
    cfg = small_config(tmp_path)
    status, summary = run("kernelcheck", cfg)
    assert status == 0
    assert set(SUMMARY_KEYS) <= set(summary)
    assert summary["headline"]["passed"] and summary["headline"]["max_abs_diff"] <= 1e-6
    first, header, rows = read_csv(tmp_path / "out" / "kernelcheck.csv")
    assert first == f"# config_hash={cfg.config_hash()}"
    assert header == ["a", "closed_form", "quadrature", "abs_diff"]
    a = np.array([float(r[0]) for r in rows])
    closed = np.array([float(r[1]) for r in rows])
    # 17 significant digits reproduce the doubles exactly
    assert np.array_equal(closed, kernel_hat(a * cfg.sigma_s / cfg.epsilon[0], cfg.epsilon[0], cfg.sigma_s))
    on_disk = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert on_disk["config_hash"] == cfg.config_hash()


def test_matrix_zero_absorption_is_zero_map(tmp_path):
    cfg = small_config(tmp_path, epsilon=[0.2, 0.1])
    status, summary = run("matrix", cfg)
    assert status == 0
    assert summary["headline"]["zero_map"] is True
    assert {"gamma_eps0p2.csv", "singular_values_eps0p1.csv"} <= set(summary["files"])


def test_matrix_nonzero_absorption_is_not_zero_map(tmp_path):
    cfg = small_config(tmp_path, absorption={"family": "radial_bump", "amplitude": 0.5, "width": 0.45})
    status, summary = run("matrix", cfg)
    assert status == 0 and summary["headline"]["zero_map"] is False
    assert summary["headline"]["norms"]["0.2"]["norm_chain"]


def test_omega_marks_out_of_regime(tmp_path):
    cfg = small_config(tmp_path, omega_t=[0.1, 5.0], omega_epsilon=[0.0, 0.2])
    status, summary = run("omega", cfg)
    _, header, rows = read_csv(tmp_path / "out" / "omega.csv")
    status_col = [r[header.index("status")] for r in rows]
    assert status == 0
    assert status_col == ["ok", "ok", "out-of-regime", "ok"]
    assert summary["headline"]["solved"] == 3


def test_entropy_csv(tmp_path):
    cfg = small_config(tmp_path, delta=[1e-2, 1e-4])
    run("entropy", cfg)
    _, header, rows = read_csv(tmp_path / "out" / "entropy.csv")
    assert len(rows) == 2
    ls = [int(r[header.index("l")]) for r in rows]
    assert ls[0] <= ls[1]


def test_case_failure_gives_exit_one(tmp_path, monkeypatch):
    def boom(ctx):
        raise RuntimeError("synthetic")

    monkeypatch.setitem(runner._COMMANDS, "omega", boom)
    cfg = small_config(tmp_path, sweep=["omega", "kernelcheck"], workers=2)
    status, summary = run("sweep", cfg)
    assert status == 1 and summary["status"] == "failed"
    assert summary["failures"][0]["case"] == "omega: omega"
    assert summary["headline"]["kernelcheck"]["passed"]
    assert (tmp_path / "out" / "kernelcheck" / "summary.json").exists()


def test_probe_small(tmp_path):
    cfg = small_config(tmp_path, epsilon=[0.2, 0.1], L=1)
    status, summary = run("probe", cfg)
    assert status == 0
    h = summary["headline"]
    assert h["cells"] >= 2 and len(h["op_norms"]) == 2
    assert_allclose(h["cell_width"], (0.1 * profile_seminorm(2) / 150.0) ** 0.5, rtol=1e-12)
