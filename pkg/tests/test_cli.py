import csv
import hashlib
import json

import numpy as np
import pytest

from isaacslab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, resolve_scenario, run

FAST = ["--paths", "2000", "--steps", "100"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def manifest(out, stem):
    return json.loads((out / f"{stem}.manifest.json").read_text())


def test_validate_echoes_canonical_form(tmp_path, capsys):
    assert run(["validate", "sine_heat", "--out", str(tmp_path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("[model]") and 'f1 = ["u1_1 - u2_1"]' in text
    m = manifest(tmp_path, "sine_heat_validate")
    assert m["exit_code"] == 0 and m["outputs"] == [] and m["seed"] == 7


def test_bundled_names_resolve():
    assert resolve_scenario("sine_heat").name == "sine_heat.cfg"
    assert resolve_scenario("scenarios/hopf_cole.cfg").name == "hopf_cole.cfg"


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense", "sine_heat"],
        ["validate", "no_such_scenario"],
        ["solve"],
        ["solve", "sine_heat", "--side", "middle"],
        ["simulate", "sine_heat", "--paths", "0"],
    ],
)
def test_usage_errors(argv, tmp_path, capsys):
    assert run([*argv, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "isaacslab:" in capsys.readouterr().err


def test_help_exits_cleanly(capsys):
    assert run(["--help"]) == 0
    assert "verify-saddle" in capsys.readouterr().out


def test_broken_config_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(resolve_scenario("sine_heat").read_text().replace('sigma = "0.5"', 'sigma = "u1_1"'))
    assert run(["validate", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "sigma" in capsys.readouterr().err


def test_unstable_grid_override(tmp_path, capsys):
    assert run(["solve", "sine_heat", "--grid-nt", "11", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "stability bound" in capsys.readouterr().err


def test_wrong_problem_kind(tmp_path):
    assert run(["verify-control", "sine_heat", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["verify-saddle", "hopf_cole", "--out", str(tmp_path)]) == EXIT_USAGE


def test_solve_csv_format_and_manifest(tmp_path):
    assert run(["solve", "sine_heat", "--grid-nx", "101", "--grid-nt", "201", "--out", str(tmp_path)]) == EXIT_OK
    path = tmp_path / "sine_heat_solve_upper.csv"
    header, rows = read_csv(path)
    assert header == ["t", "x1", "v", "dv_dx1"]
    assert len(rows) == 11 * 101
    # 17 significant digits round-trip every double exactly
    assert float(rows[5][2]).hex() == np.float64(rows[5][2]).hex()
    assert any(len(c.replace("-", "").replace(".", "").split("e")[0]) == 17 for c in rows[5])
    m = manifest(tmp_path, "sine_heat_solve_upper")
    files = {o["file"]: o for o in m["outputs"]}
    assert files[path.name]["sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()
    assert m["overrides"] == {"grid_nx": 101, "grid_nt": 201}
    assert set(m["timings_s"]) >= {"solve", "residual"}


def test_environment_overrides_out(tmp_path, monkeypatch):
    target = tmp_path / "env"
    monkeypatch.setenv("ISAACSLAB_OUT", str(target))
    assert run(["solve", "bilinear", "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (target / "bilinear_solve_upper.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_bilinear_sides_match_integrated_gap(tmp_path):
    out = str(tmp_path)
    assert run(["solve", "bilinear", "--side", "upper", "--out", out]) == EXIT_OK
    assert run(["solve", "bilinear", "--side", "lower", "--out", out]) == EXIT_OK
    assert run(["isaacs-gap", "bilinear", "--out", out]) == EXIT_OK
    up = np.loadtxt(tmp_path / "bilinear_solve_upper.csv", delimiter=",", skiprows=1)
    lo = np.loadtxt(tmp_path / "bilinear_solve_lower.csv", delimiter=",", skiprows=1)
    gap = np.loadtxt(tmp_path / "bilinear_isaacs_gap_upper.csv", delimiter=",", skiprows=1)
    integ = np.loadtxt(tmp_path / "bilinear_isaacs_gap_upper_integrated.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(up[:, :2], integ[:, :2])
    assert abs(np.max(np.abs(up[:, 2] - lo[:, 2])) - integ[:, 2].max()) <= 1e-8
    np.testing.assert_allclose(up[:, 2] - lo[:, 2], integ[:, 2], atol=1e-8)
    # pointwise gap 2|p| with p = 1
    np.testing.assert_allclose(gap[:, 3], 2 * np.abs(gap[:, 2]), atol=1e-12)


def test_simulate_with_path_dump(tmp_path):
    assert run(["simulate", "sine_heat", *FAST, "--dump-paths", "3", "--out", str(tmp_path)]) == EXIT_OK
    header, rows = read_csv(tmp_path / "sine_heat_simulate_paths.csv")
    assert header == ["path_id", "step", "s", "y1", "u1_1", "u2_1"]
    assert len(rows) == 3 * 101
    _, summary = read_csv(tmp_path / "sine_heat_simulate_summary.csv")
    assert summary[0][:2] == ["z1*", "z2*"]


def test_verify_saddle_small(tmp_path):
    assert run(["verify-saddle", "sine_heat", *FAST, "--out", str(tmp_path)]) == EXIT_OK
    header, rows = read_csv(tmp_path / "sine_heat_verify_saddle_verdict.csv")
    assert header[-1] == "verdict" and len(rows) == 5
    assert all(r[-1] == "PASS" for r in rows)


def test_fail_exit_code_without_a_saddle(tmp_path):
    assert run(["verify-saddle", "bilinear", *FAST, "--out", str(tmp_path)]) == EXIT_FAIL
    _, rows = read_csv(tmp_path / "bilinear_verify_saddle_verdict.csv")
    assert any(r[-1] == "FAIL" for r in rows)
    assert manifest(tmp_path, "bilinear_verify_saddle")["exit_code"] == EXIT_FAIL


def test_game_value_small(tmp_path):
    assert run(["game-value", "sine_heat", "--paths", "500", "--steps", "50", "--out", str(tmp_path)]) == EXIT_OK
    header, rows = read_csv(tmp_path / "sine_heat_game_value_matrix.csv")
    assert header[:3] == ["z1", "z2*:mean", "z2*:se"]
    assert [r[0] for r in rows] == ["z1*", "const(1)", "const(-1)", "const(0)"]


def test_verify_control_and_decompose_small(tmp_path):
    out = str(tmp_path)
    assert run(["verify-control", "hopf_cole", *FAST, "--out", out]) == EXIT_OK
    _, rows = read_csv(tmp_path / "hopf_cole_verify_control_payoffs.csv")
    assert len(rows) == 4
    assert run(["decompose", "hopf_cole", *FAST, "--out", out]) == EXIT_OK
    header, hist = read_csv(tmp_path / "hopf_cole_decompose_histogram.csv")
    assert header == ["run", "bin_lo", "bin_hi", "count"]
    assert sum(int(r[3]) for r in hist if r[0] == "star") == 2000


def test_identical_runs_give_identical_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["simulate", "regime_switch", *FAST, "--seed", "3", "--out", str(out)]) == EXIT_OK
    name = "regime_switch_simulate_summary.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()
