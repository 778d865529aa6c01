import csv
import json

import numpy as np

from optliq import cli, config


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_counterexample_writes_csv_and_manifest(tmp_path, capsys):
    out = tmp_path / "ce"
    assert _run("solve", "--config", "counterexample", "--out", out, "--nt", 100, "--nw", 75) == 0
    assert "oracle sup-norm relative error" in capsys.readouterr().out
    man = json.loads((out / "manifest.json").read_text())
    assert man["outputs"] == ["policy.npz", "value.csv"]
    assert man["oracle_error"] < 0.01
    assert man["grid"]["nw"] == 75 and man["effective_dt"] > 0
    assert man["config_sha256"] == config.load_recipe("counterexample").sha256
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "policy.npz", "value.csv"]


def test_solve_table2_shows_wait_region(tmp_path):
    out = tmp_path / "t2"
    assert _run("solve", "--config", "table2", "--out", out, "--nt", 100, "--nw", 120, "--npi", 10) == 0
    rows = [r for r in _rows(out / "value.csv") if float(r["t"]) == 0.0 and float(r["w"]) == 6000.0]
    rate = {float(r["pi"]): float(r["nu_star"]) for r in rows}
    # full inventory: sell while the bad regime is likely, wait once the good one is
    assert rate[0.0] > 0
    assert all(v == 0.0 for p, v in rate.items() if p >= 0.5)


def test_malformed_config_leaves_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(config.recipe_path("table2").read_text().replace("w0 = 6000.0", "w0 = six"))
    out = tmp_path / "out"
    assert _run("solve", "--config", bad, "--out", out) != 0
    assert "[scalars] w0" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == [bad]


def test_nonempty_output_directory_is_refused(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert _run("solve", "--config", "counterexample", "--out", out, "--nt", 20, "--nw", 10) != 0
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_simulate_is_reproducible(tmp_path):
    outs = [tmp_path / f"s{i}" for i in range(2)]
    for o in outs:
        assert _run("simulate", "--config", "table2", "--out", o, "--policy", "bang_bang:0.5",
                    "--paths", 30, "--seed", 11) == 0
    for name in ("paths.csv", "events_path0.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_compare_identical_policies_gives_zero_gain(tmp_path):
    out = tmp_path / "cmp"
    assert _run("compare", "--config", "table2", "--out", out, "--policy-a", "constant:4000",
                "--policy-b", "constant:4000", "--paths", 50, "--seed", 2) == 0
    assert all(float(r["gain"]) == 0.0 for r in _rows(out / "paths.csv"))


def test_evaluate_solved_policy_within_pde_band(tmp_path):
    sol = tmp_path / "sol"
    assert _run("solve", "--config", "table2", "--out", sol, "--nt", 100, "--nw", 150, "--npi", 10) == 0
    pde = json.loads((sol / "manifest.json").read_text())["value"]
    out = tmp_path / "ev"
    assert _run("evaluate", "--config", "table2", "--out", out, "--policy", sol / "policy.npz",
                "--paths", 2000, "--seed", 4) == 0
    row = _rows(out / "summary.csv")[0]
    mean, se = float(row["mean"]), float(row["std_error"])
    assert abs(mean - pde) <= 3 * se + 0.02 * pde


def test_calibrate_bundled_events(tmp_path):
    out = tmp_path / "cal"
    assert _run("calibrate", "--config", "calib_set1", "--out", out) == 0
    fitted = config.load_config(out / "params.cfg").spec
    truth = np.array([[1000.0, 900.0], [900.0, 1000.0]])
    assert np.all(np.abs(fitted.jumps.base_intensity - truth) / truth <= 0.15)
    ys = [float(r["y_hat"]) for r in _rows(out / "y_hat.csv")]
    assert min(ys) >= 1.0 and max(ys) <= 2.0
    trace = [float(r["loglik"]) for r in _rows(out / "loglik.csv")]
    assert np.all(np.diff(trace) >= -1e-8 * abs(trace[-1]))


def test_oracle_check_command(tmp_path):
    out = tmp_path / "oc"
    assert _run("oracle-check", "--config", "counterexample", "--out", out, "--nt", 50, "--nw", 40) == 0
    rows = _rows(out / "oracle.csv")
    assert max(abs(float(r["error"])) for r in rows) < 0.02 * 6000
    assert _run("oracle-check", "--config", "table2", "--out", tmp_path / "no") != 0


def test_unknown_policy_is_a_config_error(tmp_path):
    assert _run("evaluate", "--config", "table2", "--out", tmp_path / "x", "--policy", "sometimes") == 2
