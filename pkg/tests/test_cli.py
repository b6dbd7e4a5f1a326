import csv
import json

import pytest

from enkf_rare.cli import main
from enkf_rare.harness import packaged_config


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def tiny_config(tmp_path):
    cfg = packaged_config("table2").with_overrides(
        event={"thresholds": [2.0]}, simulation={"n_samples": 3000, "modes": ["mc", "is-both"]},
        pde={"pilot_paths": 500})
    path = tmp_path / "tiny.toml"
    cfg.save(path)
    return path


def test_estimate_writes_report(tiny_config, tmp_path):
    out = tmp_path / "est"
    assert main(["estimate", "--config", str(tiny_config), "--mode", "is-both", "--out", str(out)]) == 0
    rows = read_csv(out / "estimate.csv")
    assert list(rows[0]) == ["model", "K", "mode", "J", "alpha_hat", "var", "ci_lo", "ci_hi", "rel_err_pct",
                             "n_hits", "n_failed", "seed", "status"]
    assert rows[0]["mode"] == "is-both" and float(rows[0]["alpha_hat"]) > 0
    assert list(read_csv(out / "timings.csv")[0]) == ["model", "K", "mode", "seconds"]


def test_estimate_is_deterministic(tiny_config, tmp_path):
    for d in ("a", "b"):
        main(["estimate", "--config", str(tiny_config), "--mode", "mc", "--seed", "5", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "estimate.csv").read_bytes() == (tmp_path / "b" / "estimate.csv").read_bytes()


def test_ce_trace_written(tiny_config, tmp_path):
    out = tmp_path / "ce"
    assert main(["estimate", "--config", str(tiny_config), "--mode", "ce", "--j1", "2000", "--out", str(out)]) == 0
    trace = read_csv(out / "ce_trace_K2.csv")
    assert list(trace[0]) == ["level", "k_hat", "mu_tilde", "sigma_tilde"]
    assert float(trace[-1]["k_hat"]) == 2.0


def test_missing_config_exits_2(tmp_path):
    assert main(["estimate", "--config", str(tmp_path / "nope.toml"), "--mode", "mc"]) == 2
    assert main(["estimate", "--mode", "mc"]) == 2


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nname = 'nope'\n")
    assert main(["run-table", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_level_cap_exits_3(tmp_path):
    code = main(["estimate", "--config", "table1", "--threshold", "1.2", "--mode", "ce", "--samples", "500",
                 "--out", str(tmp_path)])
    assert code == 3
    assert read_csv(tmp_path / "estimate.csv")[0]["status"].startswith("error: LevelCapError")


def test_solve_kbe_outputs(tmp_path):
    out = tmp_path / "kbe"
    assert main(["solve-kbe", "--config", "table1", "--threshold", "1.0", "--stride", "50", "--out", str(out)]) == 0
    rows = read_csv(out / "gamma.csv")
    assert list(rows[0]) == ["t", "x", "gamma"]
    meta = json.loads((out / "gamma.json").read_text())
    assert meta["threshold"] == 1.0 and meta["dx"] == pytest.approx(0.005) and not meta["surrogate"]
    assert all(0.0 <= float(r["gamma"]) <= 1.0 for r in rows)


def test_run_table_cli(tiny_config, tmp_path):
    out = tmp_path / "rt"
    assert main(["run-table", "--config", str(tiny_config), "--out", str(out)]) == 0
    rows = read_csv(out / "results.csv")
    assert [r["mode"] for r in rows] == ["mc", "is-both"]
    assert float(rows[0]["vr_ratio"]) == 1.0


def test_enkf_run_with_synthetic_truth(tmp_path):
    out = tmp_path / "enkf"
    assert main(["enkf-run", "--config", "enkf_dw", "--windows", "3", "--ensemble-size", "20", "--mode", "mc",
                 "--monitor-size", "500", "--out", str(out)]) == 0
    rows = read_csv(out / "enkf.csv")
    assert list(rows[0]) == ["n", "y_1", "m_1", "alpha_hat", "ci_lo", "ci_hi", "status"]
    assert [int(r["n"]) for r in rows] == [0, 1, 2, 3]


def test_enkf_run_with_observation_file(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("n,y_1\n1,-0.9\n2,-0.8\n")
    out = tmp_path / "enkf2"
    assert main(["enkf-run", "--config", "enkf_dw", "--observations", str(obs), "--ensemble-size", "20",
                 "--mode", "mc", "--monitor-size", "200", "--out", str(out)]) == 0
    rows = read_csv(out / "enkf.csv")
    assert [r["y_1"] for r in rows[1:]] == ["-0.9", "-0.8"]


def test_bootstrap_cli(tiny_config, tmp_path):
    out = tmp_path / "boot"
    assert main(["bootstrap", "--config", str(tiny_config), "--resamples", "200", "--out", str(out)]) == 0
    rows = read_csv(out / "bootstrap.csv")
    assert [r["mode"] for r in rows] == ["mc", "is-both"]
    assert all(float(r["ci_lo"]) <= float(r["ci_hi"]) for r in rows)


def test_console_script_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "estimate" in capsys.readouterr().out
