import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from enkf_rare.errors import ConfigError
from enkf_rare.harness import (
    PACKAGED_CONFIGS,
    RESULT_COLUMNS,
    ExperimentConfig,
    bootstrap_std,
    cell_seed,
    emit_density_data,
    emit_plot_data,
    packaged_config,
    run_table,
)
from enkf_rare.sampling import EstimatorReport


def small_config(**sim):
    cfg = packaged_config("table2")
    return cfg.with_overrides(event={"thresholds": [1.5, 2.0]},
                              simulation={"n_samples": 4000, "modes": ["mc", "is-rho0", "is-both"], **sim},
                              pde={"pilot_paths": 500})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("name", PACKAGED_CONFIGS)
def test_packaged_configs_round_trip(name, tmp_path):
    cfg = packaged_config(name)
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg
    cfg.save(tmp_path / "c.toml")
    assert ExperimentConfig.load(tmp_path / "c.toml") == cfg


@given(st.lists(st.floats(-2, 3, allow_nan=False), min_size=1, max_size=4),
       st.integers(0, 2**40), st.sampled_from(["mc", "is-w", "ce"]), st.booleans(),
       st.floats(0.001, 0.05))
def test_config_round_trip_property(ks, seed, mode, bridge, dt):
    cfg = ExperimentConfig().with_overrides(event={"thresholds": ks},
                                            simulation={"seed": seed, "modes": [mode], "bridge": bridge, "dt": dt})
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg


def test_table_configs_carry_paper_parameters():
    t1, t3, t4 = packaged_config("table1"), packaged_config("table3"), packaged_config("table4")
    assert t1.build_initial().covariance[0, 0] == pytest.approx(0.04)
    assert t3.build_model().params["kappa"] == pytest.approx(2**-5 * math.pi**2)
    assert t3.build_projection().row.tolist() == [0.0, 1.0]
    assert t4.build_model().params["b_diffusion"] == 0.01
    assert t3.simulation.bridge and t1.simulation.n_samples == 1_000_000


@pytest.mark.parametrize("text", [
    "[model]\nname = 'lorenz'\n",
    "[simulation]\nmodes = ['bogus']\n",
    "[nonsense]\nx = 1\n",
    "[simulation]\nunknown_key = 1\n",
    "[initial]\nmean = [0.0]\ncovariance = [[1.0]]\nstd = [1.0]\n",
    "[initial]\nmean = [0.0, 1.0]\nstd = [1.0, 1.0]\n",
    "[event]\nprojection_index = 3\n",
    "[simulation]\ndt = 5.0\n",
    "not toml at all [",
])
def test_invalid_configs_raise(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(text)


def test_missing_packaged_config():
    with pytest.raises(ConfigError):
        packaged_config("table9")


def test_cell_seeds_are_distinct_and_stable():
    seeds = {cell_seed(7, k, m) for k in range(3) for m in ("mc", "is-rho0", "is-w", "is-both", "ce")}
    assert len(seeds) == 15
    assert cell_seed(7, 1, "mc") == cell_seed(7, 1, "MC")


def test_run_table_is_deterministic(tmp_path):
    cfg = small_config()
    run_table(cfg, out_dir=tmp_path / "a")
    run_table(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "timings.csv").exists()


def test_run_table_rows_and_ratios(tmp_path):
    rows, timings, reports = run_table(small_config(modes=["is-both", "mc"]), out_dir=tmp_path)
    assert [(r["K"], r["mode"]) for r in rows] == [(1.5, "mc"), (1.5, "is-both"), (2.0, "mc"), (2.0, "is-both")]
    for r in rows:
        assert r["vr_ratio"] >= 0
        if r["mode"] == "mc":
            assert r["vr_ratio"] == 1.0
    written = read_csv(tmp_path / "results.csv")
    assert list(written[0]) == list(RESULT_COLUMNS)
    assert len(timings) == 4 and set(reports) == {(1.5, "mc"), (1.5, "is-both"), (2.0, "mc"), (2.0, "is-both")}


def test_run_table_records_failing_cell(tmp_path):
    cfg = packaged_config("table1").with_overrides(
        event={"thresholds": [1.2]}, simulation={"n_samples": 1000, "modes": ["mc", "ce"]})
    rows, _, _ = run_table(cfg, out_dir=tmp_path)
    ce = [r for r in rows if r["mode"] == "ce"][0]
    assert ce["status"].startswith("error: LevelCapError")
    assert math.isnan(ce["vr_ratio"])
    assert [r for r in rows if r["mode"] == "mc"][0]["status"].startswith("ok")


def test_bootstrap_identical_weights():
    b = bootstrap_std(np.full(500, 0.3), 100, np.random.default_rng(0))
    assert b.ci_lo == b.ci_hi == 0.0 and b.degenerate


def test_bootstrap_bernoulli_half():
    rng = np.random.default_rng(1)
    w = (rng.random(10_000) < 0.5).astype(float)
    b = bootstrap_std(w, 2000, rng)
    assert b.std_hat == pytest.approx(0.005, rel=0.15)
    assert b.ci_lo <= b.ci_hi


def test_bootstrap_sparse_branch_matches_dense_branch():
    rng = np.random.default_rng(2)
    w = np.where(rng.random(20_000) < 0.01, rng.exponential(size=20_000), 0.0)
    sparse = bootstrap_std(w, 3000, np.random.default_rng(3))
    # same data with a tiny offset on every weight forces the dense branch
    dense = bootstrap_std(w + 1e-12, 3000, np.random.default_rng(3))
    assert sparse.std_hat == pytest.approx(dense.std_hat, rel=0.02)
    assert sparse.ci_lo == pytest.approx(dense.ci_lo, rel=0.05)
    assert sparse.ci_hi == pytest.approx(dense.ci_hi, rel=0.05)


def test_bootstrap_requires_samples():
    with pytest.raises(ValueError):
        bootstrap_std(np.ones(10), 10, np.random.default_rng(0))


def test_emit_plot_data(tmp_path):
    reps = [EstimatorReport.from_weights("mc", np.r_[np.ones(j // 10), np.zeros(j - j // 10)])
            for j in (1000, 10_000, 100_000, 1_000_000)]
    csv_path, gp = emit_plot_data(reps, tmp_path)
    rows = read_csv(csv_path)
    assert list(rows[0]) == ["J", "mode", "alpha", "half_width"]
    assert [int(r["J"]) for r in rows] == [1000, 10_000, 100_000, 1_000_000]
    assert float(rows[0]["alpha"]) == pytest.approx(0.1)
    assert "plot" in gp.read_text()


def test_emit_plot_data_empty(tmp_path):
    csv_path, _ = emit_plot_data([], tmp_path)
    assert csv_path.read_text() == "J,mode,alpha,half_width\n"


def test_emit_density_data(tmp_path):
    y = np.linspace(-3, 3, 7)
    cols = {"rho0": np.exp(-y**2), "pde1": np.ones(7), "pde2": np.zeros(7), "ce": y}
    csv_path, gp = emit_density_data(y, cols, tmp_path)
    rows = read_csv(csv_path)
    assert list(rows[0]) == ["y", "rho0", "pde1", "pde2", "ce"] and len(rows) == 7
    assert "i=2:5" in gp.read_text()
