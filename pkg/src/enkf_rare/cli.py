"""Command-line entry point: ``enkf-rare <subcommand> [options]``.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cross_entropy import CeOptions
from .enkf import read_observations, run_filter_with_monitor, synthetic_signal
from .errors import ConfigError, NumericalError
from .harness import (
    PACKAGED_CONFIGS,
    RESULT_COLUMNS,
    TIMING_COLUMNS,
    ExperimentConfig,
    bootstrap_std,
    cell_seed,
    packaged_config,
    run_table,
    write_rows,
    result_row,
)
from .kbe import default_grid, default_patch, solve_kbe
from .sampling import IsMode, projected_coefficients, estimate

log = logging.getLogger("enkf_rare")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required (a TOML path or one of: " + ", ".join(PACKAGED_CONFIGS) + ")")
    if args.config in PACKAGED_CONFIGS and not Path(args.config).exists():
        cfg = packaged_config(args.config)
    else:
        cfg = ExperimentConfig.load(args.config)
    sim = {}
    if args.seed is not None:
        sim["seed"] = args.seed
    if getattr(args, "samples", None) is not None:
        sim["n_samples"] = args.samples
    if getattr(args, "modes", None):
        sim["modes"] = args.modes
    ev = {}
    if getattr(args, "threshold", None) is not None:
        ev["thresholds"] = args.threshold
    ce = {}
    for key, attr in (("beta", "beta"), ("pilot_size", "j1"), ("level_cap", "level_cap")):
        if getattr(args, attr, None) is not None:
            ce[key] = getattr(args, attr)
    try:
        return cfg.with_overrides(simulation=sim, event=ev, ce=ce)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    mode = IsMode.parse(args.mode)
    out = _out_dir(args, cfg)
    sde, rho0, pcfg = cfg.build_model(), cfg.build_initial(), cfg.path_config()
    rows, timings, failed = [], [], False
    for ki, k in enumerate(cfg.event.thresholds):
        seed = cell_seed(cfg.simulation.seed, ki, mode)
        t0 = time.perf_counter()
        try:
            rep = estimate(mode, sde, cfg.build_event(k), rho0, pcfg, cfg.simulation.n_samples, seed,
                           cfg.pde_settings(), chunk_size=cfg.simulation.chunk_size, threads=args.threads,
                           ce_options=cfg.ce_options())
            if mode is IsMode.CE and rep.extra.get("trace"):
                write_rows(out / f"ce_trace_K{k:g}.csv", ("level", "k_hat", "mu_tilde", "sigma_tilde"),
                           rep.extra["trace"])
            status = "ok"
        except NumericalError as exc:
            rep, status, failed = None, f"error: {type(exc).__name__}: {exc}", True
            log.error("K=%g: %s", k, exc)
        rows.append(result_row(sde.name, k, mode.value, cfg.simulation.n_samples, seed, rep, status))
        timings.append(dict(model=sde.name, K=float(k), mode=mode.value, seconds=time.perf_counter() - t0))
    cols = tuple(c for c in RESULT_COLUMNS if c != "vr_ratio")
    write_rows(out / "estimate.csv", cols, rows)
    write_rows(out / "timings.csv", TIMING_COLUMNS, timings)
    for r in rows:
        print(f"K={r['K']:g} mode={r['mode']} alpha={r['alpha_hat']:.6g} "
              f"CI=[{r['ci_lo']:.6g}, {r['ci_hi']:.6g}] rel_err={r['rel_err_pct']:.3g}% {r['status']}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_solve_kbe(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    sde, rho0, pcfg = cfg.build_model(), cfg.build_initial(), cfg.path_config()
    settings = cfg.pde_settings()
    k = float(cfg.event.thresholds[0])
    event = cfg.build_event(k)
    coeffs, sur, _ = projected_coefficients(sde, event, rho0, pcfg, settings, cfg.simulation.seed)
    grid = default_grid(sde.name, k, event.length, settings.dx, settings.dt, settings.x_min)
    patch = settings.patch or default_patch(sde.name, k, grid)
    try:
        sol = solve_kbe(coeffs, k, grid, patch)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc
    t, x = grid.t, grid.x
    stride = max(1, args.stride)
    with open(out / "gamma.csv", "w") as fh:
        fh.write("t,x,gamma\n")
        for i in range(0, t.size, stride):
            for j in range(x.size):
                fh.write(f"{float(t[i])!r},{float(x[j])!r},{float(sol.gamma[i, j])!r}\n")
    meta = dict(model=sde.name, threshold=k, x_min=grid.x_min, x_max=grid.x_max, dx=grid.dx, dt=grid.dt,
                t_end=grid.t_end, nx=grid.nx, nt=grid.nt, time_stride=stride,
                corner_patch=list(sol.corner_patch), frozen_coefficients=list(sol.frozen),
                raw_min=sol.raw_min, raw_max=sol.raw_max, surrogate=sur is not None,
                b2_floor=settings.b2_floor if sur is not None else None)
    (out / "gamma.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'gamma.csv'} ({grid.nt + 1} x {grid.nx + 1} nodes)")
    return EXIT_OK


def cmd_enkf_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    sde, rho0, pcfg = cfg.build_model(), cfg.build_initial(), cfg.path_config()
    en = cfg.enkf
    obs = cfg.observation_model()
    if obs.h_matrix.shape[1] != sde.dim_state:
        raise ConfigError("h_matrix columns must match the state dimension")
    windows = args.windows or en.windows
    obs_file = args.observations or en.observations
    seed = cfg.simulation.seed
    truth = None
    if obs_file:
        ys = read_observations(obs_file)[:windows]
    else:
        u0 = en.truth_initial if en.truth_initial is not None else rho0.mean
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(11,))))
        truth, ys = synthetic_signal(sde, obs, u0, windows, pcfg, rng)
    mode = IsMode.parse(args.mode or en.monitor_mode)
    records = run_filter_with_monitor(
        sde, obs, cfg.build_event(cfg.event.thresholds[0]), rho0, ys, pcfg,
        args.ensemble_size or en.ensemble_size, mode, args.monitor_size or en.monitor_size, seed,
        truth=truth, settings=cfg.pde_settings(), threads=args.threads,
    )
    m, d = obs.dim_obs, sde.dim_state
    cols = (["n"] + [f"y_{i + 1}" for i in range(m)] + [f"m_{i + 1}" for i in range(d)]
            + ["alpha_hat", "ci_lo", "ci_hi", "status"])
    rows = []
    for r in records:
        row = {"n": r.n, "status": r.status}
        for i in range(m):
            row[f"y_{i + 1}"] = float("nan") if r.observation is None else float(r.observation[i])
        for i in range(d):
            row[f"m_{i + 1}"] = float(r.mean[i])
        rep = r.report
        nan = float("nan")
        row.update(alpha_hat=rep.alpha_hat if rep else nan, ci_lo=rep.ci_lo if rep else nan,
                   ci_hi=rep.ci_hi if rep else nan)
        rows.append(row)
    write_rows(out / "enkf.csv", cols, rows)
    print(f"wrote {out / 'enkf.csv'} ({len(rows)} windows)")
    return EXIT_OK


def cmd_run_table(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)

    def progress(row):
        print(f"K={row['K']:g} {row['mode']:8s} alpha={row['alpha_hat']:.6g} var={row['var']:.3g} "
              f"ratio={row['vr_ratio']:.4g} {row['status']}", flush=True)

    rows, _, _ = run_table(cfg, threads=args.threads, out_dir=out, progress=progress)
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    sde, rho0, pcfg = cfg.build_model(), cfg.build_initial(), cfg.path_config()
    rows = []
    for ki, k in enumerate(cfg.event.thresholds):
        for m in cfg.simulation.modes:
            mode = IsMode.parse(m)
            seed = cell_seed(cfg.simulation.seed, ki, mode)
            row = dict(model=sde.name, K=float(k), mode=mode.value, J=cfg.simulation.n_samples,
                       B=args.resamples, seed=seed)
            try:
                rep = estimate(mode, sde, cfg.build_event(k), rho0, pcfg, cfg.simulation.n_samples, seed,
                               cfg.pde_settings(), chunk_size=cfg.simulation.chunk_size, threads=args.threads,
                               keep_weights=True, ce_options=cfg.ce_options())
                rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(13,))))
                b = bootstrap_std(rep.weights, args.resamples, rng)
                row.update(std_hat=b.std_hat, ci_lo=b.ci_lo, ci_hi=b.ci_hi, degenerate=b.degenerate, status="ok")
            except NumericalError as exc:
                nan = float("nan")
                row.update(std_hat=nan, ci_lo=nan, ci_hi=nan, degenerate=False,
                           status=f"error: {type(exc).__name__}: {exc}")
            print(f"K={k:g} {mode.value:8s} std CI=[{row['ci_lo']:.4g}, {row['ci_hi']:.4g}] {row['status']}",
                  flush=True)
            rows.append(row)
    write_rows(out / "bootstrap.csv",
               ("model", "K", "mode", "J", "B", "std_hat", "ci_lo", "ci_hi", "degenerate", "seed", "status"), rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config path or packaged name (table1..table4, enkf_dw)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="output directory (default: [output] dir)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for path sampling")
    common.add_argument("--samples", type=int, help="override the number of paths J")
    common.add_argument("--threshold", type=float, nargs="+", help="override the threshold list")

    p = argparse.ArgumentParser(prog="enkf-rare", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", parents=[common], help="run one estimator for every threshold")
    e.add_argument("--mode", required=True, choices=[m.value for m in IsMode])
    e.add_argument("--beta", type=float, help="cross-entropy quantile parameter")
    e.add_argument("--j1", type=int, help="cross-entropy pilot size per level")
    e.add_argument("--level-cap", type=int, dest="level_cap", help="cross-entropy level cap")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("solve-kbe", parents=[common], help="solve the backward equation for the first threshold")
    s.add_argument("--stride", type=int, default=1, help="write every n-th time level")
    s.set_defaults(func=cmd_solve_kbe)

    f = sub.add_parser("enkf-run", parents=[common], help="filter with a per-window rare-event monitor")
    f.add_argument("--windows", type=int)
    f.add_argument("--ensemble-size", type=int, dest="ensemble_size")
    f.add_argument("--mode", choices=[m.value for m in IsMode])
    f.add_argument("--monitor-size", type=int, dest="monitor_size")
    f.add_argument("--observations", help="CSV of observations (header n,y_1,...)")
    f.set_defaults(func=cmd_enkf_run)

    t = sub.add_parser("run-table", parents=[common], help="all thresholds x modes with variance ratios")
    t.add_argument("--modes", nargs="+")
    t.set_defaults(func=cmd_run_table)

    b = sub.add_parser("bootstrap", parents=[common], help="bootstrap CI of the estimator std per mode")
    b.add_argument("--resamples", type=int, default=10_000)
    b.add_argument("--modes", nargs="+")
    b.set_defaults(func=cmd_bootstrap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
