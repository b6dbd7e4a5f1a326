"""Experiment configuration, table runs, bootstrap checks and plot-data export."""
from __future__ import annotations

import csv
import io
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cross_entropy import CeOptions
from .enkf import ObservationModel
from .errors import ConfigError, NumericalError
from .models import GaussianDensity, Projection, RareEvent, SdeModel, make_model
from .paths import PathConfig
from .sampling import EstimatorReport, IsMode, PdeSettings, estimate

__all__ = [
    "ModelSection",
    "EventSection",
    "InitialSection",
    "SimulationSection",
    "PdeSection",
    "CeSection",
    "EnkfSection",
    "OutputSection",
    "ExperimentConfig",
    "BootstrapReport",
    "RESULT_COLUMNS",
    "TIMING_COLUMNS",
    "cell_seed",
    "result_row",
    "run_table",
    "write_rows",
    "bootstrap_std",
    "emit_plot_data",
    "emit_density_data",
    "packaged_config",
    "PACKAGED_CONFIGS",
]

PACKAGED_CONFIGS = ("table1", "table2", "table3", "table4", "enkf_dw")


@dataclass(frozen=True)
class ModelSection:
    name: str = "double-well"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EventSection:
    thresholds: tuple = (1.0,)
    projection_index: int = 0
    horizon: float = 1.0


@dataclass(frozen=True)
class InitialSection:
    mean: tuple = (-1.0,)
    covariance: Optional[tuple] = None
    std: Optional[tuple] = (0.2,)


@dataclass(frozen=True)
class SimulationSection:
    dt: float = 0.01
    n_samples: int = 100_000
    seed: int = 0
    modes: tuple = ("mc", "is-rho0", "is-w", "is-both")
    delta_t_switch: Optional[float] = None
    epsilon_min_step: float = 1e-6
    bridge: bool = True
    chunk_size: int = 20_000


@dataclass(frozen=True)
class PdeSection:
    dx: Optional[float] = None
    dt: Optional[float] = None
    x_min: Optional[float] = None
    patch_dx: Optional[float] = None
    patch_dt: Optional[float] = None
    max_degree: int = 2
    pilot_paths: int = 10_000
    b2_floor: float = 1e-8


@dataclass(frozen=True)
class CeSection:
    beta: float = 0.01
    pilot_size: int = 10_000
    level_cap: int = 20
    free_variance: bool = False


@dataclass(frozen=True)
class EnkfSection:
    windows: int = 10
    ensemble_size: int = 100
    monitor_size: int = 10_000
    monitor_mode: str = "is-both"
    h_matrix: tuple = ((1.0,),)
    noise_cov: tuple = ((0.1,),)
    truth_initial: Optional[tuple] = None
    observations: Optional[str] = None


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


_SECTIONS = {
    "model": ModelSection,
    "event": EventSection,
    "initial": InitialSection,
    "simulation": SimulationSection,
    "pde": PdeSection,
    "ce": CeSection,
    "enkf": EnkfSection,
    "output": OutputSection,
}


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    if isinstance(v, dict):
        return {k: _listify(x) for k, x in v.items()}
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    """All settings of one experiment; serialised as TOML with one table per section."""

    model: ModelSection = field(default_factory=ModelSection)
    event: EventSection = field(default_factory=EventSection)
    initial: InitialSection = field(default_factory=InitialSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    pde: PdeSection = field(default_factory=PdeSection)
    ce: CeSection = field(default_factory=CeSection)
    enkf: EnkfSection = field(default_factory=EnkfSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config tables: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            raw = dict(data.get(name, {}))
            if name == "model":
                params = {k: v for k, v in raw.items() if k != "name"}
                kwargs[name] = ModelSection(raw.get("name", "double-well"), _tuplify(params))
                continue
            if name == "initial" and "covariance" in raw:
                raw.setdefault("std", None)
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                kwargs[name] = section_cls(**{k: _tuplify(v) for k, v in raw.items()})
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            if name == "model":
                out[name] = {"name": sec.name, **_listify(dict(sec.params))}
                continue
            out[name] = {k: _listify(v) for k, v in asdict(sec).items() if v is not None}
        return out

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_toml(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    def validate(self) -> None:
        try:
            sde = self.build_model()
            for k in self.event.thresholds:
                float(k)
            if not self.event.thresholds:
                raise ConfigError("at least one threshold is required")
            self.build_projection(sde)
            rho0 = self.build_initial()
            if rho0.dim != sde.dim_state:
                raise ConfigError(f"initial density has dim {rho0.dim}, model has {sde.dim_state}")
            for m in self.simulation.modes:
                IsMode.parse(m)
            IsMode.parse(self.enkf.monitor_mode)
            self.path_config()
            self.ce_options()
            if self.simulation.n_samples < 1:
                raise ConfigError("n_samples must be positive")
            if self.simulation.chunk_size < 1:
                raise ConfigError("chunk_size must be positive")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def build_model(self) -> SdeModel:
        try:
            return make_model(self.model.name, **dict(self.model.params))
        except TypeError as exc:
            raise ConfigError(f"bad model parameters: {exc}") from exc

    def build_projection(self, sde: Optional[SdeModel] = None) -> Projection:
        sde = sde or self.build_model()
        idx = self.event.projection_index
        if not 0 <= idx < sde.dim_state:
            raise ConfigError(f"projection_index {idx} out of range")
        return Projection.coordinate(idx, sde.dim_state)

    def build_event(self, threshold: float) -> RareEvent:
        return RareEvent(float(threshold), self.build_projection(), (0.0, float(self.event.horizon)))

    def build_initial(self) -> GaussianDensity:
        ini = self.initial
        if (ini.covariance is None) == (ini.std is None):
            raise ConfigError("[initial] needs exactly one of covariance or std")
        if ini.std is not None:
            return GaussianDensity.from_std(ini.mean, ini.std)
        return GaussianDensity(ini.mean, ini.covariance)

    def path_config(self) -> PathConfig:
        s = self.simulation
        return PathConfig(dt=s.dt, horizon_end=float(self.event.horizon), delta_t_switch=s.delta_t_switch,
                          epsilon_min_step=s.epsilon_min_step, bridge_enabled=bool(s.bridge))

    def pde_settings(self) -> PdeSettings:
        p = self.pde
        if (p.patch_dx is None) != (p.patch_dt is None):
            raise ConfigError("patch_dx and patch_dt must be given together")
        patch = None if p.patch_dx is None else (p.patch_dx, p.patch_dt)
        return PdeSettings(p.dx, p.dt, p.x_min, patch, p.max_degree, p.pilot_paths, p.b2_floor)

    def ce_options(self) -> CeOptions:
        c = self.ce
        return CeOptions(c.beta, c.pilot_size, c.level_cap, c.free_variance)

    def observation_model(self) -> ObservationModel:
        try:
            return ObservationModel(np.array(self.enkf.h_matrix, dtype=float),
                                    np.array(self.enkf.noise_cov, dtype=float))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Replace fields per section, e.g. ``simulation={"seed": 3}``."""
        updates = {}
        for name, values in sections.items():
            if values:
                updates[name] = replace(getattr(self, name), **{k: _tuplify(v) for k, v in values.items()})
        return replace(self, **updates)


def packaged_config(name: str) -> ExperimentConfig:
    """One of the configs shipped with the package (``table1`` ... ``enkf_dw``)."""
    if name not in PACKAGED_CONFIGS:
        raise ConfigError(f"no packaged config {name!r}")
    text = resources.files("enkf_rare").joinpath("configs", f"{name}.toml").read_text()
    return ExperimentConfig.from_toml(text)


RESULT_COLUMNS = ("model", "K", "mode", "J", "alpha_hat", "var", "ci_lo", "ci_hi", "rel_err_pct",
                  "vr_ratio", "n_hits", "n_failed", "seed", "status")
TIMING_COLUMNS = ("model", "K", "mode", "seconds")


def cell_seed(root: int, k_index: int, mode) -> int:
    mode_index = list(IsMode).index(IsMode.parse(mode))
    ss = np.random.SeedSequence(int(root), spawn_key=(int(k_index), mode_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_rows(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def result_row(model: str, k: float, mode: str, j: int, seed: int, rep: Optional[EstimatorReport], status: str) -> dict:
    base = dict(model=model, K=float(k), mode=mode, J=int(j), seed=int(seed), status=status)
    if rep is None:
        nan = float("nan")
        base.update(alpha_hat=nan, var=nan, ci_lo=nan, ci_hi=nan, rel_err_pct=nan, n_hits=0, n_failed=0)
        return base
    base.update(alpha_hat=rep.alpha_hat, var=rep.variance, ci_lo=rep.ci_lo, ci_hi=rep.ci_hi,
                rel_err_pct=rep.rel_err_pct, n_hits=rep.n_hits, n_failed=rep.n_failed)
    if rep.rare_event_warning:
        base["status"] = "ok:no-hits"
    return base


def run_table(config: ExperimentConfig, threads: int = 1, out_dir=None, keep_weights: bool = False,
              progress=None) -> tuple[list[dict], list[dict], dict]:
    """Run every (threshold, mode) cell; return result rows, timing rows and reports.

    The crude Monte Carlo cell is always run at the same ``J`` and provides
    the reference variance for the ratio column. A failing cell keeps its row
    with an error status.
    """
    sde = config.build_model()
    rho0 = config.build_initial()
    cfg = config.path_config()
    settings = config.pde_settings()
    ce_opts = config.ce_options()
    sim = config.simulation
    # the crude Monte Carlo cell runs first: it supplies the reference variance
    modes = [IsMode.MC] + [m for m in (IsMode.parse(v) for v in sim.modes) if m is not IsMode.MC]
    rows, timings, reports = [], [], {}
    for ki, k in enumerate(config.event.thresholds):
        event = config.build_event(k)
        v_mc = None
        for mode in modes:
            seed = cell_seed(sim.seed, ki, mode)
            t0 = time.perf_counter()
            try:
                rep = estimate(mode, sde, event, rho0, cfg, sim.n_samples, seed, settings,
                               chunk_size=sim.chunk_size, threads=threads, keep_weights=keep_weights,
                               ce_options=ce_opts)
                status = "ok"
            except (NumericalError, FloatingPointError) as exc:
                rep, status = None, f"error: {type(exc).__name__}: {exc}"
            seconds = time.perf_counter() - t0
            row = result_row(sde.name, k, mode.value, sim.n_samples, seed, rep, status)
            if mode is IsMode.MC:
                v_mc = rep.variance if rep is not None else None
            row["vr_ratio"] = _ratio(v_mc, rep, mode)
            rows.append(row)
            timings.append(dict(model=sde.name, K=float(k), mode=mode.value, seconds=seconds))
            reports[(float(k), mode.value)] = rep
            if progress is not None:
                progress(row)
    rows.sort(key=lambda r: (r["K"], modes.index(IsMode.parse(r["mode"]))))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "results.csv", RESULT_COLUMNS, rows)
        write_rows(out / "timings.csv", TIMING_COLUMNS, timings)
    return rows, timings, reports


def _ratio(v_mc, rep, mode) -> float:
    if mode is IsMode.MC:
        return 1.0 if rep is not None else float("nan")
    if rep is None or v_mc is None:
        return float("nan")
    if rep.variance == 0:
        return float("inf") if v_mc > 0 else float("nan")
    return v_mc / rep.variance


@dataclass(frozen=True)
class BootstrapReport:
    resamples: int
    std_samples: np.ndarray = field(repr=False)
    ci_lo: float
    ci_hi: float
    degenerate: bool = False

    @property
    def std_hat(self) -> float:
        return float(np.mean(self.std_samples))


def bootstrap_std(weights, resamples: int, rng: np.random.Generator, block: int = 16) -> BootstrapReport:
    """Bootstrap distribution of the estimator's standard deviation ``std(w*)/sqrt(n)``.

    When most weights are zero only the nonzero ones are resampled: the number
    of draws landing on them is binomial, which is exact in distribution.
    """
    w = np.asarray(weights, dtype=float).ravel()
    n = w.size
    if n < 100:
        raise ValueError("bootstrap needs at least 100 samples")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    if np.all(w == w[0]):
        return BootstrapReport(resamples, np.zeros(resamples), 0.0, 0.0, True)
    nz = w[w != 0]
    stds = np.empty(resamples)
    if nz.size <= n // 2:
        counts = rng.binomial(n, nz.size / n, size=resamples)
        for b, c in enumerate(counts):
            draw = nz[rng.integers(0, nz.size, c)]
            s1, s2 = draw.sum(), (draw * draw).sum()
            stds[b] = math.sqrt(max(s2 / n - (s1 / n) ** 2, 0.0) / n)
    else:
        for start in range(0, resamples, block):
            m = min(block, resamples - start)
            draw = w[rng.integers(0, n, (m, n))]
            mean = draw.mean(axis=1)
            var = (draw * draw).mean(axis=1) - mean**2
            stds[start:start + m] = np.sqrt(np.maximum(var, 0.0) / n)
    lo, hi = np.percentile(stds, [2.5, 97.5])
    return BootstrapReport(resamples, stds, float(lo), float(hi), False)


_GNUPLOT = {
    "ci_vs_j": """set datafile separator ','
set logscale x
set xlabel 'J'
set ylabel 'estimate'
set key outside
plot for [m in MODES] '{csv}' using (stringcolumn(2) eq m ? $1 : 1/0):3:4 with yerrorbars title m
""",
    "densities": """set datafile separator ','
set xlabel 'y'
set ylabel 'density'
plot for [i=2:{ncol}] '{csv}' using 1:i with lines title columnheader(i)
""",
}


def emit_plot_data(reports, out_dir, name: str = "ci_vs_j") -> tuple[Path, Path]:
    """Tidy ``J, mode, alpha, half_width`` rows plus a gnuplot script.

    ``reports`` is an iterable of ``EstimatorReport`` or of dicts carrying
    those four keys.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in reports:
        if isinstance(r, EstimatorReport):
            rows.append(dict(J=r.n_samples, mode=r.mode, alpha=r.alpha_hat, half_width=r.half_width))
        else:
            rows.append(dict(J=r["J"], mode=r["mode"], alpha=r["alpha"], half_width=r["half_width"]))
    csv_path = out / f"{name}.csv"
    write_rows(csv_path, ("J", "mode", "alpha", "half_width"), rows)
    modes = " ".join(sorted({r["mode"] for r in rows}))
    gp = out / f"{name}.gp"
    gp.write_text(f"MODES = '{modes}'\n" + _GNUPLOT["ci_vs_j"].format(csv=csv_path.name))
    return csv_path, gp


def emit_density_data(y, columns: dict, out_dir, name: str = "densities") -> tuple[Path, Path]:
    """Density curves on a shared grid, e.g. ``rho0``, ``pde1``, ``pde2``, ``ce``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y = np.asarray(y, dtype=float)
    names = list(columns)
    rows = [dict(y=yv, **{c: float(np.asarray(columns[c])[i]) for c in names}) for i, yv in enumerate(y)]
    csv_path = out / f"{name}.csv"
    write_rows(csv_path, ["y"] + names, rows)
    gp = out / f"{name}.gp"
    gp.write_text(_GNUPLOT["densities"].format(csv=csv_path.name, ncol=len(names) + 1))
    return csv_path, gp
