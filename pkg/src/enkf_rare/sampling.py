"""Importance-sampling estimators for the running-maximum exceedance probability.

Each sample carries the weight ``1{hit} * L0 * L_W``: ``L0`` is the density
ratio of the original to the tilted initial distribution and ``L_W`` the
Girsanov factor of the controlled path. Factors are 1 when the corresponding
measure is left unchanged.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm
from sklearn.base import BaseEstimator

from .errors import NumericalError
from .kbe import (
    Coefficients1D,
    ControlField,
    KbeSolution,
    asymptotic_control,
    default_grid,
    default_patch,
    solve_kbe,
)
from .models import GaussianDensity, Projection, RareEvent, SdeModel, make_model
from .paths import PathConfig, SwitchedControl, simulate_paths
from .projection import BasisSpec, SurrogateCoefficients, fit_surrogate, generate_regression_data

__all__ = [
    "IsMode",
    "TiltedInitial",
    "PdeSettings",
    "IsArtifacts",
    "SampleSet",
    "EstimatorReport",
    "fit_tilted_initial",
    "sample_tilted",
    "likelihood_l0",
    "projected_coefficients",
    "prepare_artifacts",
    "run_samples",
    "estimate",
    "RareEventEstimator",
    "Z_CRIT",
    "PILOT_STREAM",
]

Z_CRIT = 1.96
PILOT_STREAM = 2**31 - 1


class IsMode(str, Enum):
    MC = "mc"
    IS_RHO0 = "is-rho0"
    IS_WIENER = "is-w"
    IS_BOTH = "is-both"
    CE = "ce"

    @classmethod
    def parse(cls, value) -> "IsMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"is-wiener": "is-w", "is-rho": "is-rho0"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key or m.name.lower().replace("_", "-") == key:
                return m
        raise ValueError(f"unknown mode {value!r}")

    @property
    def tilt_power(self) -> Optional[float]:
        return {IsMode.IS_RHO0: 0.5, IsMode.IS_BOTH: 1.0}.get(self)

    @property
    def uses_control(self) -> bool:
        return self in (IsMode.IS_WIENER, IsMode.IS_BOTH)

    @property
    def needs_pde(self) -> bool:
        return self in (IsMode.IS_RHO0, IsMode.IS_WIENER, IsMode.IS_BOTH)


@dataclass(frozen=True)
class TiltedInitial:
    """Gaussian tilt along ``P1``: new projected marginal, original conditional."""

    original: GaussianDensity
    projection: Projection
    mu_fit: float
    sigma_fit: float
    power: Optional[float] = None

    def __post_init__(self):
        if not (self.sigma_fit > 0 and math.isfinite(self.sigma_fit)):
            raise NumericalError("fitted marginal standard deviation must be positive")
        if not math.isfinite(self.mu_fit):
            raise NumericalError("fitted marginal mean is not finite")

    @property
    def original_marginal(self) -> tuple[float, float]:
        return self.original.marginal(self.projection)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        base = self.original.sample(rng, n)
        y = self.mu_fit + self.sigma_fit * rng.standard_normal(n)
        row = self.projection.row
        c = self.original.covariance @ row
        s2 = float(row @ c)
        if s2 <= 0:
            raise NumericalError("projected initial variance vanishes")
        return base + np.outer(y - base @ row, c / s2)

    def log_l0(self, x0) -> np.ndarray:
        y = np.atleast_2d(np.asarray(x0, dtype=float)) @ self.projection.row
        mu, s = self.original_marginal
        return norm.logpdf(y, mu, s) - norm.logpdf(y, self.mu_fit, self.sigma_fit)

    def tilted_pdf(self, y) -> np.ndarray:
        return norm.pdf(y, self.mu_fit, self.sigma_fit)


def sample_tilted(t: TiltedInitial, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    return t.sample(rng, n)


def likelihood_l0(t: TiltedInitial, x0) -> np.ndarray:
    out = np.exp(t.log_l0(x0))
    return out if np.ndim(x0) > 1 else out[0]


def fit_tilted_initial(rho0: GaussianDensity, p: Projection, sol: KbeSolution, power: float,
                       t: float = 0.0, n_points: int = 40001) -> TiltedInitial:
    """Moment-match a Gaussian to ``rho0_marginal(y) * gamma(y, t)**power``."""
    if power not in (0.5, 1.0):
        raise ValueError("power must be 0.5 or 1")
    mu, s = rho0.marginal(p)
    if not s > 0:
        raise NumericalError("projected initial variance vanishes")
    k = sol.threshold
    lo = mu - 8 * s
    hi = max(mu, k) + 8 * s
    y = np.linspace(lo, hi, n_points)
    gamma = sol.interpolate(y, t)
    with np.errstate(divide="ignore"):
        logw = norm.logpdf(y, mu, s) + power * np.log(gamma)
    shift = logw.max()
    if not np.isfinite(shift):
        raise NumericalError("tilted weight vanishes on the whole quadrature range")
    w = np.exp(logw - shift)
    z = trapezoid(w, y)
    if not z > 0 or math.log(z) + shift < math.log(1e-300):
        raise NumericalError("normalizing constant underflows; event unreachable on this grid")
    m1 = trapezoid(w * y, y) / z
    var = trapezoid(w * (y - m1) ** 2, y) / z
    if not var > 0:
        raise NumericalError("quadrature produced a non-positive variance")
    return TiltedInitial(rho0, p, float(m1), float(math.sqrt(var)), power)


@dataclass(frozen=True)
class PdeSettings:
    """Grid, patch and projection options for building the control."""

    dx: Optional[float] = None
    dt: Optional[float] = None
    x_min: Optional[float] = None
    patch: Optional[tuple[float, float]] = None
    max_degree: int = 2
    pilot_paths: int = 10_000
    b2_floor: float = 1e-8


@dataclass
class IsArtifacts:
    solution: Optional[KbeSolution] = None
    control: Optional[Callable] = None
    control_field: Optional[ControlField] = None
    tilted: Optional[TiltedInitial] = None
    surrogate: Optional[SurrogateCoefficients] = None
    pilot_failed: int = 0


def projected_coefficients(model, event, rho0, cfg, settings, seed):
    """Scalar coefficients for the backward equation, plus the surrogate fit when ``d > 1``."""
    p = event.projection
    if model.dim_state == 1:
        return Coefficients1D.from_model(model, float(p.row[0])), None, 0
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(PILOT_STREAM,))))
    sample = generate_regression_data(model, p, rho0, settings.pilot_paths, cfg, rng)
    sur = fit_surrogate(sample, BasisSpec(settings.max_degree), settings.b2_floor)
    return sur.as_coefficients(), sur, sample.n_failed


def prepare_artifacts(mode, model: SdeModel, event: RareEvent, rho0: GaussianDensity, cfg: PathConfig,
                      settings: Optional[PdeSettings] = None, seed: int = 0) -> IsArtifacts:
    """Solve the (surrogate) backward equation and derive tilt and control for ``mode``."""
    mode = IsMode.parse(mode)
    if not mode.needs_pde:
        return IsArtifacts()
    settings = settings or PdeSettings()
    k, T = event.threshold, event.length
    coeffs, sur, n_failed = projected_coefficients(model, event, rho0, cfg, settings, seed)
    grid = default_grid(model.name, k, T, settings.dx, settings.dt, settings.x_min)
    patch = settings.patch or default_patch(model.name, k, grid)
    try:
        sol = solve_kbe(coeffs, k, grid, patch)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc
    art = IsArtifacts(solution=sol, surrogate=sur, pilot_failed=n_failed)
    if mode.tilt_power is not None:
        art.tilted = fit_tilted_initial(rho0, event.projection, sol, mode.tilt_power)
    if mode.uses_control:
        field_ = ControlField(sol, model, event.projection)
        art.control_field = field_
        art.control = SwitchedControl(field_, asymptotic_control(model, event.projection, k, T),
                                      T - cfg.delta_t_switch)
    return art


@dataclass
class SampleSet:
    hit: np.ndarray
    log_l0: np.ndarray
    log_lw: np.ndarray
    failed: np.ndarray
    running_max: np.ndarray
    x0: Optional[np.ndarray] = None

    @property
    def likelihood(self) -> np.ndarray:
        return np.exp(self.log_l0 + self.log_lw)

    @property
    def weights(self) -> np.ndarray:
        w = np.where(self.hit & ~self.failed, self.likelihood, 0.0)
        return w

    @classmethod
    def concat(cls, parts: list["SampleSet"]) -> "SampleSet":
        keep_x0 = all(p.x0 is not None for p in parts)
        return cls(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in
              ("hit", "log_l0", "log_lw", "failed", "running_max")),
            x0=np.concatenate([p.x0 for p in parts]) if keep_x0 else None,
        )


def _chunk_generator(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def run_samples(model: SdeModel, event: RareEvent, initial, cfg: PathConfig, n_samples: int, seed: int,
                control: Optional[Callable] = None, chunk_size: int = 20_000, threads: int = 1,
                keep_x0: bool = False) -> SampleSet:
    """Draw ``n_samples`` paths in chunks; chunk ``i`` uses stream ``(seed, i)``.

    ``initial`` is a ``GaussianDensity`` (no tilt) or a ``TiltedInitial``.
    Results do not depend on ``threads``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    sizes = [min(chunk_size, n_samples - s) for s in range(0, n_samples, chunk_size)]

    def work(i):
        rng = _chunk_generator(seed, i)
        x0 = initial.sample(rng, sizes[i])
        log_l0 = initial.log_l0(x0) if isinstance(initial, TiltedInitial) else np.zeros(sizes[i])
        with np.errstate(over="ignore", invalid="ignore"):
            b = simulate_paths(model, event, x0, control, cfg, rng)
        return SampleSet(b.hit, log_l0, b.log_likelihood_w, b.failed, b.running_max,
                         x0 if keep_x0 else None)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(i) for i in range(len(sizes))]
    return SampleSet.concat(parts)


@dataclass(frozen=True)
class EstimatorReport:
    """Point estimate, variance of the estimator and 95% interval."""

    mode: str
    n_samples: int
    alpha_hat: float
    variance: float
    ci_lo: float
    ci_hi: float
    rel_err: float
    n_hits: int
    n_failed: int = 0
    rare_event_warning: bool = False
    seconds: float = 0.0
    weights: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_weights(cls, mode, weights, n_hits: Optional[int] = None, n_failed: int = 0,
                     seconds: float = 0.0, keep_weights: bool = False, extra=None) -> "EstimatorReport":
        w = np.asarray(weights, dtype=float)
        if w.size == 0:
            raise ValueError("no samples")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise NumericalError("weights must be finite and non-negative")
        n = w.size
        alpha = float(np.mean(w))
        var = float(np.mean((w - alpha) ** 2)) / n
        half = Z_CRIT * math.sqrt(var)
        hits = int(np.count_nonzero(w)) if n_hits is None else int(n_hits)
        rel = Z_CRIT * math.sqrt(var) / alpha if alpha > 0 else float("nan")
        return cls(
            mode=str(IsMode.parse(mode).value),
            n_samples=n,
            alpha_hat=alpha,
            variance=var,
            ci_lo=alpha - half,
            ci_hi=alpha + half,
            rel_err=rel,
            n_hits=hits,
            n_failed=int(n_failed),
            rare_event_warning=hits == 0,
            seconds=float(seconds),
            weights=w if keep_weights else None,
            extra=dict(extra or {}),
        )

    @property
    def rel_err_pct(self) -> float:
        return 100.0 * self.rel_err

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)


def estimate(mode, model: SdeModel, event: RareEvent, rho0: GaussianDensity, cfg: PathConfig,
             n_samples: int, seed: int = 0, settings: Optional[PdeSettings] = None,
             artifacts: Optional[IsArtifacts] = None, chunk_size: int = 20_000, threads: int = 1,
             keep_weights: bool = False, ce_options=None) -> EstimatorReport:
    """Run one estimator; IS modes build their artifacts unless supplied."""
    mode = IsMode.parse(mode)
    if cfg.horizon_end != event.length:
        cfg = replace(cfg, horizon_end=event.length)
    if mode is IsMode.CE:
        from .cross_entropy import CeOptions, ce_estimate

        return ce_estimate(model, event, rho0, cfg, n_samples, seed, ce_options or CeOptions(),
                           chunk_size=chunk_size, threads=threads, keep_weights=keep_weights)
    t0 = time.perf_counter()
    if artifacts is None:
        artifacts = prepare_artifacts(mode, model, event, rho0, cfg, settings, seed)
    initial = artifacts.tilted if artifacts.tilted is not None else rho0
    s = run_samples(model, event, initial, cfg, n_samples, seed, artifacts.control if mode.uses_control else None,
                    chunk_size, threads)
    w = s.weights
    extra = {}
    if artifacts.control_field is not None:
        extra["control_clamped"] = artifacts.control_field.n_clamped
    if artifacts.tilted is not None:
        extra["mu_fit"] = artifacts.tilted.mu_fit
        extra["sigma_fit"] = artifacts.tilted.sigma_fit
    return EstimatorReport.from_weights(mode, w, n_hits=int(np.count_nonzero(s.hit & ~s.failed)),
                                        n_failed=int(np.count_nonzero(s.failed)),
                                        seconds=time.perf_counter() - t0, keep_weights=keep_weights,
                                        extra=extra)


class RareEventEstimator(BaseEstimator):
    """Estimator wrapper: ``fit`` an ensemble of initial states, read ``report_``.

    Parameters
    ----------
    model : str
        Built-in model name.
    model_params : dict or None
        Keyword arguments for the model factory.
    threshold : float
        Level the projected running maximum must reach.
    projection_index : int
        Coordinate monitored by the event.
    horizon : float
        Window length.
    mode : str
        One of ``mc``, ``is-rho0``, ``is-w``, ``is-both``, ``ce``.
    n_samples : int
        Number of paths ``J``.
    dt : float
        Euler-Maruyama step.
    seed : int
        Root seed for all random streams.
    threads : int
        Worker threads for chunked sampling.
    """

    def __init__(self, model="double-well", model_params=None, threshold=1.0, projection_index=0,
                 horizon=1.0, mode="is-both", n_samples=100_000, dt=0.01, seed=0, threads=1):
        self.model = model
        self.model_params = model_params
        self.threshold = threshold
        self.projection_index = projection_index
        self.horizon = horizon
        self.mode = mode
        self.n_samples = n_samples
        self.dt = dt
        self.seed = seed
        self.threads = threads

    def fit(self, X, y=None):
        """Use the Gaussian statistics of the ensemble ``X`` as the initial density."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.fit_density(GaussianDensity.from_samples(X))

    def fit_density(self, rho0: GaussianDensity):
        sde = make_model(self.model, **(self.model_params or {}))
        event = RareEvent(self.threshold, Projection.coordinate(self.projection_index, sde.dim_state),
                          (0.0, self.horizon))
        cfg = PathConfig(dt=self.dt, horizon_end=self.horizon)
        self.rho0_ = rho0
        self.report_ = estimate(self.mode, sde, event, rho0, cfg, self.n_samples, self.seed,
                                threads=self.threads)
        self.alpha_ = self.report_.alpha_hat
        return self
