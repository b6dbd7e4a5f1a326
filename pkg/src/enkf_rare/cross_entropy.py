"""Multilevel cross-entropy tilt of the initial density.

The projected marginal of the initial Gaussian is shifted through a ladder
of intermediate levels given by sample quantiles of the running maximum.
By default only the mean moves; the standard deviation stays at its
original value.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NumericalError
from .models import GaussianDensity, RareEvent, SdeModel
from .paths import PathConfig
from .sampling import EstimatorReport, TiltedInitial, run_samples

__all__ = [
    "CeOptions",
    "CeState",
    "LevelCapError",
    "UnreachableLevelError",
    "ce_quantile",
    "ce_update",
    "ce_level",
    "ce_tilt",
    "ce_estimate",
]


class LevelCapError(NumericalError):
    """The level ladder did not reach the threshold within the cap."""


class UnreachableLevelError(NumericalError):
    """All weights vanished at the current level."""


@dataclass(frozen=True)
class CeOptions:
    beta: float = 0.01
    pilot_size: int = 10_000
    level_cap: int = 20
    free_variance: bool = False

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.pilot_size < 100:
            raise ValueError("pilot_size must be at least 100")
        if self.level_cap < 1:
            raise ValueError("level_cap must be positive")


@dataclass(frozen=True)
class CeState:
    level: int
    mu_tilde: float
    sigma_tilde: float
    current_threshold: float
    quantile_beta: float
    pilot_size: int
    final_size: int
    history: tuple = field(default=())


def ce_quantile(running_max, beta: float, k: float) -> float:
    """Order statistic at position ``ceil((1 - beta) J)``, capped at ``k``."""
    m = np.sort(np.asarray(running_max, dtype=float))
    pos = math.ceil((1 - beta) * m.size)
    q = m[min(max(pos, 1), m.size) - 1]
    return float(k) if q >= k else float(q)


def ce_update(values, weights, sigma_fixed: Optional[float] = None) -> tuple[float, float]:
    """Weighted mean (and, without ``sigma_fixed``, weighted std) of ``values``."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise UnreachableLevelError("level unreachable, increase J1 or beta")
    mu = float(w @ v / total)
    if sigma_fixed is not None:
        return mu, float(sigma_fixed)
    var = float(w @ (v - mu) ** 2 / total)
    if not var > 0:
        raise UnreachableLevelError("weighted variance collapsed; increase J1 or beta")
    return mu, math.sqrt(var)


def ce_tilt(rho0: GaussianDensity, event: RareEvent, mu: float, sigma: float) -> TiltedInitial:
    return TiltedInitial(rho0, event.projection, mu, sigma)


def ce_level(state: CeState, model: SdeModel, event: RareEvent, rho0: GaussianDensity, cfg: PathConfig,
             seed: int, options: CeOptions, chunk_size: int = 20_000, threads: int = 1) -> CeState:
    """One pass: quantile level from pilot paths, then the weighted parameter update."""
    tilt = ce_tilt(rho0, event, state.mu_tilde, state.sigma_tilde)
    s = run_samples(model, event, tilt, cfg, options.pilot_size, seed, None, chunk_size, threads,
                    keep_x0=True)
    ok = ~s.failed
    k_hat = ce_quantile(s.running_max[ok], options.beta, event.threshold)
    k_hat = max(k_hat, state.current_threshold)
    reached = (s.running_max >= k_hat) & ok
    # sqrt of an indicator is the indicator itself
    w = np.where(reached, np.exp(s.log_l0), 0.0)
    y0 = s.x0 @ event.projection.row
    _, sigma0 = rho0.marginal(event.projection)
    mu, sigma = ce_update(y0, w, None if options.free_variance else sigma0)
    return replace(
        state,
        level=state.level + 1,
        mu_tilde=mu,
        sigma_tilde=sigma,
        current_threshold=k_hat,
        history=state.history + ((state.level + 1, k_hat, mu, sigma),),
    )


def _level_seed(seed: int, level: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(2**30 + level,)).generate_state(1)[0])


def ce_estimate(model: SdeModel, event: RareEvent, rho0: GaussianDensity, cfg: PathConfig, n_samples: int,
                seed: int = 0, options: Optional[CeOptions] = None, chunk_size: int = 20_000, threads: int = 1,
                keep_weights: bool = False) -> EstimatorReport:
    """Run the level ladder, then estimate with ``n_samples`` paths from the final tilt."""
    options = options or CeOptions()
    t0 = time.perf_counter()
    mu0, sigma0 = rho0.marginal(event.projection)
    state = CeState(0, mu0, sigma0, -math.inf, options.beta, options.pilot_size, n_samples)
    while state.current_threshold < event.threshold:
        if state.level >= options.level_cap:
            raise LevelCapError(
                f"cross-entropy did not reach the threshold within {options.level_cap} levels "
                f"(last level {state.current_threshold:.4g})"
            )
        state = ce_level(state, model, event, rho0, cfg, _level_seed(seed, state.level), options,
                         chunk_size, threads)
    tilt = ce_tilt(rho0, event, state.mu_tilde, state.sigma_tilde)
    s = run_samples(model, event, tilt, cfg, n_samples, seed, None, chunk_size, threads)
    trace = [dict(level=l, k_hat=k, mu_tilde=m, sigma_tilde=sg) for l, k, m, sg in state.history]
    return EstimatorReport.from_weights(
        "ce", s.weights, n_hits=int(np.count_nonzero(s.hit & ~s.failed)),
        n_failed=int(np.count_nonzero(s.failed)), seconds=time.perf_counter() - t0,
        keep_weights=keep_weights,
        extra={"levels": state.level, "trace": trace, "mu_fit": state.mu_tilde, "sigma_fit": state.sigma_tilde},
    )
