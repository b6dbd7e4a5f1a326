"""Euler-Maruyama path simulation with adaptive end stepping and bridge test.

The adaptive step ``h = min(dt, (T - t) / 2)`` depends only on time, so all
paths in a batch share one time grid and the batch is advanced in lockstep.
Stopped paths are simply dropped from the active set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .models import Projection, RareEvent, SdeModel

__all__ = [
    "PathConfig",
    "PathOutcome",
    "PathBatch",
    "RngStream",
    "em_step",
    "bridge_exit_probability",
    "adaptive_time_grid",
    "simulate_paths",
    "simulate_path",
    "simulate_uniform",
    "SwitchedControl",
    "control_with_switch",
]

Control = Callable[[np.ndarray, float], np.ndarray]

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class PathConfig:
    dt: float = 0.01
    horizon_end: float = 1.0
    delta_t_switch: Optional[float] = None
    epsilon_min_step: float = 1e-6
    bridge_enabled: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.dt < self.horizon_end:
            raise ValueError("dt must be smaller than the horizon")
        if not 0 < self.epsilon_min_step < self.dt:
            raise ValueError("epsilon_min_step must lie in (0, dt)")
        if self.delta_t_switch is None:
            object.__setattr__(self, "delta_t_switch", 10 * self.dt)
        ratio = self.delta_t_switch / self.dt
        if self.delta_t_switch <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("delta_t_switch must be a positive integer multiple of dt")

    @property
    def n_uniform_steps(self) -> int:
        return int(round(self.horizon_end / self.dt))


@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by ``(seed, stream_index)``."""

    seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_index),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class PathOutcome:
    hit: bool
    stopping_time: float
    log_likelihood_w: float
    terminal_state: np.ndarray
    steps_taken: int
    failed: bool = False


@dataclass
class PathBatch:
    hit: np.ndarray
    stopping_time: np.ndarray
    log_likelihood_w: np.ndarray
    terminal_state: np.ndarray
    steps_taken: np.ndarray
    running_max: np.ndarray
    failed: np.ndarray

    def __len__(self):
        return self.hit.size

    def outcome(self, i: int) -> PathOutcome:
        return PathOutcome(
            hit=bool(self.hit[i]),
            stopping_time=float(self.stopping_time[i]),
            log_likelihood_w=float(self.log_likelihood_w[i]),
            terminal_state=self.terminal_state[i].copy(),
            steps_taken=int(self.steps_taken[i]),
            failed=bool(self.failed[i]),
        )


def em_step(model: SdeModel, state, control_value, h: float, noise) -> np.ndarray:
    """One (controlled) Euler-Maruyama step ``x + a h + b xi h + b dW``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = model.check_state(state)
    B = model.diffusion(x)
    xi = np.asarray(control_value, dtype=float)
    dW = np.asarray(noise, dtype=float)
    return x + model.drift(x) * h + B @ (xi * h + dW)


def bridge_exit_probability(model: SdeModel, p: Projection, k_threshold: float, x_k, x_k1, h: float) -> float:
    """Probability that the frozen-coefficient bridge between two nodes crosses the threshold."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x_k = model.check_state(x_k)
    d0 = max(k_threshold - float(p(x_k)), 0.0)
    d1 = max(k_threshold - float(p(x_k1)), 0.0)
    if d0 == 0.0 or d1 == 0.0:
        return 1.0
    g = p.row @ model.diffusion(x_k)
    s2 = float(g @ g)
    if not s2 > 0:
        raise ValueError("projected diffusion vanishes; bridge test undefined")
    return float(np.exp(-2.0 * d0 * d1 / (s2 * h)))


def adaptive_time_grid(cfg: PathConfig) -> tuple[np.ndarray, np.ndarray]:
    """Step start times and sizes of the adaptive rule, up to the ``h <= eps`` exit."""
    T, dt, eps = cfg.horizon_end, cfg.dt, cfg.epsilon_min_step
    starts, sizes = [], []
    k = 0
    # uniform part uses t = k dt to avoid drift from repeated addition
    while (T - k * dt) / 2 >= dt * (1 - 1e-9):
        starts.append(k * dt)
        sizes.append(dt)
        k += 1
    t = k * dt
    while True:
        h = min(dt, (T - t) / 2)
        starts.append(t)
        sizes.append(h)
        t += h
        if h <= eps or t > T:
            break
    return np.array(starts), np.array(sizes)


def _apply_control(B, xi, B_const):
    if B_const is not None:
        return xi @ B_const.T
    return np.einsum("nij,nj->ni", B, xi)


def simulate_paths(
    model: SdeModel,
    event: RareEvent,
    x0,
    control: Optional[Control],
    cfg: PathConfig,
    rng: np.random.Generator,
) -> PathBatch:
    """Simulate a batch of paths under Algorithm-style adaptive stepping.

    ``control(x, t)`` returns ``(m, d_W)`` control values; with ``None`` the
    uncontrolled dynamics are simulated and every log-likelihood stays 0.
    Paths producing non-finite states are flagged ``failed`` and stop.
    """
    x = np.array(model.check_state(x0), dtype=float, ndmin=2)
    n, d = x.shape
    p = event.projection.row
    K = event.threshold
    T = cfg.horizon_end
    B_const = model.constant_diffusion
    g_const = None if B_const is None else p @ B_const
    s2_const = None if g_const is None else float(g_const @ g_const)

    y = x @ p
    hit = y >= K
    tau = np.where(hit, 0.0, T)
    running_max = y.copy()
    loglw = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    failed = np.zeros(n, dtype=bool)
    active = np.flatnonzero(~hit)

    starts, sizes = adaptive_time_grid(cfg)
    for t, h in zip(starts, sizes):
        if active.size == 0:
            break
        xa = x[active]
        a = model.drift(xa)
        B = None if B_const is not None else model.diffusion(xa)
        dW = rng.standard_normal((active.size, model.dim_noise)) * np.sqrt(h)
        incr = a * h
        if control is not None:
            xi = control(xa, t)
            incr += _apply_control(B, xi * h + dW, B_const)
            loglw[active] += -np.sum(xi * dW, axis=1) - 0.5 * h * np.sum(xi * xi, axis=1)
        else:
            incr += _apply_control(B, dW, B_const)
        xn = xa + incr
        yk = y[active]
        yn = xn @ p

        ok = np.isfinite(yn) & np.all(np.isfinite(xn), axis=1)
        if control is not None:
            ok &= np.isfinite(loglw[active])
        if cfg.bridge_enabled:
            if s2_const is not None:
                s2 = s2_const
            else:
                gk = np.einsum("i,nij->nj", p, B)
                s2 = np.sum(gk * gk, axis=1)
            d0 = np.maximum(K - yk, 0.0)
            d1 = np.maximum(K - yn, 0.0)
            prod = d0 * d1
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                q = np.where(prod > 0, np.exp(-2.0 * prod / (s2 * h)), 1.0)
            r = rng.random(active.size)
            crossed = (r < q) & ok
            t_hit = t + 0.5 * h
        else:
            crossed = (yn >= K) & ok
            t_hit = t + h

        x[active] = xn
        y[active] = yn
        steps[active] += 1
        running_max[active] = np.maximum(running_max[active], np.where(ok, yn, -np.inf))

        if np.any(crossed):
            idx = active[crossed]
            hit[idx] = True
            tau[idx] = t_hit
            # pin the projected coordinate to the threshold
            x[idx] += np.outer(K - y[idx], p / (p @ p))
            y[idx] = K
            running_max[idx] = np.maximum(running_max[idx], K)
        if not np.all(ok):
            bad = active[~ok]
            failed[bad] = True
        active = active[~crossed & ok]

    return PathBatch(
        hit=hit,
        stopping_time=tau,
        log_likelihood_w=loglw,
        terminal_state=x,
        steps_taken=steps,
        running_max=running_max,
        failed=failed,
    )


def simulate_path(
    model: SdeModel,
    event: RareEvent,
    x0,
    control: Optional[Control],
    cfg: PathConfig,
    rng: RngStream,
) -> PathOutcome:
    batch = simulate_paths(model, event, np.atleast_2d(x0), control, cfg, rng.generator())
    return batch.outcome(0)


def simulate_uniform(model: SdeModel, x0, dt: float, n_steps: int, rng: np.random.Generator,
                     record: bool = False):
    """Plain uniform-step Euler-Maruyama without stopping.

    Returns the final states, and when ``record`` is set also the states at
    every step start ``(n_steps, n, d)``.
    """
    x = np.array(model.check_state(x0), dtype=float, ndmin=2)
    B_const = model.constant_diffusion
    history = np.empty((n_steps,) + x.shape) if record else None
    for k in range(n_steps):
        if record:
            history[k] = x
        dW = rng.standard_normal((x.shape[0], model.dim_noise)) * np.sqrt(dt)
        B = None if B_const is not None else model.diffusion(x)
        x = x + model.drift(x) * dt + _apply_control(B, dW, B_const)
    return (x, history) if record else x


class SwitchedControl:
    """PDE-based control up to ``T - delta_t``, asymptotic control afterwards."""

    def __init__(self, pde_control: Control, asymptotic_control: Control, t_switch: float):
        self.pde_control = pde_control
        self.asymptotic_control = asymptotic_control
        self.t_switch = float(t_switch)

    def __call__(self, x, t):
        if t <= self.t_switch + _TIME_TOL:
            return self.pde_control(x, t)
        return self.asymptotic_control(x, t)


def control_with_switch(pde_control: Control, asymptotic_control: Control, delta_t_switch: float,
                        horizon_end: float) -> SwitchedControl:
    return SwitchedControl(pde_control, asymptotic_control, horizon_end - delta_t_switch)
