"""Ensemble Kalman filter with perturbed observations and a rare-event monitor.

Between two observation times the monitor estimates the probability that the
projected state exceeds the threshold, using the Gaussian fitted to the
current (updated) ensemble as the initial density.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .errors import NumericalError
from .models import GaussianDensity, RareEvent, SdeModel
from .paths import PathConfig, simulate_uniform
from .sampling import EstimatorReport, IsMode, PdeSettings, estimate

__all__ = [
    "ObservationModel",
    "Ensemble",
    "WindowRecord",
    "kalman_gain",
    "predict",
    "update",
    "synthetic_signal",
    "read_observations",
    "run_filter_with_monitor",
]


@dataclass(frozen=True)
class ObservationModel:
    h_matrix: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        G = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if G.shape != (H.shape[0], H.shape[0]):
            raise ValueError("noise covariance must be m x m for an m-row H")
        if not np.allclose(G, G.T):
            raise ValueError("noise covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise ValueError("noise covariance must be positive definite") from exc
        object.__setattr__(self, "h_matrix", H)
        object.__setattr__(self, "noise_cov", G)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim_obs(self) -> int:
        return self.h_matrix.shape[0]

    def sample_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim_obs)) @ self._chol.T


@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        m = np.asarray(self.members, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members")
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def covariance(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.members, rowvar=False, ddof=1))

    def gaussian(self, regularization: float = 1e-10) -> GaussianDensity:
        return GaussianDensity.from_samples(self.members, regularization)


def kalman_gain(cov: np.ndarray, obs: ObservationModel) -> np.ndarray:
    """``C H^T (H C H^T + Gamma)^{-1}`` via a linear solve."""
    H = obs.h_matrix
    S = H @ cov @ H.T + obs.noise_cov
    try:
        return np.linalg.solve(S, H @ cov).T  # S symmetric
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc


def predict(ens: Ensemble, model: SdeModel, cfg: PathConfig, rng: np.random.Generator):
    """Propagate every member over one window with plain Euler-Maruyama."""
    with np.errstate(over="ignore", invalid="ignore"):
        x = simulate_uniform(model, ens.members, cfg.dt, cfg.n_uniform_steps, rng)
    if not np.all(np.isfinite(x)):
        raise NumericalError("ensemble member blew up during prediction")
    out = Ensemble(x, ens.time_index + 1)
    return out, out.mean, out.covariance


def update(ens: Ensemble, obs: ObservationModel, y, rng: np.random.Generator) -> Ensemble:
    """Perturbed-observation analysis step."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (obs.dim_obs,):
        raise ValueError(f"observation must have length {obs.dim_obs}")
    K = kalman_gain(ens.covariance, obs)
    v = ens.members
    y_pert = y + obs.sample_noise(rng, ens.size)
    innovation = y_pert - v @ obs.h_matrix.T
    return Ensemble(v + innovation @ K.T, ens.time_index)


def synthetic_signal(model: SdeModel, obs: ObservationModel, u0, windows: int, cfg: PathConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Truth at times ``1..windows`` and noisy observations of it."""
    u = np.atleast_2d(np.asarray(u0, dtype=float))
    truth, ys = [], []
    for _ in range(windows):
        u = simulate_uniform(model, u, cfg.dt, cfg.n_uniform_steps, rng)
        truth.append(u[0].copy())
        ys.append(obs.h_matrix @ u[0] + obs.sample_noise(rng, 1)[0])
    return np.array(truth), np.array(ys)


def read_observations(path) -> np.ndarray:
    """Observation CSV with a header; every column after ``n`` (if present) is a component."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("observation file is empty")
    header, body = rows[0], rows[1:]
    start = 1 if header and header[0].strip() == "n" else 0
    return np.array([[float(v) for v in r[start:]] for r in body if r])


@dataclass(frozen=True)
class WindowRecord:
    n: int
    observation: Optional[np.ndarray]
    mean: np.ndarray
    truth: Optional[np.ndarray]
    report: Optional[EstimatorReport]
    status: str = "ok"


def run_filter_with_monitor(model: SdeModel, obs: ObservationModel, event: RareEvent,
                            initial: GaussianDensity, observations: Iterable, cfg: PathConfig,
                            enkf_size: int, mode="is-both", monitor_size: int = 10_000, seed: int = 0,
                            truth: Optional[np.ndarray] = None, monitor_initial: bool = True,
                            settings: Optional[PdeSettings] = None, threads: int = 1) -> list[WindowRecord]:
    """Filter through ``observations``; estimate the exceedance before each prediction.

    Window ``n`` monitors the interval after analysis time ``n``. With
    ``monitor_initial`` the zeroth window uses ``initial`` itself, before any
    data are assimilated. A monitor failure is recorded and the filter goes on.
    """
    mode = IsMode.parse(mode)
    cfg = replace(cfg, horizon_end=event.length)
    ss = np.random.SeedSequence(int(seed))
    filter_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    members = initial.sample(filter_rng, enkf_size)
    ens = Ensemble(members, 0)
    records = []

    def monitor(n, rho0):
        try:
            rep = estimate(mode, model, event, rho0, cfg, monitor_size,
                           seed=int(np.random.SeedSequence(int(seed), spawn_key=(7, n)).generate_state(1)[0]),
                           settings=settings, threads=threads)
            return rep, "ok"
        except (NumericalError, ValueError) as exc:
            return None, f"error: {exc}"

    if monitor_initial:
        rep, status = monitor(0, initial)
        records.append(WindowRecord(0, None, initial.mean.copy(), None, rep, status))
    for i, y in enumerate(observations):
        ens, _, _ = predict(ens, model, cfg, filter_rng)
        ens = update(ens, obs, y, filter_rng)
        n = ens.time_index
        rho0 = ens.gaussian()
        rep, status = monitor(n, rho0)
        tr = None if truth is None else np.asarray(truth[i])
        records.append(WindowRecord(n, np.atleast_1d(np.asarray(y, dtype=float)), ens.mean, tr, rep, status))
    return records
