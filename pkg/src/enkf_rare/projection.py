"""Markovian projection: polynomial regression of the projected drift and diffusion.

The surrogate coefficients ``a(y, t) ~ E[P1 a(X_t) | P1 X_t = y]`` and
``b^2(y, t) ~ E[P1 b b^T P1^T (X_t) | P1 X_t = y]`` are fitted by discrete
least squares over a bivariate polynomial basis, orthonormalized with
modified Gram-Schmidt.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import NumericalError
from .kbe import Coefficients1D
from .models import GaussianDensity, Projection, SdeModel
from .paths import PathConfig, simulate_uniform

__all__ = [
    "BasisSpec",
    "RegressionSample",
    "SurrogateCoefficients",
    "RankDeficientError",
    "generate_regression_data",
    "orthonormalize",
    "fit_surrogate",
    "MarkovianProjection",
]


class RankDeficientError(NumericalError):
    """Design matrix too close to singular for the requested basis."""


@dataclass(frozen=True)
class BasisSpec:
    max_degree: int = 2

    def __post_init__(self):
        if int(self.max_degree) != self.max_degree or self.max_degree < 0:
            raise ValueError("max_degree must be a non-negative integer")

    @property
    def index_set(self) -> list[tuple[int, int]]:
        """Exponent pairs ``(p_t, p_y)`` in the tensor-product set."""
        m = self.max_degree
        return [(i, j) for i in range(m + 1) for j in range(m + 1)]

    def __len__(self):
        return (self.max_degree + 1) ** 2

    def design(self, t, y) -> np.ndarray:
        t = np.asarray(t, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        m = self.max_degree
        tp = t[:, None] ** np.arange(m + 1)
        yp = y[:, None] ** np.arange(m + 1)
        return (tp[:, :, None] * yp[:, None, :]).reshape(t.size, -1)


@dataclass(frozen=True)
class RegressionSample:
    times: np.ndarray
    projected_states: np.ndarray
    drift_targets: np.ndarray
    diffusion_targets: np.ndarray
    n_failed: int = 0

    def __post_init__(self):
        n = np.shape(self.times)[0]
        for arr in (self.projected_states, self.drift_targets, self.diffusion_targets):
            if np.shape(arr)[0] != n:
                raise ValueError("regression arrays must share one length")

    def __len__(self):
        return np.shape(self.times)[0]


def generate_regression_data(model: SdeModel, p: Projection, initial: GaussianDensity, n_paths: int,
                             cfg: PathConfig, rng: np.random.Generator) -> RegressionSample:
    """Record projected coefficients at every uniform step start of unstopped pilot paths."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    n_steps = cfg.n_uniform_steps
    x0 = initial.sample(rng, n_paths)
    with np.errstate(over="ignore", invalid="ignore"):
        _, hist = simulate_uniform(model, x0, cfg.dt, n_steps, rng, record=True)
    ok = np.all(np.isfinite(hist), axis=(0, 2))
    hist = hist[:, ok]
    states = hist.reshape(-1, model.dim_state)
    times = np.repeat(cfg.dt * np.arange(n_steps), hist.shape[1])
    row = p.row
    drift = model.drift(states) @ row
    g = np.einsum("i,nij->nj", row, model.diffusion(states))
    return RegressionSample(
        times=times,
        projected_states=states @ row,
        drift_targets=drift,
        diffusion_targets=np.sum(g * g, axis=1),
        n_failed=int(np.count_nonzero(~ok)),
    )


def orthonormalize(sample: RegressionSample, basis: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Modified Gram-Schmidt QR of the monomial design matrix.

    Returns ``(Q, R^{-1})`` with ``Q^T Q = I``; column ``j`` of ``V @ R^{-1}`` is
    the ``j``-th orthonormal basis function evaluated on the sample.
    """
    V = basis.design(sample.times, sample.projected_states)
    n, m = V.shape
    if n < m:
        raise RankDeficientError(f"{n} samples cannot determine {m} coefficients; lower max_degree")
    Q = V.copy()
    R = np.zeros((m, m))
    for j in range(m):
        R[j, j] = np.linalg.norm(Q[:, j])
        if j == 0 and R[0, 0] == 0.0:
            raise RankDeficientError("leading basis column vanishes")
        if R[j, j] < 1e-12 * R[0, 0]:
            raise RankDeficientError("design matrix is rank deficient; lower max_degree")
        Q[:, j] /= R[j, j]
        for i in range(j + 1, m):
            R[j, i] = Q[:, j] @ Q[:, i]
            Q[:, i] -= R[j, i] * Q[:, j]
    r_inv = np.linalg.solve(R, np.eye(m))
    return Q, np.triu(r_inv)


@dataclass(frozen=True)
class SurrogateCoefficients:
    basis: BasisSpec
    r_inverse: np.ndarray
    coeffs_a: np.ndarray
    coeffs_b2: np.ndarray
    b2_floor: float = 1e-8

    def _eval(self, coeffs, y, t):
        y = np.asarray(y, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), y.shape)
        V = self.basis.design(t, y)
        return (V @ (self.r_inverse @ coeffs)).reshape(y.shape)

    def drift(self, y, t) -> np.ndarray:
        return self._eval(self.coeffs_a, y, t)

    def diffusion_sq(self, y, t, floor: bool = True) -> np.ndarray:
        v = self._eval(self.coeffs_b2, y, t)
        return np.maximum(v, self.b2_floor) if floor else v

    def as_coefficients(self) -> Coefficients1D:
        return Coefficients1D(self.drift, self.diffusion_sq)


def fit_surrogate(sample: RegressionSample, basis: BasisSpec, b2_floor: float = 1e-8) -> SurrogateCoefficients:
    if not b2_floor > 0:
        raise ValueError("b2_floor must be positive")
    Q, r_inv = orthonormalize(sample, basis)
    return SurrogateCoefficients(
        basis=basis,
        r_inverse=r_inv,
        coeffs_a=Q.T @ np.asarray(sample.drift_targets, dtype=float),
        coeffs_b2=Q.T @ np.asarray(sample.diffusion_targets, dtype=float),
        b2_floor=float(b2_floor),
    )


class MarkovianProjection(RegressorMixin, BaseEstimator):
    """Regressor over inputs ``[t, y]`` and targets ``[drift, diffusion^2]``.

    Parameters
    ----------
    max_degree : int
        Largest exponent of ``t`` and of ``y`` in the tensor-product basis.
    b2_floor : float
        Lower bound applied to the fitted squared diffusion on prediction.
    """

    def __init__(self, max_degree: int = 2, b2_floor: float = 1e-8):
        self.max_degree = max_degree
        self.b2_floor = b2_floor

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError("X must have columns [t, y]")
        y = y.reshape(len(y), -1)
        if y.shape[1] != 2:
            raise ValueError("targets must have columns [drift, diffusion^2]")
        sample = RegressionSample(X[:, 0], X[:, 1], y[:, 0], y[:, 1])
        self.coefficients_ = fit_surrogate(sample, BasisSpec(self.max_degree), self.b2_floor)
        self.n_features_in_ = 2
        return self

    def fit_sample(self, sample: RegressionSample):
        self.coefficients_ = fit_surrogate(sample, BasisSpec(self.max_degree), self.b2_floor)
        self.n_features_in_ = 2
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coefficients_")
        X = check_array(X)
        c = self.coefficients_
        return np.column_stack([c.drift(X[:, 1], X[:, 0]), c.diffusion_sq(X[:, 1], X[:, 0])])
