"""SDE models, projection geometry and Gaussian densities.

All drift/diffusion evaluators are vectorised over a leading sample axis:
``drift(x)`` maps ``(..., d)`` to ``(..., d)`` and ``diffusion(x)`` maps
``(..., d)`` to ``(..., d, d_W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SdeModel",
    "Projection",
    "GaussianDensity",
    "RareEvent",
    "double_well_potential",
    "double_well_force",
    "double_well_model",
    "langevin_model",
    "charney_devore_model",
    "charney_devore_coefficients",
    "constant_model",
    "project",
    "make_model",
    "MODEL_NAMES",
]


@dataclass(frozen=True)
class SdeModel:
    """Time-homogeneous Ito SDE ``du = a(u) dt + b(u) dW``."""

    name: str
    dim_state: int
    dim_noise: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constant_diffusion: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be positive")
        if self.constant_diffusion is None and self.diffusion_fn is None:
            raise ValueError("either diffusion_fn or constant_diffusion is required")
        if self.constant_diffusion is not None:
            mat = np.array(self.constant_diffusion, dtype=float)
            if mat.shape != (self.dim_state, self.dim_noise):
                raise ValueError(
                    f"diffusion must be {self.dim_state}x{self.dim_noise}, got {mat.shape}"
                )
            mat.setflags(write=False)
            object.__setattr__(self, "constant_diffusion", mat)

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.constant_diffusion is not None:
            shape = x.shape[:-1] + self.constant_diffusion.shape
            return np.broadcast_to(self.constant_diffusion, shape)
        return self.diffusion_fn(x)

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim_state:
            raise ValueError(f"state dimension {x.shape[-1]} != {self.dim_state}")
        return x


@dataclass(frozen=True)
class Projection:
    """Row vector selecting the monitored scalar ``P1 u``."""

    row: np.ndarray

    def __post_init__(self):
        row = np.atleast_1d(np.asarray(self.row, dtype=float)).ravel()
        if not np.any(row):
            raise ValueError("projection row must be nonzero")
        row.setflags(write=False)
        object.__setattr__(self, "row", row)

    @property
    def dim(self) -> int:
        return self.row.size

    @classmethod
    def coordinate(cls, index: int, dim: int) -> "Projection":
        row = np.zeros(dim)
        row[index] = 1.0
        return cls(row)

    def __call__(self, x) -> np.ndarray:
        return project(self, x)


def project(p: Projection, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.dim:
        raise ValueError(f"projection of length {p.dim} applied to state of dim {x.shape[-1]}")
    return x @ p.row


@dataclass(frozen=True)
class GaussianDensity:
    """Multivariate normal stored by mean and covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise ValueError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-12 * max(eig.max(), 1e-300):
            raise ValueError("covariance must be positive semi-definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def from_std(cls, mean, std) -> "GaussianDensity":
        std = np.atleast_1d(np.asarray(std, dtype=float))
        return cls(mean, np.diag(std**2))

    @classmethod
    def from_samples(cls, samples, regularization: float = 1e-10) -> "GaussianDensity":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] < 2:
            raise ValueError("need at least two samples")
        mean = samples.mean(axis=0)
        cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
        d = cov.shape[0]
        cov = cov + regularization * np.trace(cov) / d * np.eye(d)
        return cls(mean, 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def cholesky(self) -> np.ndarray:
        # semi-definite covariances fall back to an eigen factor
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(self.covariance)
            return v * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.cholesky.T

    def marginal(self, p: Projection) -> tuple[float, float]:
        """Mean and standard deviation of ``P1 x``."""
        mu = float(p.row @ self.mean)
        var = float(p.row @ self.covariance @ p.row)
        return mu, float(np.sqrt(max(var, 0.0)))

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        L = self.cholesky
        z = np.linalg.solve(L, (x - self.mean).T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(z**2, axis=0) - 0.5 * (self.dim * np.log(2 * np.pi) + logdet)


@dataclass(frozen=True)
class RareEvent:
    """Running maximum of ``P1 u`` over ``horizon`` reaching ``threshold``."""

    threshold: float
    projection: Projection
    horizon: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        t0, t1 = (float(v) for v in self.horizon)
        if not t1 > t0:
            raise ValueError("horizon must have strictly positive length")
        object.__setattr__(self, "horizon", (t0, t1))
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def length(self) -> float:
        return self.horizon[1] - self.horizon[0]


def double_well_potential(u):
    u = np.asarray(u, dtype=float)
    return 1.0 / (2.0 + 4.0 * u**2) + u**2 / 4.0


def double_well_force(u):
    """``-V'(u)`` for the double-well potential."""
    u = np.asarray(u, dtype=float)
    return 8.0 * u / (2.0 + 4.0 * u**2) ** 2 - u / 2.0


def double_well_model(b_diffusion: float = 0.5) -> SdeModel:
    if not b_diffusion > 0:
        raise ValueError("b_diffusion must be positive")

    def drift(x):
        return double_well_force(x)

    return SdeModel(
        name="double-well",
        dim_state=1,
        dim_noise=1,
        drift=drift,
        constant_diffusion=np.array([[float(b_diffusion)]]),
        params={"b_diffusion": float(b_diffusion)},
    )


def langevin_model(kappa: float = 2**-5 * np.pi**2, temperature: float = 1.0) -> SdeModel:
    if not (kappa > 0 and temperature > 0):
        raise ValueError("kappa and temperature must be positive")

    def drift(x):
        x = np.asarray(x, dtype=float)
        u, v = x[..., 0], x[..., 1]
        return np.stack([v, double_well_force(u) - kappa * v], axis=-1)

    return SdeModel(
        name="langevin",
        dim_state=2,
        dim_noise=1,
        drift=drift,
        constant_diffusion=np.array([[0.0], [np.sqrt(2.0 * kappa * temperature)]]),
        params={"kappa": float(kappa), "temperature": float(temperature)},
    )


CDV_DEFAULTS = dict(u1_star=0.95, u4_star=-0.76095, C=0.1, gamma=0.2, beta=1.25, q=0.5)


def charney_devore_coefficients(
    u1_star=0.95, u4_star=-0.76095, C=0.1, gamma=0.2, beta=1.25, q=0.5
) -> dict:
    """Coefficient set of the six-mode Charney-deVore truncation.

    The channel ratio ``q`` appears in every ``alpha_m`` denominator.
    """
    s2 = np.sqrt(2.0)
    out = dict(u1_star=u1_star, u4_star=u4_star, C=C)
    for m in (1, 2):
        out[f"alpha{m}"] = 8 * s2 / np.pi * m**2 / (4 * m**2 - 1) * (q**2 + m**2 - 1) / (q**2 + m**2)
        out[f"beta{m}"] = beta * q**2 / (q**2 + m**2)
        out[f"gamma{m}"] = gamma * s2 * q / np.pi * 4 * m**3 / ((4 * m**2 - 1) * (q**2 + m**2))
        out[f"gamma_tilde{m}"] = gamma * s2 * q / np.pi * 4 * m / (4 * m**2 - 1)
        out[f"delta{m}"] = 64 * s2 / (15 * np.pi) * (q**2 - m**2 + 1) / (q**2 + m**2)
    out["eta"] = 16 * s2 / (5 * np.pi)
    return out


def charney_devore_model(b_diffusion: float = 0.01, **overrides) -> SdeModel:
    if b_diffusion < 0:
        raise ValueError("b_diffusion must be nonnegative")
    c = charney_devore_coefficients(**{**CDV_DEFAULTS, **overrides})
    a1, a2 = c["alpha1"], c["alpha2"]
    be1, be2 = c["beta1"], c["beta2"]
    g1, g2 = c["gamma1"], c["gamma2"]
    gt1, gt2 = c["gamma_tilde1"], c["gamma_tilde2"]
    d1, d2 = c["delta1"], c["delta2"]
    eta, C = c["eta"], c["C"]
    u1s, u4s = c["u1_star"], c["u4_star"]

    def drift(x):
        x = np.asarray(x, dtype=float)
        u1, u2, u3, u4, u5, u6 = (x[..., i] for i in range(6))
        return np.stack(
            [
                gt1 * u3 - C * (u1 - u1s),
                -(a1 * u1 - be1) * u3 - C * u2 - d1 * u4 * u6,
                (a1 * u1 - be1) * u2 - g1 * u1 - C * u3 + d1 * u4 * u5,
                gt2 * u6 - C * (u4 - u4s) + eta * (u2 * u6 - u3 * u5),
                -(a2 * u1 - be2) * u6 - C * u5 - d2 * u3 * u4,
                (a2 * u1 - be2) * u5 - g2 * u4 - C * u6 + d2 * u2 * u4,
            ],
            axis=-1,
        )

    return SdeModel(
        name="cdv",
        dim_state=6,
        dim_noise=6,
        drift=drift,
        constant_diffusion=np.sqrt(2.0 * b_diffusion) * np.eye(6),
        params={"b_diffusion": float(b_diffusion), **c},
    )


def constant_model(a: float = 0.0, b: float = 0.0) -> SdeModel:
    """Scalar model with constant drift ``a`` and diffusion ``b``."""

    def drift(x):
        return np.full(np.shape(x), float(a))

    return SdeModel(
        name="constant",
        dim_state=1,
        dim_noise=1,
        drift=drift,
        constant_diffusion=np.array([[float(b)]]),
        params={"a": float(a), "b": float(b)},
    )


_FACTORIES = {
    "double-well": double_well_model,
    "langevin": langevin_model,
    "cdv": charney_devore_model,
    "constant": constant_model,
}
MODEL_NAMES = tuple(_FACTORIES)


def make_model(name: str, **params) -> SdeModel:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}") from None
    return factory(**params)
