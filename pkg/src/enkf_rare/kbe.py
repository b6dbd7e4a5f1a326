"""Backward Kolmogorov equation for the exit probability and the derived control.

Solves ``g_t + a g_y + 0.5 b^2 g_yy = 0`` on ``[x_min, K] x [0, T]`` with
``g(K, t) = 1``, ``g(y, T) = 0`` for ``y < K`` and a linear-extrapolation
condition at ``x_min``. The corner discontinuity at ``(K, T)`` is covered by
the constant-coefficient closed form with coefficients frozen at ``(K, T)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import log_ndtr

from .models import Projection, SdeModel

__all__ = [
    "Grid1D",
    "KbeSolution",
    "Coefficients1D",
    "ControlField",
    "gamma_const",
    "log_gamma_const",
    "xi_frozen",
    "xi_asymptotic",
    "solve_kbe",
    "control_from_gamma",
    "asymptotic_control",
    "default_grid",
    "default_patch",
    "PATCH_TABLE",
    "GAMMA_FLOOR",
    "GAMMA_SWITCH",
]

GAMMA_FLOOR = 1e-300
GAMMA_SWITCH = 1e-12

# (dx_fr, dt_fr) keyed by (model, threshold)
PATCH_TABLE = {
    ("double-well", 0.0): (0.185, 0.0225),
    ("double-well", 0.5): (0.195, 0.0250),
    ("double-well", 1.0): (0.185, 0.0225),
    ("double-well", 1.2): (0.185, 0.0225),
    ("double-well", 1.5): (0.185, 0.0225),
    ("double-well", 2.0): (0.185, 0.0225),
    ("double-well", 2.5): (0.200, 0.0275),
    ("double-well", 3.0): (0.195, 0.0250),
    ("langevin", 2.0): (0.170, 0.00625),
    ("langevin", 2.5): (0.121, 0.0025),
    ("langevin", 3.0): (0.120, 0.0025),
    ("langevin", 3.5): (0.1365, 0.00375),
}

_GRID_DEFAULTS = {
    "double-well": dict(dx=0.005, dt_ratio=0.5, x_min=-5.0),
    "langevin": dict(dx=0.006, dt_ratio=0.2, x_min=-3.0),
    "cdv": dict(dx=0.002, dt_ratio=0.2, x_min=0.2),
}


def _log_erfc(z):
    # erfc(z) = 2 Phi(-sqrt(2) z)
    return math.log(2.0) + log_ndtr(-np.sqrt(2.0) * np.asarray(z, dtype=float))


def log_gamma_const(a, b, k, x, t, t_end):
    """Logarithm of the constant-coefficient exit probability (``x < K``, ``t < T``)."""
    x = np.asarray(x, dtype=float)
    tau = np.asarray(t_end - np.asarray(t, dtype=float), dtype=float)
    dist = k - x
    scale = abs(b) * np.sqrt(2.0 * tau)
    r_minus = (dist - a * tau) / scale
    r_plus = (dist + a * tau) / scale
    first = _log_erfc(r_minus)
    second = 2.0 * a * dist / b**2 + _log_erfc(r_plus)
    return np.logaddexp(first, second) + math.log(0.5)


def gamma_const(a, b, k, x, t, t_end):
    """Exit probability of ``dX = a dt + b dW`` through ``K`` before ``T``."""
    if not b > 0:
        raise ValueError("b must be positive")
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    out = np.zeros(x.shape)
    at_or_above = x >= k
    out[at_or_above] = 1.0
    inside = ~at_or_above & (t < t_end)
    if np.any(inside):
        with np.errstate(over="ignore"):
            out[inside] = np.exp(log_gamma_const(a, b, k, x[inside], t[inside], t_end))
    return np.clip(out, 0.0, 1.0) if out.ndim else float(np.clip(out, 0.0, 1.0))


def xi_asymptotic(a, b, k, x, t, t_end):
    """Near-terminal control ``(K - x) / (b (T - t)) - a / b``."""
    return (k - np.asarray(x, dtype=float)) / (b * (t_end - t)) - a / b


def xi_frozen(a, b, k, x, t, t_end):
    """``b d/dx log gamma_const`` in closed form, evaluated in log space."""
    if not t < t_end:
        raise ValueError("t must be smaller than t_end")
    x = np.asarray(x, dtype=float)
    tau = t_end - t
    dist = k - x
    scale = abs(b) * np.sqrt(2.0 * tau)
    r_minus = (dist - a * tau) / scale
    r_plus = (dist + a * tau) / scale
    expo = 2.0 * a * dist / b**2
    log_g = np.logaddexp(_log_erfc(r_minus), expo + _log_erfc(r_plus)) + math.log(0.5)
    log_pref = -math.log(abs(b) * math.sqrt(2.0 * math.pi * tau))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ratio = np.exp(-r_minus**2 + log_pref - log_g) + np.exp(-r_plus**2 + expo + log_pref - log_g)
        if a != 0.0:
            drift_part = np.exp(math.log(abs(a) / b**2) + expo + _log_erfc(r_plus) - log_g)
            ratio = ratio - math.copysign(1.0, a) * drift_part
        out = b * ratio
    fallback = xi_asymptotic(a, b, k, x, t, t_end)
    out = np.where(np.isfinite(out), out, fallback)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    dx: float
    dt: float
    t_end: float

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be below the threshold")
        if not (self.dx > 0 and self.dt > 0 and self.t_end > 0):
            raise ValueError("grid steps and horizon must be positive")
        nx = (self.x_max - self.x_min) / self.dx
        if abs(nx - round(nx)) > 1e-9 * max(1.0, nx):
            raise ValueError("(K - x_min) / dx must be an integer")
        nt = self.t_end / self.dt
        if abs(nt - round(nt)) > 1e-9 * max(1.0, nt):
            raise ValueError("t_end / dt must be an integer")
        if round(nx) + 1 < 8:
            raise ValueError("grid needs at least 8 nodes")

    @classmethod
    def aligned(cls, x_min, k, dx, dt, t_end) -> "Grid1D":
        """Grid with ``x_min`` pushed down and ``dt`` shrunk so both divide evenly."""
        nx = math.ceil((k - x_min) / dx - 1e-9)
        nt = math.ceil(t_end / dt - 1e-9)
        return cls(k - nx * dx, k, dx, t_end / nt, t_end)

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.dx))

    @property
    def nt(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def x(self) -> np.ndarray:
        return self.x_max - self.dx * np.arange(self.nx, -1, -1)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)


@dataclass(frozen=True)
class Coefficients1D:
    """Scalar drift and squared diffusion as functions of ``(y, t)``."""

    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion_sq: Callable[[np.ndarray, float], np.ndarray]

    @classmethod
    def from_model(cls, model: SdeModel, scale: float = 1.0) -> "Coefficients1D":
        """Coefficients of ``y = scale * x`` for a scalar model."""
        if model.dim_state != 1:
            raise ValueError("direct coefficients require a scalar model")
        if scale == 0:
            raise ValueError("scale must be nonzero")

        def drift(y, t):
            x = np.asarray(y, dtype=float) / scale
            return scale * model.drift(x[..., None])[..., 0]

        def diffusion_sq(y, t):
            x = np.asarray(y, dtype=float) / scale
            B = model.diffusion(x[..., None])
            return scale**2 * np.sum(B[..., 0, :] ** 2, axis=-1)

        return cls(drift, diffusion_sq)

    @classmethod
    def constant(cls, a: float, b: float) -> "Coefficients1D":
        return cls(lambda y, t: np.full(np.shape(y), float(a)),
                   lambda y, t: np.full(np.shape(y), float(b) ** 2))


@dataclass(frozen=True)
class KbeSolution:
    grid: Grid1D
    gamma: np.ndarray  # (nt + 1, nx + 1), rows are time levels
    threshold: float
    corner_patch: tuple[float, float]
    coefficients: Coefficients1D
    raw_min: float = 0.0
    raw_max: float = 1.0
    frozen: tuple[float, float] = (0.0, 1.0)

    def at_time(self, t: float) -> np.ndarray:
        """Linear-in-time slice of gamma on the spatial nodes."""
        g = self.grid
        s = np.clip(t / g.dt, 0, g.nt)
        i = min(int(s), g.nt - 1)
        w = s - i
        return (1 - w) * self.gamma[i] + w * self.gamma[i + 1]

    def interpolate(self, y, t: float) -> np.ndarray:
        """Exit probability at ``(y, t)``; 1 at or above ``K``, clamped below ``x_min``."""
        y = np.asarray(y, dtype=float)
        vals = np.interp(y, self.grid.x, self.at_time(t))
        return np.where(y >= self.threshold, 1.0, vals)


def _patch_steps(patch, grid: Grid1D) -> tuple[int, int]:
    dx_fr, dt_fr = patch
    ix = max(1, int(round(dx_fr / grid.dx)))
    it = max(1, int(round(dt_fr / grid.dt)))
    if ix >= grid.nx - 2 or it > grid.nt:
        raise ValueError("corner patch does not fit inside the grid")
    return ix, it


def _cn_sweep(x, t_levels, terminal, right_values, coeffs: Coefficients1D):
    """Crank-Nicolson backward sweep on nodes ``x`` (last node Dirichlet).

    ``t_levels`` decreases from the terminal time. The left node is tied to its
    neighbours by a vanishing second difference.
    """
    n_lev = len(t_levels)
    m = x.size - 1  # Dirichlet node index
    dx = x[1] - x[0]
    out = np.empty((n_lev, x.size))
    out[0] = terminal
    out[0, m] = right_values[0]
    xi = x[1:m]  # unknowns 1..m-1
    for n in range(1, n_lev):
        t_new, t_old = t_levels[n], t_levels[n - 1]
        h = t_old - t_new
        t_mid = 0.5 * (t_new + t_old)
        a = coeffs.drift(xi, t_mid)
        b2 = coeffs.diffusion_sq(xi, t_mid)
        lo = -a / (2 * dx) + 0.5 * b2 / dx**2
        di = -b2 / dx**2
        up = a / (2 * dx) + 0.5 * b2 / dx**2
        g_old = out[n - 1]
        # explicit half: (I + h/2 L) g_old
        rhs = g_old[1:m] + 0.5 * h * (lo * g_old[0:m - 1] + di * g_old[1:m] + up * g_old[2:m + 1])
        # implicit half: (I - h/2 L) g_new
        L = -0.5 * h * lo
        D = 1.0 - 0.5 * h * di
        U = -0.5 * h * up
        # ghost elimination g0 = 2 g1 - g2
        D = D.copy()
        U = U.copy()
        D[0] += 2.0 * L[0]
        if U.size > 1:
            U[0] -= L[0]
        rhs[-1] -= U[-1] * right_values[n]
        ab = np.zeros((3, xi.size))
        ab[0, 1:] = U[:-1]
        ab[1] = D
        ab[2, :-1] = L[1:]
        g_new = np.empty(x.size)
        g_new[1:m] = solve_banded((1, 1), ab, rhs, check_finite=False)
        g_new[0] = 2.0 * g_new[1] - g_new[2]
        g_new[m] = right_values[n]
        if not np.all(np.isfinite(g_new)):
            raise FloatingPointError("tridiagonal solve produced non-finite values")
        out[n] = g_new
    return out


def solve_kbe(coeffs: Coefficients1D, k: float, grid: Grid1D, patch: tuple[float, float]) -> KbeSolution:
    """Three-region solve: frozen-coefficient corner, short strip, full domain."""
    if not math.isclose(grid.x_max, k, rel_tol=0, abs_tol=1e-12):
        raise ValueError("grid must end at the threshold")
    ix, it = _patch_steps(patch, grid)
    x, t = grid.x, grid.t
    nx, nt = grid.nx, grid.nt
    T = grid.t_end

    a_fr = float(coeffs.drift(np.array([k]), T)[0])
    b_fr = float(np.sqrt(coeffs.diffusion_sq(np.array([k]), T)[0]))
    if not b_fr > 0:
        raise ValueError("diffusion vanishes at the threshold; frozen patch undefined")

    def g_fr(xv, tv):
        xv, tv = np.broadcast_arrays(np.asarray(xv, dtype=float), np.asarray(tv, dtype=float))
        out = np.zeros(xv.shape)
        out[xv >= k] = 1.0
        inner = (xv < k) & (tv < T)
        out[inner] = gamma_const(a_fr, b_fr, k, xv[inner], tv[inner], T)
        return out

    gamma = np.empty((nt + 1, nx + 1))
    jb = nx - ix  # first node of the frozen patch
    lev_switch = nt - it

    # region I
    corner_t = t[lev_switch:]
    gamma[lev_switch:, jb:] = g_fr(x[None, jb:], corner_t[:, None])

    # region II on nodes 0..jb, boundary at jb from the frozen solution
    t_lev2 = t[lev_switch:][::-1]
    right2 = gamma[lev_switch:, jb][::-1]
    strip = _cn_sweep(x[: jb + 1], t_lev2, np.zeros(jb + 1), right2, coeffs)
    gamma[lev_switch:, : jb + 1] = strip[::-1]
    gamma[lev_switch:, jb] = gamma[lev_switch:, jb]  # boundary reads are the frozen values

    # region III on the full grid
    if lev_switch > 0:
        t_lev3 = t[: lev_switch + 1][::-1]
        start = gamma[lev_switch].copy()
        full = _cn_sweep(x, t_lev3, start, np.ones(t_lev3.size), coeffs)
        gamma[: lev_switch + 1] = full[::-1]

    raw_min, raw_max = float(gamma.min()), float(gamma.max())
    np.clip(gamma, 0.0, 1.0, out=gamma)
    gamma.setflags(write=False)
    return KbeSolution(
        grid=grid,
        gamma=gamma,
        threshold=float(k),
        corner_patch=(ix * grid.dx, it * grid.dt),
        coefficients=coeffs,
        raw_min=raw_min,
        raw_max=raw_max,
        frozen=(a_fr, b_fr),
    )


class ControlField:
    """``xi(x, t) = b(x)^T P1^T d/dy log gamma(P1 x, t)`` on a solved grid.

    Where ``gamma`` falls below ``GAMMA_SWITCH`` the log-derivative is replaced
    by its small-probability asymptote ``(K - y) / (s^2 (T - t)) - a / s^2``.
    """

    def __init__(self, solution: KbeSolution, model: SdeModel, p: Projection):
        self.solution = solution
        self.model = model
        self.projection = p
        self.n_clamped = 0
        g = solution.grid
        self.dlog = self._log_derivative(solution)
        self._B_const = model.constant_diffusion
        self._g_const = None if self._B_const is None else self._B_const.T @ p.row
        self._x0, self._dx, self._nx = g.x_min, g.dx, g.nx
        self._dt, self._nt = g.dt, g.nt

    @staticmethod
    def _log_derivative(sol: KbeSolution) -> np.ndarray:
        g = sol.grid
        logg = np.log(np.maximum(sol.gamma, GAMMA_FLOOR))
        d = np.empty_like(logg)
        d[:, 1:-1] = (logg[:, 2:] - logg[:, :-2]) / (2 * g.dx)
        d[:, 0] = (logg[:, 1] - logg[:, 0]) / g.dx
        d[:, -1] = (logg[:, -1] - logg[:, -2]) / g.dx
        x, t = g.x, g.t
        coeffs = sol.coefficients
        for n in range(g.nt):
            small = sol.gamma[n] < GAMMA_SWITCH
            if np.any(small):
                ys = x[small]
                a = coeffs.drift(ys, t[n])
                s2 = coeffs.diffusion_sq(ys, t[n])
                d[n, small] = (sol.threshold - ys) / (s2 * (g.t_end - t[n])) - a / s2
        d[g.nt] = 0.0  # never queried: the asymptotic control takes over near T
        d.setflags(write=False)
        return d

    def log_gradient(self, y, t: float) -> np.ndarray:
        """Bilinear interpolation of ``d/dy log gamma`` at scalar time ``t``."""
        y = np.asarray(y, dtype=float)
        sx = (y - self._x0) / self._dx
        outside = (sx < 0) | (sx > self._nx)
        if np.any(outside):
            self.n_clamped += int(np.count_nonzero(outside))
            sx = np.clip(sx, 0, self._nx)
        j = np.minimum(sx.astype(np.int64), self._nx - 1)
        wx = sx - j
        st = min(max(t / self._dt, 0.0), float(self._nt))
        i = min(int(st), self._nt - 1)
        wt = st - i
        r0, r1 = self.dlog[i], self.dlog[i + 1]
        v0 = (1 - wx) * r0[j] + wx * r0[j + 1]
        if wt == 0.0:
            return v0
        v1 = (1 - wx) * r1[j] + wx * r1[j + 1]
        return (1 - wt) * v0 + wt * v1

    def __call__(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(x)
        dlog = self.log_gradient(x @ self.projection.row, t)
        if self._g_const is not None:
            return dlog[:, None] * self._g_const[None, :]
        gvec = np.einsum("nij,i->nj", self.model.diffusion(x), self.projection.row)
        return dlog[:, None] * gvec


def control_from_gamma(sol: KbeSolution, model: SdeModel, p: Projection) -> ControlField:
    return ControlField(sol, model, p)


def asymptotic_control(model: SdeModel, p: Projection, k: float, t_end: float):
    """Local near-terminal control using the state's own coefficients."""
    row = p.row

    def control(x, t):
        x = np.atleast_2d(x)
        B = model.diffusion(x)
        gvec = np.einsum("nij,i->nj", B, row)
        s2 = np.sum(gvec * gvec, axis=1)
        y = x @ row
        pa = model.drift(x) @ row
        dlog = (k - y) / (s2 * (t_end - t)) - pa / s2
        return dlog[:, None] * gvec

    return control


def default_grid(model_name: str, k: float, t_end: float, dx: Optional[float] = None,
                 dt: Optional[float] = None, x_min: Optional[float] = None) -> Grid1D:
    base = _GRID_DEFAULTS.get(model_name, dict(dx=0.005, dt_ratio=0.5, x_min=k - 6.0))
    dx = base["dx"] if dx is None else dx
    dt = base["dt_ratio"] * dx if dt is None else dt
    x_min = base["x_min"] if x_min is None else x_min
    if x_min >= k:
        x_min = k - 6.0
    return Grid1D.aligned(x_min, k, dx, dt, t_end)


def default_patch(model_name: str, k: float, grid: Grid1D) -> tuple[float, float]:
    for (name, kk), val in PATCH_TABLE.items():
        if name == model_name and math.isclose(kk, k, abs_tol=1e-9):
            return val
    return (37 * grid.dx, 9 * grid.dt)
