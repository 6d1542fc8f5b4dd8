"""
Reduced models of the thermosyphon loop.

The Ehrhard-Muller (EM) system is the forecast model used by every filter;
the Lorenz-63 system is kept for perfect-model checks.  States and time are
dimensionless; ``EmParams.t_scale`` and ``EmParams.q_scale`` convert to
seconds and kg/s at the observation boundary.

The hot paths (ensemble forecasts, tangent-linear propagation) are compiled
with numba; the plain-numpy functions (``em_rhs``, ``em_jacobian``) share
the same kernels so there is a single definition of the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numba
import numpy as np

#: model time step in dimensionless units (6.316 s under the default t_scale)
MODEL_DT = 0.01


@dataclass(frozen=True)
class EmParams:
    """Parameters of the EM model plus its dimensional scales."""

    alpha: float = 7.99
    beta: float = 27.3
    k_coeff: float = 0.148
    t_scale: float = 631.6  # s per dimensionless time unit
    q_scale: float = 0.0136  # kg/s per unit x1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.t_scale > 0 or not self.q_scale > 0:
            raise ValueError("t_scale and q_scale must be positive")
        if self.k_coeff < 0:
            raise ValueError(f"k_coeff must be non-negative, got {self.k_coeff}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.k_coeff])

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def obs_operator(self) -> np.ndarray:
        """Row vector H mapping an EM state to mass flow rate (kg/s)."""
        return np.array([[self.q_scale, 0.0, 0.0]])

    def seconds_to_model_time(self, seconds: float) -> float:
        return seconds / self.t_scale


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    b: float = 8.0 / 3.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.b > 0):
            raise ValueError("sigma and b must be positive")


# ---------------------------------------------------------------------------
# heat-transfer variation h(x)


@numba.njit(cache=True)
def _h_scalar(x):
    if x < 1.0:
        return x * x * (44.0 / 9.0 - 55.0 / 9.0 * x + 20.0 / 9.0 * x * x)
    return x ** (1.0 / 3.0)


@numba.njit(cache=True)
def _dh_scalar(x):
    if x < 1.0:
        return x * (88.0 / 9.0 - 165.0 / 9.0 * x + 80.0 / 9.0 * x * x)
    return (1.0 / 3.0) * x ** (-2.0 / 3.0)


def h_transfer(x):
    """Velocity dependence of the wall heat-transfer coefficient.

    A quartic fitting polynomial below ``x = 1`` joined C1-smoothly to
    ``x**(1/3)``.  Accepts scalars or arrays; ``x`` must be non-negative
    (callers pass ``|x1|``).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("h_transfer is defined for non-negative arguments only")
    poly = x * x * (44.0 / 9.0 - 55.0 / 9.0 * x + 20.0 / 9.0 * x * x)
    out = np.where(x < 1.0, poly, np.cbrt(x))
    return float(out) if out.ndim == 0 else out


def h_transfer_derivative(x):
    x = np.asarray(x, dtype=float)
    safe = np.where(x < 1.0, 1.0, x)
    out = np.where(
        x < 1.0,
        x * (88.0 / 9.0 - 165.0 / 9.0 * x + 80.0 / 9.0 * x * x),
        (1.0 / 3.0) * safe ** (-2.0 / 3.0),
    )
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _em_rhs(x, p, out):
    alpha, beta, k = p[0], p[1], p[2]
    x1, x2, x3 = x[0], x[1], x[2]
    damp = 1.0 + k * _h_scalar(abs(x1))
    out[0] = alpha * (x2 - x1)
    out[1] = beta * x1 - x2 * damp - x1 * x3
    out[2] = x1 * x2 - x3 * damp


@numba.njit(cache=True)
def _em_jac(x, p, J):
    alpha, beta, k = p[0], p[1], p[2]
    x1, x2, x3 = x[0], x[1], x[2]
    ax = abs(x1)
    damp = 1.0 + k * _h_scalar(ax)
    # d/dx1 of k*h(|x1|); zero at x1 = 0 since h'(0) = 0
    if x1 > 0.0:
        ddamp = k * _dh_scalar(ax)
    elif x1 < 0.0:
        ddamp = -k * _dh_scalar(ax)
    else:
        ddamp = 0.0
    J[0, 0] = -alpha
    J[0, 1] = alpha
    J[0, 2] = 0.0
    J[1, 0] = beta - x3 - x2 * ddamp
    J[1, 1] = -damp
    J[1, 2] = -x1
    J[2, 0] = x2 - x3 * ddamp
    J[2, 1] = x1
    J[2, 2] = -damp


@numba.njit(cache=True)
def _em_rk4_inplace(x, p, dt, nsteps, k1, k2, k3, k4, tmp):
    n = x.shape[0]
    for _ in range(nsteps):
        _em_rhs(x, p, k1)
        for i in range(n):
            tmp[i] = x[i] + 0.5 * dt * k1[i]
        _em_rhs(tmp, p, k2)
        for i in range(n):
            tmp[i] = x[i] + 0.5 * dt * k2[i]
        _em_rhs(tmp, p, k3)
        for i in range(n):
            tmp[i] = x[i] + dt * k3[i]
        _em_rhs(tmp, p, k4)
        for i in range(n):
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@numba.njit(cache=True)
def _em_forecast_batch(X, p, dt, nsteps):
    out = X.copy()
    k1 = np.empty(3)
    k2 = np.empty(3)
    k3 = np.empty(3)
    k4 = np.empty(3)
    tmp = np.empty(3)
    for m in range(out.shape[0]):
        _em_rk4_inplace(out[m], p, dt, nsteps, k1, k2, k3, k4, tmp)
    return out


@numba.njit(cache=True)
def _em_trajectory(x0, p, dt, nsteps):
    traj = np.empty((nsteps + 1, 3))
    traj[0] = x0
    x = x0.copy()
    k1 = np.empty(3)
    k2 = np.empty(3)
    k3 = np.empty(3)
    k4 = np.empty(3)
    tmp = np.empty(3)
    for s in range(nsteps):
        _em_rk4_inplace(x, p, dt, 1, k1, k2, k3, k4, tmp)
        traj[s + 1] = x
    return traj


@numba.njit(cache=True)
def _em_tangent_rhs(x, L, p, J, dx, dL):
    _em_rhs(x, p, dx)
    _em_jac(x, p, J)
    for i in range(3):
        for j in range(L.shape[1]):
            acc = 0.0
            for k in range(3):
                acc += J[i, k] * L[k, j]
            dL[i, j] = acc


@numba.njit(cache=True)
def _em_tangent_forecast(x0, L0, p, dt, nsteps):
    """RK4 on the augmented system (x, L) with dL/dt = J(x) L."""
    x = x0.copy()
    L = L0.copy()
    m = L.shape[1]
    J = np.empty((3, 3))
    kx = np.empty((4, 3))
    kL = np.empty((4, 3, m))
    xt = np.empty(3)
    Lt = np.empty((3, m))
    for _ in range(nsteps):
        _em_tangent_rhs(x, L, p, J, kx[0], kL[0])
        xt[:] = x + 0.5 * dt * kx[0]
        Lt[:, :] = L + 0.5 * dt * kL[0]
        _em_tangent_rhs(xt, Lt, p, J, kx[1], kL[1])
        xt[:] = x + 0.5 * dt * kx[1]
        Lt[:, :] = L + 0.5 * dt * kL[1]
        _em_tangent_rhs(xt, Lt, p, J, kx[2], kL[2])
        xt[:] = x + dt * kx[2]
        Lt[:, :] = L + dt * kL[2]
        _em_tangent_rhs(xt, Lt, p, J, kx[3], kL[3])
        x += dt / 6.0 * (kx[0] + 2.0 * kx[1] + 2.0 * kx[2] + kx[3])
        L += dt / 6.0 * (kL[0] + 2.0 * kL[1] + 2.0 * kL[2] + kL[3])
    return x, L


# ---------------------------------------------------------------------------
# public functions


def em_rhs(s, p: EmParams) -> np.ndarray:
    """Time derivative of the EM state (per dimensionless time unit)."""
    x = np.ascontiguousarray(s, dtype=float)
    out = np.empty(3)
    _em_rhs(x, p.as_array(), out)
    return out


def em_jacobian(s, p: EmParams) -> np.ndarray:
    """Analytic 3x3 Jacobian of :func:`em_rhs`."""
    x = np.ascontiguousarray(s, dtype=float)
    J = np.empty((3, 3))
    _em_jac(x, p.as_array(), J)
    return J


def lorenz_rhs(s, p: LorenzParams) -> np.ndarray:
    x, y, z = s
    return np.array([p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.b * z])


def rk4_step(rhs, s, dt: float):
    """One classical fourth-order Runge-Kutta step of ``ds/dt = rhs(s)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = rhs(s)
    k2 = rhs(s + 0.5 * dt * k1)
    k3 = rhs(s + 0.5 * dt * k2)
    k4 = rhs(s + dt * k3)
    return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs, s, dt: float, nsteps: int):
    """Apply :func:`rk4_step` ``nsteps`` times."""
    for _ in range(nsteps):
        s = rk4_step(rhs, s, dt)
    return s


def em_forecast(states, p: EmParams, dt: float = MODEL_DT, nsteps: int = 1) -> np.ndarray:
    """Advance one state (3,) or a batch of states (P, 3) by ``nsteps`` RK4 steps."""
    X = np.asarray(states, dtype=float)
    batch = np.ascontiguousarray(np.atleast_2d(X))
    out = _em_forecast_batch(batch, p.as_array(), float(dt), int(nsteps))
    return out[0] if X.ndim == 1 else out


def em_trajectory(s0, p: EmParams, dt: float = MODEL_DT, nsteps: int = 1) -> np.ndarray:
    """States at every step, shape (nsteps + 1, 3), starting with ``s0``."""
    return _em_trajectory(np.ascontiguousarray(s0, dtype=float), p.as_array(), float(dt), int(nsteps))


def em_tangent_forecast(s0, L0, p: EmParams, dt: float = MODEL_DT, nsteps: int = 1):
    """Advance a state and a set of tangent vectors (columns of ``L0``) together."""
    x0 = np.ascontiguousarray(s0, dtype=float)
    L = np.ascontiguousarray(L0, dtype=float)
    return _em_tangent_forecast(x0, L, p.as_array(), float(dt), int(nsteps))


def to_observation(s, p: EmParams):
    """Mass flow rate (kg/s) seen by the observation operator: ``q_scale * x1``."""
    s = np.asarray(s, dtype=float)
    return p.q_scale * s[..., 0]


def window_steps(window_s: float, p: EmParams, max_dt: float = MODEL_DT) -> tuple[int, float]:
    """Map an assimilation window in seconds to (step count, dimensionless step).

    The step count is the nearest integer to ``window / (max_dt * t_scale)``
    (at least one); the step is then shrunk or stretched so the steps cover
    the window exactly.
    """
    span = window_s / p.t_scale
    n = max(1, int(round(span / max_dt)))
    return n, span / n


def convecting_fixed_points(p: EmParams) -> np.ndarray:
    """The two convecting equilibria of the EM model (rows), for beta > 1.

    With K > 0 the equilibrium speed solves ``x**2 = beta - damp(x)`` with
    ``damp = 1 + K h(x)``; found by bisection on x in (0, sqrt(beta)).
    """
    if p.beta <= 1:
        raise ValueError("convecting equilibria need beta > 1")

    def g(x):
        d = 1.0 + p.k_coeff * h_transfer(x)
        return x * x / d - (p.beta - d)

    lo, hi = 0.0, np.sqrt(p.beta) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
    x = 0.5 * (lo + hi)
    d = 1.0 + p.k_coeff * h_transfer(x)
    x3 = p.beta - d
    return np.array([[x, x, x3], [-x, -x, x3]])
