"""
Kalman-type analysis schemes: KF algebra, 3D-Var, EKF, EnSRF and ETKF.

All update functions work for any state dimension N; the thermosyphon
experiments use N = 3 with a single scalar observation of mass flow rate.
Ensembles are stored member-major, shape (P, N).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import EmParams, MODEL_DT, em_forecast, em_tangent_forecast, window_steps

log = logging.getLogger(__name__)

FILTER_KINDS = ("threedvar", "ekf", "ensrf", "etkf")
OBS_NOISE_STD = 6e-4  # kg/s


class FilterError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# state containers


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)


@dataclass
class Ensemble:
    members: np.ndarray  # (P, N)
    degenerate: bool = False

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members, shape (P, N)")

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def perturbations(self) -> np.ndarray:
        """Deviations from the mean as columns, shape (N, P)."""
        return (self.members - self.mean).T

    @property
    def cov(self) -> np.ndarray:
        X = self.perturbations
        return X @ X.T / (self.size - 1)


# ---------------------------------------------------------------------------
# inflation table (tuned per window; 3D-Var uses a static B instead)

_DELTA_ENKF = {390: 0.2, 420: 0.2, 450: 0.2, 480: 0.25, 510: 0.25, 540: 0.25, 570: 0.25, 600: 0.25}
_DELTA_EKF = {390: 0.2, 420: 0.2, 450: 0.2, 480: 0.2, 510: 0.2, 540: 0.25, 570: 0.25, 600: 0.25}


def default_inflation(kind: str, window_s: float) -> tuple[float, float]:
    """Multiplicative and additive inflation (delta, mu) for a window length.

    Windows between table rows take the row at or below; windows past 600 s
    take the 600 s row.
    """
    if kind == "threedvar":
        return 0.0, 0.0
    table = _DELTA_EKF if kind == "ekf" else _DELTA_ENKF
    w = int(min(max(window_s, 30.0), 600.0) // 30 * 30)
    return table.get(w, 0.15), 0.25


@dataclass
class FilterConfig:
    window: float = 30.0  # s
    filter_kind: str = "ekf"
    delta: float | None = None
    mu: float | None = None
    obs_var: float = OBS_NOISE_STD ** 2
    obs_operator: np.ndarray | None = None
    ensemble_size: int = 10
    model_q: np.ndarray | None = None  # model-error covariance added in the EKF forecast

    def __post_init__(self):
        if self.filter_kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.filter_kind!r}; expected one of {FILTER_KINDS}")
        if not self.window > 0:
            raise ValueError("window must be positive")
        d, m = default_inflation(self.filter_kind, self.window)
        if self.delta is None:
            self.delta = d
        if self.mu is None:
            self.mu = m
        if self.delta < 0 or self.mu < 0:
            raise ValueError("inflation factors must be non-negative")
        if self.obs_var <= 0:
            raise ValueError("obs_var must be positive")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")

    def H(self, params: EmParams | None = None) -> np.ndarray:
        if self.obs_operator is not None:
            return np.atleast_2d(np.asarray(self.obs_operator, dtype=float))
        return (params or EmParams()).obs_operator


# ---------------------------------------------------------------------------
# forecast models


class EmForecaster:
    """EM model advanced over one assimilation window."""

    def __init__(self, params: EmParams, window_s: float, max_dt: float = MODEL_DT):
        self.params = params
        self.n_steps, self.dt = window_steps(window_s, params, max_dt)
        mapped = self.n_steps * MODEL_DT * params.t_scale
        if abs(mapped - window_s) > 1e-6 * window_s and max_dt == MODEL_DT:
            log.debug("window %.1f s -> %d steps of %.5f (nominal %.1f s)", window_s, self.n_steps,
                      self.dt, mapped)

    @property
    def span(self) -> float:
        """Window length in dimensionless model time."""
        return self.n_steps * self.dt

    def forecast(self, X):
        return em_forecast(X, self.params, self.dt, self.n_steps)

    def tangent(self, x, L):
        return em_tangent_forecast(x, L, self.params, self.dt, self.n_steps)


class LinearForecaster:
    """``dx/dt = A x`` integrated with the same RK4 scheme; for filter checks."""

    def __init__(self, A, dt: float, n_steps: int):
        self.A = np.asarray(A, dtype=float)
        self.dt = dt
        self.n_steps = n_steps
        n = self.A.shape[0]
        hA = dt * self.A
        step = np.eye(n) + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
        self.M = np.linalg.matrix_power(step, n_steps)

    @property
    def span(self) -> float:
        return self.n_steps * self.dt

    def forecast(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.M.T

    def tangent(self, x, L):
        return self.M @ x, self.M @ L


# ---------------------------------------------------------------------------
# KF algebra


def kalman_gain(B, H, R) -> np.ndarray:
    """``K = B H^T (H B H^T + R)^-1``; shape (N, M)."""
    B = np.asarray(B, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    S = H @ B @ H.T + np.atleast_2d(R)
    if not np.all(np.isfinite(S)) or np.any(np.diag(S) <= 0) or np.linalg.cond(S) > 1e15:
        raise FilterError("innovation covariance HBH^T + R is singular")
    return np.linalg.solve(S, H @ B).T  # S symmetric, B symmetric


def kf_analysis(xb, B, y, H, R):
    """Kalman analysis: returns ``(xa, A)`` with ``A = (I - KH) B``, symmetrized."""
    xb = np.asarray(xb, dtype=float)
    B = np.asarray(B, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    K = kalman_gain(B, H, R)
    innov = np.atleast_1d(y) - H @ xb
    xa = xb + K @ innov
    A = (np.eye(B.shape[0]) - K @ H) @ B
    return xa, 0.5 * (A + A.T)


def _cholesky(A):
    if not np.all(np.isfinite(A)):
        raise FilterError("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        As = 0.5 * (A + A.T) + 1e-12 * np.eye(A.shape[0])
        try:
            return np.linalg.cholesky(As)
        except np.linalg.LinAlgError as err:
            raise FilterError("covariance is not positive definite") from err


# ---------------------------------------------------------------------------
# filters


def threedvar_cycle(xa_prev, y, B, cfg: FilterConfig, model, H):
    """Forecast the previous analysis and update it with a static ``B``."""
    xb = model.forecast(np.asarray(xa_prev, dtype=float))
    xa, _ = kf_analysis(xb, B, y, H, cfg.obs_var)
    return xb, xa


def ekf_cycle(prev: GaussianState, y, cfg: FilterConfig, model, H, rng=None):
    """One EKF forecast/analysis cycle.

    The analysis covariance is factored ``A = L L^T``; the columns of ``L``
    ride the tangent-linear model along the forecast trajectory, giving
    ``B = T T^T (+ Q)``.  Then ``B <- (1 + delta) B``, the Kalman update,
    and ``A <- A + mu diag(nu)`` with ``nu ~ U(0, 1)`` (needs ``rng``).
    """
    L = _cholesky(prev.cov)
    xb, T = model.tangent(prev.mean, L)
    B = T @ T.T
    if cfg.model_q is not None:
        B = B + np.asarray(cfg.model_q)
    B = (1.0 + cfg.delta) * B
    B = 0.5 * (B + B.T)
    xa, A = kf_analysis(xb, B, y, H, cfg.obs_var)
    if rng is not None and cfg.mu > 0:
        A = A + cfg.mu * np.diag(rng.random(A.shape[0]))
    return GaussianState(xb, B), GaussianState(xa, A)


def ensrf_gain_matrix(B, H, R) -> np.ndarray:
    """Square-root gain ``B H^T [sqrt(S)^-1]^T [sqrt(S) + sqrt(R)]^-1`` (general form)."""
    from scipy.linalg import sqrtm

    H = np.atleast_2d(H)
    Rm = np.atleast_2d(R)
    S = H @ B @ H.T + Rm
    sqS = np.real(sqrtm(S))
    sqR = np.real(sqrtm(Rm))
    return B @ H.T @ np.linalg.inv(sqS).T @ np.linalg.inv(sqS + sqR)


def _additive(members, mu, rng):
    if rng is None or mu <= 0:
        return members
    return members + mu * rng.random(members.shape)


def _check_spread(X):
    if not np.any(np.abs(X) > 0):
        log.warning("ensemble has zero spread")
        return True
    return False


def ensrf_update(ens: Ensemble, y, cfg: FilterConfig, H, rng=None) -> Ensemble:
    """Serial ensemble square-root update (Whitaker & Hamill form).

    ``y`` may hold several observations with independent errors (rows of
    ``H``, common variance ``cfg.obs_var``); they are processed one at a
    time.  Multiplicative inflation scales the perturbations by
    ``sqrt(1 + delta)`` first; additive noise ``mu * U(0, 1)`` is added to
    each member afterwards when ``rng`` is given.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    P = ens.size
    xm = ens.mean
    X = np.sqrt(1.0 + cfg.delta) * ens.perturbations
    degenerate = _check_spread(X)
    R = cfg.obs_var
    for j in range(H.shape[0]):
        h = H[j]
        hx = h @ X  # (P,)
        BHt = X @ hx / (P - 1)
        hbh = hx @ hx / (P - 1)
        K = BHt / (hbh + R)
        K_tilde = K / (1.0 + np.sqrt(R / (hbh + R)))
        xm = xm + K * (y[j] - h @ xm)
        X = X - np.outer(K_tilde, hx)
    members = _additive(xm + X.T, cfg.mu, rng)
    return Ensemble(members, degenerate)


def _sym_sqrt(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def etkf_update(ens: Ensemble, y, cfg: FilterConfig, H, rng=None) -> Ensemble:
    """Ensemble transform update with a symmetric square-root transform.

    ``A_hat = [(P-1) I + (H Xb)^T R^-1 (H Xb)]^-1``, ``Xa = Xb [(P-1) A_hat]^(1/2)``;
    the mean moves with the Kalman gain of the (inflated) ensemble covariance.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    P = ens.size
    xm = ens.mean
    X = np.sqrt(1.0 + cfg.delta) * ens.perturbations
    degenerate = _check_spread(X)
    Y = H @ X  # (M, P)
    Rinv = np.eye(H.shape[0]) / cfg.obs_var
    A_hat = np.linalg.inv((P - 1) * np.eye(P) + Y.T @ Rinv @ Y)
    T = _sym_sqrt((P - 1) * A_hat)
    B = X @ X.T / (P - 1)
    K = kalman_gain(B, H, cfg.obs_var * np.eye(H.shape[0]))
    xm = xm + K @ (y - H @ xm)
    members = _additive(xm + (X @ T).T, cfg.mu, rng)
    return Ensemble(members, degenerate)
