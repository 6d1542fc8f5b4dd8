"""
Multiple-shooting estimation of the EM parameters from a mass-flow-rate
series.

The series is cut into windows.  Each window gets its own initial state,
all windows share (alpha, beta, K, t_scale, q_scale), and the mismatch
between the end of one window and the start of the next is penalized
softly instead of being enforced.  Short windows keep the chaotic
sensitivity of a single long trajectory out of the fit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks, savgol_filter

from .models import EmParams, MODEL_DT, em_trajectory, h_transfer

log = logging.getLogger(__name__)

PARAM_NAMES = ("alpha", "beta", "k_coeff", "t_scale", "q_scale")
PENALTY = 1e3  # residual entry used when an integration blows up
MAX_STEPS_PER_SAMPLE = 1000  # candidates needing more model steps per sample are penalized


@dataclass
class ShootingProblem:
    """Training data cut into windows.

    Parameters
    ----------
    times, q : array_like
        Evenly sampled series (s, kg/s).
    window_samples : int
        Samples per window; consecutive windows share their boundary sample.
    lambda_cont : float
        Weight of the continuity gaps.
    """

    times: np.ndarray
    q: np.ndarray
    window_samples: int
    lambda_cont: float = 10.0
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.window_samples < 4:
            raise ValueError("each window needs at least 4 samples")
        if self.times.size != self.q.size:
            raise ValueError("times and q differ in length")
        step = self.window_samples - 1
        self.starts = np.arange(0, self.q.size - step, step)
        if self.starts.size == 0:
            raise ValueError("series shorter than one window")
        self.q_norm = float(np.sqrt(np.mean(self.q ** 2))) or 1.0

    @property
    def interval(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_windows(self) -> int:
        return int(self.starts.size)

    @property
    def n_unknowns(self) -> int:
        return 3 * self.n_windows + 5

    @classmethod
    def from_series(cls, times, q, n_periods: float = 2.0, n_windows: int | None = None,
                    lambda_cont: float = 10.0) -> "ShootingProblem":
        """Windows of ``n_periods`` oscillation periods (estimated from the data)."""
        times = np.asarray(times, dtype=float)
        q = np.asarray(q, dtype=float)
        dt = float(times[1] - times[0])
        w = max(4, int(round(n_periods * estimate_period(q, dt) / dt)) + 1)
        if n_windows is not None:
            n = min(q.size, n_windows * (w - 1) + 1)
            times, q = times[:n], q[:n]
        return cls(times, q, w, lambda_cont)


@dataclass
class CalibrationResult:
    params: EmParams
    residual_norm: float
    initial_states: np.ndarray  # (n_windows, 3)
    converged: bool
    iterations: int
    message: str = ""
    blew_up: bool = False

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "residual_norm": self.residual_norm,
                "initial_states": self.initial_states.tolist(), "converged": self.converged,
                "iterations": self.iterations, "message": self.message, "blew_up": self.blew_up}


def estimate_period(q, interval: float, prominence: float = 0.1) -> float:
    """Mean spacing of the minima of ``|q|`` (seconds).

    Only minima with a prominence of at least ``prominence * max|q|`` count,
    so observation noise does not split oscillations.
    """
    a = np.abs(np.asarray(q, dtype=float))
    mins, _ = find_peaks(-a, prominence=prominence * a.max())
    if mins.size < 2:
        raise ValueError("series too short to estimate an oscillation period")
    return float(np.mean(np.diff(mins)) * interval)


def pack(params: EmParams, ics) -> np.ndarray:
    logs = np.log([getattr(params, n) for n in PARAM_NAMES])
    return np.concatenate([np.asarray(ics, dtype=float).ravel(), logs])


def unpack(problem: ShootingProblem, z):
    z = np.asarray(z, dtype=float)
    if z.size != problem.n_unknowns:
        raise ValueError(f"expected {problem.n_unknowns} unknowns, got {z.size}")
    ics = z[:-5].reshape(problem.n_windows, 3)
    vals = np.exp(z[-5:])
    return EmParams(*vals), ics


def _sample_step(params: EmParams, interval: float):
    span = interval / params.t_scale
    k = max(1, int(math.ceil(span / MODEL_DT - 1e-12)))
    return k, span / k


def shooting_residual(problem: ShootingProblem, z, return_flag: bool = False):
    """Data misfit per sample plus weighted continuity gaps.

    The q misfits are divided by the RMS of the data so that both blocks
    are of order one; continuity gaps are in dimensionless model units and
    multiplied by ``lambda_cont``.
    """
    z = np.asarray(z, dtype=float)
    if z.size != problem.n_unknowns:
        raise ValueError(f"expected {problem.n_unknowns} unknowns, got {z.size}")
    w = problem.window_samples
    n_res = problem.n_windows * w + 3 * (problem.n_windows - 1)
    with np.errstate(over="ignore"):
        vals = np.exp(z[-len(PARAM_NAMES):])
    valid = np.all(np.isfinite(z)) and np.all(np.isfinite(vals)) and np.all(vals > 0)
    span = problem.interval / vals[3] if valid else np.inf
    if not (valid and span / MODEL_DT <= MAX_STEPS_PER_SAMPLE):
        bad_r = np.full(n_res, PENALTY)
        return (bad_r, True) if return_flag else bad_r
    params, ics = unpack(problem, z)
    k, dt = _sample_step(params, problem.interval)
    misfit = np.empty(problem.n_windows * w)
    gaps = np.empty(3 * (problem.n_windows - 1))
    bad = False
    for j, s in enumerate(problem.starts):
        traj = em_trajectory(ics[j], params, dt, k * (w - 1))
        samples = traj[::k]
        if not np.all(np.isfinite(samples)) or np.abs(samples).max() > 1e6:
            bad = True
            misfit[j * w:(j + 1) * w] = PENALTY
            if j < problem.n_windows - 1:
                gaps[3 * j:3 * j + 3] = PENALTY
            continue
        misfit[j * w:(j + 1) * w] = (params.q_scale * samples[:, 0] - problem.q[s:s + w]) / problem.q_norm
        if j < problem.n_windows - 1:
            gaps[3 * j:3 * j + 3] = problem.lambda_cont * (samples[-1] - ics[j + 1])
    r = np.concatenate([misfit, gaps])
    return (r, bad) if return_flag else r


def continuity_gaps(problem: ShootingProblem, z) -> np.ndarray:
    """Unweighted end-of-window minus next-window-start differences, shape (n_windows-1, 3)."""
    r = shooting_residual(problem, z)
    g = r[problem.n_windows * problem.window_samples:]
    return g.reshape(-1, 3) / problem.lambda_cont


def derivative_states(q, interval: float, guess: EmParams, smooth_samples: int = 7) -> np.ndarray:
    """State estimates at every sample from finite differences of the data.

    ``x1 = q / q_scale``; ``x2`` and ``x3`` are solved from the first two EM
    equations using Savitzky-Golay derivatives in guessed model time (the
    smoothing keeps observation noise out of the second derivative).
    Where ``|x1|`` is small, ``x3`` falls back to ``beta - 1``.
    """
    x1 = np.asarray(q, dtype=float) / guess.q_scale
    tau = interval / guess.t_scale
    win = min(smooth_samples | 1, x1.size - (1 - x1.size % 2))
    sg = lambda v, d: savgol_filter(v, win, 3, deriv=d, delta=tau, mode="interp")
    x1s = sg(x1, 0)
    d1 = sg(x1, 1)
    d2 = sg(x1, 2)
    x2 = x1s + d1 / guess.alpha
    dx2 = d1 + d2 / guess.alpha
    damp = 1.0 + guess.k_coeff * h_transfer(np.abs(x1s))
    with np.errstate(divide="ignore", invalid="ignore"):
        x3 = (guess.beta * x1s - x2 * damp - dx2) / x1s
    x3 = np.where(np.abs(x1s) > 0.5, x3, guess.beta - 1.0)
    x3 = np.clip(np.nan_to_num(x3, nan=guess.beta - 1.0), 0.0, 3.0 * guess.beta)
    return np.column_stack([x1s, x2, x3])


def initial_guess_states(problem: ShootingProblem, guess: EmParams) -> np.ndarray:
    """Window initial states from :func:`derivative_states` at the window starts."""
    return derivative_states(problem.q, problem.interval, guess)[problem.starts]


def _lm(fun, z0, ftol, max_iter):
    n = z0.size
    return least_squares(fun, z0, method="lm", ftol=ftol, xtol=1e-12, gtol=1e-15,
                         max_nfev=max_iter * (n + 1), x_scale="jac")


def calibrate(problem: ShootingProblem, guess: EmParams, ics=None, ftol: float = 1e-8,
              max_iter: int = 200, states_first: bool = False, fixed=()) -> CalibrationResult:
    """Levenberg-Marquardt fit of window states and log-parameters.

    Uses MINPACK's LM (trust-region damping, forward-difference Jacobian).
    Stops when the relative reduction of the residual sum of squares falls
    below ``ftol`` or after about ``max_iter`` Jacobian evaluations.  With
    ``states_first`` the window states are fitted with the parameters held
    at the guess before everything is released.  Parameters named in
    ``fixed`` stay at the guess throughout.
    """
    if not all(np.isfinite(getattr(guess, n)) and getattr(guess, n) > 0 for n in PARAM_NAMES):
        raise ValueError("initial guess must be finite and positive")
    ics = initial_guess_states(problem, guess) if ics is None else np.asarray(ics, dtype=float)
    z0 = pack(guess, ics)
    n = z0.size
    if states_first:
        tail = z0[-5:]
        pre = _lm(lambda zi: shooting_residual(problem, np.concatenate([zi, tail])), z0[:-5], 1e-4,
                  max_iter)
        z0 = np.concatenate([pre.x, tail])
    free = np.ones(n, dtype=bool)
    for name in fixed:
        free[n - 5 + PARAM_NAMES.index(name)] = False

    def expand(zf):
        z = z0.copy()
        z[free] = zf
        return z

    sol = _lm(lambda zf: shooting_residual(problem, expand(zf)), z0[free], ftol, max_iter)
    z_hat = expand(sol.x)
    r, bad = shooting_residual(problem, z_hat, return_flag=True)
    params, ics_hat = unpack(problem, z_hat)
    iters = int(math.ceil(sol.nfev / (n + 1)))
    log.info("calibration: %s after %d function evaluations, |r| = %.3g", sol.message, sol.nfev,
             np.linalg.norm(r))
    return CalibrationResult(params, float(np.linalg.norm(r)), ics_hat, bool(sol.status > 0 and not bad),
                             iters, str(sol.message), bad)


def calibrate_staged(problem: ShootingProblem, guess: EmParams, short_fraction: float = 0.15,
                     stage1_fixed=("k_coeff",), **kwargs) -> CalibrationResult:
    """Fit short windows first, then restart on the full windows from that fit.

    Short windows (``short_fraction`` of the full window) make the first
    fit nearly convex in the parameters; their fitted states at the full
    window starts seed the second stage.  The weakly constrained transfer
    coefficient K is held at its guess in the first stage (``stage1_fixed``)
    so noisy data cannot drive it to zero before the states settle.
    """
    w_short = max(4, int(round(problem.window_samples * short_fraction)))
    n = problem.starts[-1] + problem.window_samples
    short = ShootingProblem(problem.times[:n], problem.q[:n], w_short, problem.lambda_cont)
    first = calibrate(short, guess, fixed=stage1_fixed, **kwargs)
    k, dt = _sample_step(first.params, problem.interval)
    states = np.empty((n, 3))
    for j, s in enumerate(short.starts):
        traj = em_trajectory(first.initial_states[j], first.params, dt, k * (w_short - 1))[::k]
        states[s:s + w_short] = traj
    ics = states[problem.starts]
    if not np.all(np.isfinite(ics)):
        ics = None
    return calibrate(problem, first.params, ics=ics, **kwargs)


def calibrate_multistart(problem: ShootingProblem, guesses) -> CalibrationResult:
    """Run :func:`calibrate` from each guess and keep the smallest residual."""
    best = None
    for g in guesses:
        try:
            res = calibrate(problem, g)
        except (ValueError, FloatingPointError) as err:
            log.warning("calibration from %s failed: %s", g, err)
            continue
        if best is None or res.residual_norm < best.residual_norm:
            best = res
    if best is None:
        raise RuntimeError("no calibration start succeeded")
    return best
