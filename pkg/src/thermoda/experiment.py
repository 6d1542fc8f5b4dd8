"""
Assimilation-cycle driver, 3D-Var background-covariance estimation and
AnalysisRecord persistence.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .filters import (
    Ensemble,
    EmForecaster,
    FilterError,
    FilterConfig,
    GaussianState,
    ekf_cycle,
    ensrf_update,
    etkf_update,
    threedvar_cycle,
)
from .models import EmParams
from .nature import TruthSeries, climatology

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("cycle", "t_s", "q_truth", "q_obs", "xb1", "xb2", "xb3", "xa1", "xa2", "xa3",
                  "scaled_bg_err", "bv_growth")

DIVERGENCE_LEVEL = 10.0
DIVERGENCE_CYCLES = 50


@dataclass
class AnalysisRecords:
    """Per-cycle diagnostics, stored column-wise (one row per cycle)."""

    cycle: np.ndarray
    t_s: np.ndarray
    q_truth: np.ndarray
    q_obs: np.ndarray
    xb: np.ndarray  # (n, 3)
    xa: np.ndarray  # (n, 3)
    scaled_bg_err: np.ndarray
    bv_growth: np.ndarray  # NaN where not computed

    def __len__(self):
        return self.cycle.size

    def slice(self, start, stop=None) -> "AnalysisRecords":
        s = slice(start, stop)
        return AnalysisRecords(self.cycle[s], self.t_s[s], self.q_truth[s], self.q_obs[s],
                               self.xb[s], self.xa[s], self.scaled_bg_err[s], self.bv_growth[s])

    @property
    def window(self) -> float:
        return float(self.t_s[1] - self.t_s[0]) if len(self) > 1 else float("nan")


@dataclass
class ExperimentResult:
    records: AnalysisRecords
    scaled_bg_rmse: float
    scaled_an_rmse: float
    climatology: float
    diverged: bool = False
    message: str = ""
    increments: np.ndarray | None = None  # xb - xa over the measured cycles
    config: dict = field(default_factory=dict)


def initial_state(y0: float, params: EmParams) -> np.ndarray:
    x1 = y0 / params.q_scale
    return np.array([x1, x1, params.beta - 1.0])


def required_samples(truth_interval: float, window: float, n_cycles: int) -> int:
    return n_cycles * window_stride(truth_interval, window) + 1


def window_stride(truth_interval: float, window: float) -> int:
    ratio = window / truth_interval
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ValueError(f"window {window} s is not a multiple of the {truth_interval} s sampling")
    return stride


def run_experiment(truth: TruthSeries, observations, cfg: FilterConfig, params: EmParams,
                   n_spinup: int = 500, n_measure: int = 2500, seed: int = 0, B=None,
                   clim: float | None = None, keep_increments: bool = False, model=None,
                   x0=None) -> ExperimentResult:
    """Cycle a filter through the observation series.

    Cycle ``k`` (1-based) forecasts from the previous analysis over one window
    to truth sample ``k * stride`` and assimilates the observation there.
    The scaled background RMSE uses ``q_truth - H xb`` over the measurement
    cycles only, divided by the climatology of the whole truth series.
    A run is declared diverged (and stopped) when the scaled background
    error exceeds 10 for 50 consecutive cycles or the state becomes
    non-finite.  ``model`` (anything with ``forecast`` and ``tangent``) and
    ``x0`` replace the EM forecaster and the default first guess, e.g. for
    linear test systems.
    """
    y_all = np.asarray(observations, dtype=float)
    stride = window_stride(truth.interval, cfg.window)
    n_cycles = n_spinup + n_measure
    need = n_cycles * stride + 1
    if len(truth) < need or y_all.size < need:
        raise ValueError(f"need at least {need} samples ({need * truth.interval:.0f} s) for "
                         f"{n_cycles} cycles of {cfg.window:g} s; got {min(len(truth), y_all.size)}")
    clim = climatology(truth) if clim is None else clim
    H = cfg.H(params)
    model = EmForecaster(params, cfg.window) if model is None else model
    rng_add = seeding.stream(seed, seeding.ADDITIVE_INFLATION)
    rng_init = seeding.stream(seed, seeding.ENSEMBLE_INIT)
    kind = cfg.filter_kind

    x0 = initial_state(y_all[0], params) if x0 is None else np.asarray(x0, dtype=float)
    dim = x0.size
    if kind == "threedvar":
        if B is None:
            raise ValueError("3D-Var needs a background covariance B")
        B = np.asarray(B, dtype=float)
        xa = x0
    elif kind == "ekf":
        gs = GaussianState(x0, np.eye(dim))
    else:
        ens = Ensemble(x0 + rng_init.standard_normal((cfg.ensemble_size, dim)))

    xb_rec = np.full((n_cycles, dim), np.nan)
    xa_rec = np.full((n_cycles, dim), np.nan)
    qt = np.full(n_cycles, np.nan)
    qo = np.full(n_cycles, np.nan)
    diverged, message, run_bad = False, "", 0
    done = 0
    for k in range(1, n_cycles + 1):
        idx = k * stride
        y = y_all[idx]
        try:
            if kind == "threedvar":
                xb, xa = threedvar_cycle(xa, y, B, cfg, model, H)
            elif kind == "ekf":
                bg, gs = ekf_cycle(gs, y, cfg, model, H, rng_add)
                xb, xa = bg.mean, gs.mean
            else:
                bg = Ensemble(model.forecast(ens.members))
                xb = bg.mean
                update = ensrf_update if kind == "ensrf" else etkf_update
                ens = update(bg, y, cfg, H, rng_add)
                xa = ens.mean
        except (FilterError, np.linalg.LinAlgError) as err:
            diverged, message = True, f"cycle {k}: {err}"
            break
        xb_rec[k - 1], xa_rec[k - 1] = xb, xa
        qt[k - 1], qo[k - 1] = truth.q[idx], y
        done = k
        err = (truth.q[idx] - (H @ xb)[0]) / clim
        if not (np.all(np.isfinite(xa)) and np.isfinite(err)):
            diverged, message = True, f"non-finite state at cycle {k}"
            break
        run_bad = run_bad + 1 if abs(err) > DIVERGENCE_LEVEL else 0
        if run_bad >= DIVERGENCE_CYCLES:
            diverged, message = True, f"scaled error above {DIVERGENCE_LEVEL} for {DIVERGENCE_CYCLES} cycles at cycle {k}"
            break

    n = done
    cycles = np.arange(1, n + 1)
    scaled = (qt[:n] - xb_rec[:n] @ H[0]) / clim
    records = AnalysisRecords(cycles, truth.times[cycles * stride], qt[:n], qo[:n], xb_rec[:n],
                              xa_rec[:n], scaled, np.full(n, np.nan))
    if diverged:
        log.warning("%s diverged: %s", kind, message)
        rmse = an_rmse = float("nan")
        incr = None
    else:
        meas = slice(n_spinup, n)
        rmse = float(np.sqrt(np.mean(scaled[meas] ** 2)))
        an = (qt[meas] - xa_rec[meas] @ H[0]) / clim
        an_rmse = float(np.sqrt(np.mean(an ** 2)))
        incr = (xb_rec[meas] - xa_rec[meas]) if keep_increments else None
    return ExperimentResult(records, rmse, an_rmse, clim, diverged, message, incr,
                            {"filter_kind": kind, "window": cfg.window, "delta": cfg.delta, "mu": cfg.mu,
                             "n_spinup": n_spinup, "n_measure": n_measure, "seed": seed})


@dataclass
class BEstimate:
    B: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # scaled background RMSE per iteration


def threedvar_estimate_B(truth: TruthSeries, observations, cfg: FilterConfig, params: EmParams,
                         B0, max_iter: int = 20, tol: float = 1e-2, n_spinup: int = 500,
                         n_measure: int = 2500, seed: int = 0, **run_kw) -> BEstimate:
    """Iterate ``B <- <(xb - xa)(xb - xa)^T>`` over full 3D-Var runs.

    Increments from the first ``n_spinup`` cycles are discarded.  Stops when
    the relative Frobenius change drops below ``tol``.  Without convergence
    the evaluated iterate with the lowest background RMSE is returned
    (``converged=False``): ``B = 0`` is always a fixed point of the map, and
    with noise-free observations the iterates shrink towards it.
    """
    B = np.asarray(B0, dtype=float)
    hist, tried = [], []

    def best(it):
        if not tried:
            return BEstimate(B, it, False, hist)
        return BEstimate(tried[int(np.argmin(hist))], it, False, hist)

    for it in range(1, max_iter + 1):
        res = run_experiment(truth, observations, cfg, params, n_spinup, n_measure, seed, B=B,
                             keep_increments=True, **run_kw)
        if res.diverged:
            log.warning("3D-Var diverged during B estimation (iteration %d)", it)
            return best(it)
        hist.append(res.scaled_bg_rmse)
        tried.append(B)
        d = res.increments
        B_new = d.T @ d / d.shape[0]
        change = np.linalg.norm(B_new - B) / max(np.linalg.norm(B), 1e-300)
        log.info("3D-Var B iteration %d: change %.3g, scaled bg rmse %.4f", it, change, res.scaled_bg_rmse)
        collapsed = not np.linalg.norm(B_new) > 0
        B = B_new
        if change < tol and not collapsed:
            return BEstimate(B, it, True, hist)
    return best(max_iter)


def threedvar_B_ladder(truth, observations, windows, params: EmParams, B0, obs_var: float | None = None,
                       **kwargs) -> dict:
    """Estimate B for increasing windows, each bootstrapped from the previous one."""
    out = {}
    B = np.asarray(B0, dtype=float)
    extra = {} if obs_var is None else {"obs_var": obs_var}
    for w in sorted(windows):
        est = threedvar_estimate_B(truth, observations, FilterConfig(window=w, filter_kind="threedvar", **extra),
                                   params, B, **kwargs)
        out[w] = est
        B = est.B
    return out


# ---------------------------------------------------------------------------
# persistence


def write_records_csv(rec: AnalysisRecords, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for i in range(len(rec)):
            w.writerow([int(rec.cycle[i]), repr(float(rec.t_s[i])), repr(float(rec.q_truth[i])),
                        repr(float(rec.q_obs[i])), *(repr(float(v)) for v in rec.xb[i]),
                        *(repr(float(v)) for v in rec.xa[i]), repr(float(rec.scaled_bg_err[i])),
                        "" if np.isnan(rec.bv_growth[i]) else repr(float(rec.bv_growth[i]))])
    return path


def read_records_csv(path) -> AnalysisRecords:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no records")
    col = lambda k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows])
    return AnalysisRecords(
        col("cycle").astype(int), col("t_s"), col("q_truth"), col("q_obs"),
        np.column_stack([col("xb1"), col("xb2"), col("xb3")]),
        np.column_stack([col("xa1"), col("xa2"), col("xa3")]),
        col("scaled_bg_err"), col("bv_growth"))


def climatological_B(params: EmParams, duration_s: float = 2.0e6, report_interval: float = 10.0) -> np.ndarray:
    """Sample covariance of the EM state along a long free run.

    Used as the starting background covariance for the 3D-Var iteration:
    its leading direction spans the attractor, which a diagonal start
    does not.
    """
    from .nature import em_truth

    _, states = em_truth(params, duration_s, report_interval)
    return np.cov(states.T)
