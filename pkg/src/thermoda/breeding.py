"""
Bred vectors: finite-amplitude perturbations carried along a trajectory by
the nonlinear model and rescaled after every assimilation window.  Their
growth rate measures local instability and feeds the BV reversal test.

Units
-----
Growth is in natural log per dimensionless model time, with the window
converted through ``t_scale``.  The norm is Euclidean in (x1, x2, x3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import EmForecaster
from .models import EmParams, MODEL_DT, em_tangent_forecast

DEFAULT_AMPLITUDE = 1e-3


class BreedingError(ArithmeticError):
    pass


@dataclass
class BredVector:
    delta: np.ndarray
    growth: float = float("nan")

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)


def initial_bred_vector(rescale_amplitude: float = DEFAULT_AMPLITUDE, dim: int = 3) -> BredVector:
    """Deterministic start: the unit diagonal direction scaled to the amplitude."""
    return BredVector(np.full(dim, rescale_amplitude / np.sqrt(dim)))


def _model(window, params, model):
    if model is not None:
        return model
    if params is None or window is None:
        raise ValueError("give either a model or both window and params")
    return EmForecaster(params, window)


def breed_step(base, bv: BredVector, window: float | None = None, params: EmParams | None = None,
               rescale_amplitude: float = DEFAULT_AMPLITUDE, model=None) -> BredVector:
    """Advance one bred vector over one window.

    Parameters
    ----------
    base : array_like
        Unperturbed state at the start of the window.
    bv : BredVector
        Current perturbation; it is applied with norm ``rescale_amplitude``.
    window : float
        Window in seconds (used with ``params`` to build an EM forecaster).
    params : EmParams
    rescale_amplitude : float
    model : object, optional
        Anything with ``forecast(X)`` and a dimensionless ``span``; overrides
        ``window``/``params``.

    Returns
    -------
    BredVector
        The rescaled final difference and its growth
        ``ln(||x_pert - x_base|| / amplitude) / span``.
    """
    norm0 = float(np.linalg.norm(bv.delta))
    if not norm0 > 0:
        raise BreedingError("bred vector has zero norm")
    m = _model(window, params, model)
    base = np.asarray(base, dtype=float)
    delta0 = bv.delta * (rescale_amplitude / norm0)
    ends = m.forecast(np.vstack([base, base + delta0]))
    diff = ends[1] - ends[0]
    norm1 = float(np.linalg.norm(diff))
    if not norm1 > 0 or not np.isfinite(norm1):
        raise BreedingError("perturbed and unperturbed runs coincide (or blew up)")
    growth = np.log(norm1 / rescale_amplitude) / m.span
    return BredVector(diff * (rescale_amplitude / norm1), float(growth))


def growth_series(xa, params: EmParams | None = None, window: float | None = None,
                  rescale_amplitude: float = DEFAULT_AMPLITUDE, model=None,
                  bv: BredVector | None = None) -> np.ndarray:
    """Bred-vector growth over the window that ends at each analysis.

    ``xa`` is the (n, 3) analysis trajectory (or an ``AnalysisRecords``,
    whose ``xa`` and window are used).  Entry ``k`` is the growth of the
    bred vector integrated from analysis ``k-1``; entry 0 has no previous
    analysis and is NaN.
    """
    if hasattr(xa, "xa"):
        if window is None:
            window = xa.window
        xa = xa.xa
    xa = np.asarray(xa, dtype=float)
    m = _model(window, params, model)
    out = np.full(xa.shape[0], np.nan)
    bv = bv or initial_bred_vector(rescale_amplitude, xa.shape[1])
    for k in range(1, xa.shape[0]):
        bv = breed_step(xa[k - 1], bv, rescale_amplitude=rescale_amplitude, model=m)
        out[k] = bv.growth
    return out


def free_run_growth(x0, params: EmParams, window: float, n_windows: int,
                    rescale_amplitude: float = DEFAULT_AMPLITUDE) -> np.ndarray:
    """Growth series along a free model trajectory (base advanced by the model itself)."""
    m = EmForecaster(params, window)
    x = np.asarray(x0, dtype=float)
    bv = initial_bred_vector(rescale_amplitude)
    out = np.empty(n_windows)
    for k in range(n_windows):
        bv = breed_step(x, bv, rescale_amplitude=rescale_amplitude, model=m)
        out[k] = bv.growth
        x = m.forecast(x)
    return out


def leading_lyapunov(x0, params: EmParams, t_total: float = 2000.0, renorm: float = 0.1,
                     dt: float = MODEL_DT, spinup: float = 50.0) -> float:
    """Leading Lyapunov exponent by tangent-linear propagation with periodic renormalization.

    Times are dimensionless.  Uses the EM tangent-linear model, so it is an
    estimate independent of the finite-difference breeding above.
    """
    x = np.asarray(x0, dtype=float)
    v = np.ones((3, 1)) / np.sqrt(3.0)
    k = max(1, int(round(renorm / dt)))
    for _ in range(int(round(spinup / renorm))):
        x, v = em_tangent_forecast(x, v, params, dt, k)
        v /= np.linalg.norm(v)
    total = 0.0
    n = int(round(t_total / renorm))
    for _ in range(n):
        x, v = em_tangent_forecast(x, v, params, dt, k)
        nv = np.linalg.norm(v)
        total += np.log(nv)
        v /= nv
    return total / (n * k * dt)


def amplitude_growth_correlation(x1, growth) -> float:
    """Spearman rank correlation between oscillation amplitude and mean BV growth.

    The series is split at the local minima of ``|x1|``; each oscillation
    contributes its ``max |x1|`` and the mean of the finite growth values
    inside it.  Oscillations without a finite growth value are skipped.
    """
    from scipy.stats import spearmanr

    from .reversal import segment_oscillations

    g = np.asarray(growth, dtype=float)
    amp, mean_g = [], []
    for seg in segment_oscillations(x1):
        vals = g[seg.start:seg.end]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            amp.append(seg.x1_max)
            mean_g.append(vals.mean())
    if len(amp) < 3:
        raise ValueError("need at least three oscillations with growth values")
    return float(spearmanr(amp, mean_g).statistic)
