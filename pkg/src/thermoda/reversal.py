"""
Flow-reversal prediction.

Truth-side labeling of reversals, the three occurrence tests (lead
forecast, bred-vector growth, x1/x2 correlation slope), scoring against a
forecast horizon, warning times, and amplitude-conditioned probabilistic
forecasts of how many oscillations the next rotational state will last.

Cycle indexing
--------------
Everything here works on the analysis-cycle grid: index ``k`` refers to the
k-th analysis record.  A truth reversal "at cycle e" means the truth mass
flow rate changes sign between cycles ``e-1`` and ``e``.  A trigger at
cycle ``k`` predicts a reversal in ``(k, k + horizon]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import EmParams, em_forecast, window_steps
from .verification import ContingencyTable, N_CATEGORIES

log = logging.getLogger(__name__)

TYPICAL_MINUTES = (11.48, 23.09, 33.72, 44.38, 55.11, 66.08)
CW_TO_CCW = "CW->CCW"
CCW_TO_CW = "CCW->CW"

RHO_BV = 0.6786
RHO_CORR = 1.42
LAMBDA_CORR = 18
LAMBDA_LEAD = 7
HORIZON = 20


@dataclass(frozen=True)
class ReversalEvent:
    cycle: int
    direction: str  # positive q is taken as CW


@dataclass(frozen=True)
class OscillationSegment:
    start: int  # inclusive
    end: int  # exclusive
    x1_max: float


@dataclass
class AmplitudeResidencyTable:
    x1_max: np.ndarray
    residency_min: np.ndarray
    count: np.ndarray  # oscillation category 1..6

    def __post_init__(self):
        self.x1_max = np.asarray(self.x1_max, dtype=float)
        self.residency_min = np.asarray(self.residency_min, dtype=float)
        self.count = np.asarray(self.count, dtype=int)

    def __len__(self):
        return self.x1_max.size

    def climatology(self) -> np.ndarray:
        """Marginal distribution of the oscillation category."""
        if len(self) == 0:
            raise ValueError("empty residency table")
        return np.bincount(self.count - 1, minlength=N_CATEGORIES)[:N_CATEGORIES] / len(self)

    def to_dict(self) -> dict:
        return {"x1_max": self.x1_max.tolist(), "residency_min": self.residency_min.tolist(),
                "count": self.count.tolist()}


@dataclass
class ResidencyForecast:
    probabilities: np.ndarray
    climatological: bool = False  # True when the amplitude bin was empty

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1) or p.sum() <= 0:
            raise ValueError("residency forecast needs a non-zero probability vector in [0, 1]")
        self.probabilities = p / p.sum()


# ---------------------------------------------------------------------------
# truth labeling


def _signs(q) -> np.ndarray:
    """Signs of ``q`` with zeros taking the sign of the next non-zero sample."""
    s = np.sign(np.asarray(q, dtype=float))
    nxt = 0.0
    for i in range(s.size - 1, -1, -1):
        if s[i] == 0:
            s[i] = nxt
        else:
            nxt = s[i]
    # trailing zeros: carry the last non-zero sign forward
    last = 0.0
    for i in range(s.size):
        if s[i] == 0:
            s[i] = last
        else:
            last = s[i]
    return s


def detect_truth_reversals(q) -> list[ReversalEvent]:
    """An event at every strict sign change of ``q`` between consecutive samples."""
    s = _signs(q)
    if s.size < 2:
        raise ValueError("need at least two samples")
    idx = np.nonzero((s[1:] != s[:-1]) & (s[1:] != 0) & (s[:-1] != 0))[0] + 1
    return [ReversalEvent(int(k), CW_TO_CCW if s[k] < 0 else CCW_TO_CW) for k in idx]


def event_cycles(events) -> np.ndarray:
    return np.array([e.cycle if isinstance(e, ReversalEvent) else int(e) for e in events], dtype=int)


# ---------------------------------------------------------------------------
# occurrence tests


def first_sign_change(xa, params: EmParams, window: float, max_windows: int) -> np.ndarray:
    """Windows until the forecast from each analysis first changes the sign of x1.

    Returns, per state, the smallest integer ``j`` in ``1..max_windows`` such
    that x1 changes sign during forecast window ``j``, or ``inf`` when it
    does not within ``max_windows`` windows.  Checked at every model step.
    """
    X = np.atleast_2d(np.asarray(xa, dtype=float)).copy()
    out = np.full(X.shape[0], np.inf)
    if max_windows <= 0:
        return out
    n, dt = window_steps(window, params)
    s0 = np.sign(X[:, 0])
    for j in range(1, max_windows + 1):
        for _ in range(n):
            X = em_forecast(X, params, dt, 1)
            changed = (np.sign(X[:, 0]) != s0) & np.isinf(out)
            out[changed] = j
    return out


def lead_test(xa, params: EmParams, lambda_lead: int = LAMBDA_LEAD, window: float = 30.0) -> bool:
    """True iff the forecast from ``xa`` changes rotational state within ``lambda_lead`` windows."""
    return bool(np.isfinite(first_sign_change(xa, params, window, lambda_lead)[0]))


def bv_test(growth: float, rho_bv: float = RHO_BV) -> bool:
    if not np.isfinite(growth):
        raise ValueError("growth must be finite")
    return bool(growth > rho_bv)


def corr_slope(x1, x2):
    """Ordinary least-squares slope of x1 against x2; ``None`` if x2 has no variance."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    d2 = x2 - x2.mean()
    var = float(d2 @ d2)
    if var <= 1e-300 * max(1.0, float(np.abs(x2).max()) ** 2):
        return None
    return float(d2 @ (x1 - x1.mean()) / var)


def corr_test(xa_history, lambda_corr: int = LAMBDA_CORR, rho_corr: float = RHO_CORR):
    """Slope test on the last ``lambda_corr`` analysis points.

    Returns ``(triggered, degenerate)``; a degenerate fit never triggers.
    """
    h = np.asarray(xa_history, dtype=float)
    if h.shape[0] < lambda_corr:
        raise ValueError(f"need at least {lambda_corr} analysis points")
    h = h[-lambda_corr:]
    slope = corr_slope(h[:, 0], h[:, 1])
    if slope is None:
        return False, True
    return slope > rho_corr, False


def corr_slopes(xa, lambda_corr: int = LAMBDA_CORR) -> np.ndarray:
    """Rolling slope per cycle (NaN before ``lambda_corr`` points exist or when degenerate)."""
    xa = np.asarray(xa, dtype=float)
    out = np.full(xa.shape[0], np.nan)
    for k in range(lambda_corr - 1, xa.shape[0]):
        s = corr_slope(xa[k - lambda_corr + 1:k + 1, 0], xa[k - lambda_corr + 1:k + 1, 1])
        if s is not None:
            out[k] = s
    return out


# ---------------------------------------------------------------------------
# scoring


@dataclass
class Labeling:
    table: ContingencyTable
    hit_events: np.ndarray  # event cycles that were warned
    missed_events: np.ndarray
    first_trigger: np.ndarray  # earliest attributed trigger cycle per hit event
    false_alarm_cycles: np.ndarray  # triggers with no event ahead
    n_cycles: int
    repeat_cycles: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))  # later warnings of a hit event


def _attribution_windows(events: np.ndarray, horizon: int):
    """For each event the trigger cycles that point at it: ``[max(e - h, e_prev), e - 1]``."""
    prev = np.concatenate([[0], events[:-1]])
    return np.maximum(events - horizon, prev), events - 1


def label_outcomes(triggers, events, horizon: int = HORIZON) -> Labeling:
    """Contingency table for a per-cycle trigger series against truth reversals.

    Scoring rules
    -------------
    * Each trigger is attributed to the first event in ``(k, k + horizon]``.
      An event with at least one attributed trigger is one hit, credited to
      its earliest trigger.  Later triggers pointing at the same event are
      repeat warnings and are booked as false alarms, so every cycle is
      counted exactly once and ``a + b + c + d`` equals the cycle count.
    * A trigger with no event in ``(k, k + horizon]`` is a false alarm.
    * An event without any attributed trigger is one miss, booked at the
      non-trigger cycle ``e - 1``.
    * Every other non-trigger cycle is a correct negative.
    """
    trig = np.asarray(triggers, dtype=bool)
    n = trig.size
    ev = np.unique(event_cycles(events))
    ev = ev[(ev >= 1) & (ev < n + horizon)]
    ev_in = ev[ev <= n]  # events whose preceding cycle lies in the series
    lo, hi = _attribution_windows(ev_in, horizon)
    csum = np.concatenate([[0], np.cumsum(trig)])
    hi_c = np.minimum(hi, n - 1)
    counts = csum[hi_c + 1] - csum[lo]
    hit = counts > 0
    first = np.array([lo[i] + int(np.argmax(trig[lo[i]:hi_c[i] + 1])) for i in np.nonzero(hit)[0]],
                     dtype=int)

    # a trigger is a false alarm when no event lies in (k, k + horizon]
    k = np.nonzero(trig)[0]
    pos = np.searchsorted(ev, k, side="right")
    big = np.iinfo(np.int64).max
    nxt = np.where(pos < ev.size, ev[np.minimum(pos, ev.size - 1)], big) if ev.size else np.full(k.size, big)
    fa = k[nxt > k + horizon]
    repeats = np.setdiff1d(k[nxt <= k + horizon], first)

    a = int(hit.sum())
    b = int(fa.size + repeats.size)
    c = int((~hit).sum())
    d = int(n - trig.sum() - c)
    return Labeling(ContingencyTable(a, b, c, d), ev_in[hit], ev_in[~hit], first, fa, n, repeats)


@dataclass
class WarningTimes:
    seconds: np.ndarray
    histogram: np.ndarray  # counts for 1..horizon cycles of warning
    mean: float
    median: float

    def to_dict(self):
        return {"seconds": self.seconds.tolist(), "histogram": self.histogram.tolist(),
                "mean_s": self.mean, "median_s": self.median}


def warning_times(labeling: Labeling, window: float, horizon: int = HORIZON) -> WarningTimes:
    """Time from the first attributed trigger of each hit to its event."""
    cyc = labeling.hit_events - labeling.first_trigger
    hist = np.bincount(cyc, minlength=horizon + 1)[1:horizon + 1]
    sec = cyc * float(window)
    if sec.size:
        return WarningTimes(sec, hist, float(np.mean(sec)), float(np.median(sec)))
    return WarningTimes(sec, hist, float("nan"), float("nan"))


# ---------------------------------------------------------------------------
# oscillations and residency


def segment_oscillations(x1) -> list[OscillationSegment]:
    """Split a series at the local minima of ``|x1|``.

    Segment ``j`` runs from one minimum (inclusive) to the next (exclusive);
    the pieces before the first and after the last minimum are kept so the
    segments partition the whole series.
    """
    a = np.abs(np.asarray(x1, dtype=float))
    if a.size < 3:
        return [OscillationSegment(0, a.size, float(a.max()) if a.size else 0.0)]
    mins = np.nonzero((a[1:-1] < a[:-2]) & (a[1:-1] <= a[2:]))[0] + 1
    bounds = np.concatenate([[0], mins, [a.size]])
    bounds = np.unique(bounds)
    return [OscillationSegment(int(s), int(e), float(a[s:e].max())) for s, e in zip(bounds[:-1], bounds[1:])]


def oscillation_category(residency_min: float, typical=TYPICAL_MINUTES) -> int:
    """Nearest typical residency; counts past the last category are clamped to it."""
    typical = np.asarray(typical, dtype=float)
    cat = int(np.argmin(np.abs(typical - residency_min))) + 1
    if len(typical) > 1 and residency_min > typical[-1] + 0.5 * (typical[-1] - typical[-2]):
        log.warning("residency %.1f min exceeds the last category; clamped to %d", residency_min, cat)
    return cat


def build_residency_table(x1, events, window: float, typical=TYPICAL_MINUTES) -> AmplitudeResidencyTable:
    """Amplitude/residency pairs from an analysis x1 series and truth reversals.

    For each reversal that has a successor, ``x1_max`` is the amplitude of
    the oscillation that ends at the ``|x1|`` minimum nearest the reversal,
    and the residency is the time until the next reversal.
    """
    x1 = np.asarray(x1, dtype=float)
    ev = np.unique(event_cycles(events))
    ev = ev[ev < x1.size]
    segs = segment_oscillations(x1)
    ends = np.array([s.end for s in segs])
    rows = []
    for e, e_next in zip(ev[:-1], ev[1:]):
        j = int(np.argmin(np.abs(ends - e)))
        if ends[j] >= x1.size or segs[j].start == 0:
            continue  # the oscillation is cut by the series start/end
        res = (e_next - e) * window / 60.0
        rows.append((segs[j].x1_max, res, oscillation_category(res, typical)))
    if not rows:
        return AmplitudeResidencyTable(np.empty(0), np.empty(0), np.empty(0, dtype=int))
    arr = np.array(rows)
    return AmplitudeResidencyTable(arr[:, 0], arr[:, 1], arr[:, 2].astype(int))


def residency_forecast(x1_max: float, table: AmplitudeResidencyTable, half_width: float = 0.5) -> ResidencyForecast:
    """Empirical oscillation-count distribution of table rows with ``|x1_max - row| < half_width``.

    Falls back to the table-wide distribution (flagged) when the bin is empty.
    """
    if len(table) == 0:
        raise ValueError("empty residency table")
    sel = np.abs(table.x1_max - x1_max) < half_width
    if not sel.any():
        return ResidencyForecast(table.climatology(), climatological=True)
    counts = np.bincount(table.count[sel] - 1, minlength=N_CATEGORIES)[:N_CATEGORIES]
    return ResidencyForecast(counts / counts.sum())


def estimate_x1_max(xa, k: int, params: EmParams, window: float, lambda_lead: int = LAMBDA_LEAD) -> float:
    """Amplitude of the current oscillation using only information available at cycle ``k``.

    Combines ``|x1|`` over the analysis history since the last ``|x1|`` minimum
    with the lead forecast from analysis ``k`` up to its first sign change.
    """
    xa = np.asarray(xa, dtype=float)
    a = np.abs(xa[:k + 1, 0])
    start = 0
    for i in range(k - 1, 0, -1):
        if a[i] < a[i - 1] and a[i] <= a[i + 1]:
            start = i
            break
    best = float(a[start:].max())
    n, dt = window_steps(window, params)
    x = xa[k].copy()
    s0 = np.sign(x[0])
    for _ in range(max(lambda_lead, 0) * n):
        x = em_forecast(x, params, dt, 1)
        if np.sign(x[0]) != s0:
            break
        best = max(best, abs(float(x[0])))
    return best


# ---------------------------------------------------------------------------
# threshold tuning


@dataclass
class TuningResult:
    threshold: float
    ts: float | None
    far: float | None
    pod: float | None
    feasible: bool
    sweep: list = field(default_factory=list)  # (threshold, ts, far, pod)


def tune_threshold(scores, events, candidates, horizon: int = HORIZON, pod_min: float = 0.95,
                   direction: str = "above") -> TuningResult:
    """Pick the threshold with the best TS among those meeting ``POD >= pod_min``.

    ``scores`` is a per-cycle statistic; a trigger fires when the score is
    strictly above (``direction="above"``) or at/below (``"below"``) the
    threshold.  When no candidate reaches the POD floor, the one with the
    highest POD is returned with ``feasible=False``.
    """
    from .verification import categorical_scores

    s = np.asarray(scores, dtype=float)
    sweep = []
    for th in candidates:
        trig = (s > th) if direction == "above" else (s <= th)
        ts, far, pod = categorical_scores(label_outcomes(np.nan_to_num(trig, nan=False), events, horizon).table)
        sweep.append((float(th), ts, far, pod))
    ok = [r for r in sweep if r[3] is not None and r[3] >= pod_min]
    if ok:
        best = max(ok, key=lambda r: (r[1] or 0.0, r[3]))
        return TuningResult(best[0], best[1], best[2], best[3], True, sweep)
    best = max(sweep, key=lambda r: (r[3] or 0.0, r[1] or 0.0))
    return TuningResult(best[0], best[1], best[2], best[3], False, sweep)


# ---------------------------------------------------------------------------
# end-to-end evaluation

TESTS = ("lead", "bv", "corr")


@dataclass
class ReversalConfig:
    rho_corr: float = RHO_CORR
    lambda_corr: int = LAMBDA_CORR
    rho_bv: float = RHO_BV
    lambda_lead: int = LAMBDA_LEAD
    horizon: int = HORIZON
    train_fraction: float = 0.5
    half_width: float = 0.5
    typical_minutes: tuple = TYPICAL_MINUTES
    retune: bool = False
    pod_min: float = 0.95
    max_lead: int = 20

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.horizon < 1 or self.lambda_corr < 2 or self.lambda_lead < 0:
            raise ValueError("horizon >= 1, lambda_corr >= 2 and lambda_lead >= 0 required")
        self.typical_minutes = tuple(float(v) for v in self.typical_minutes)


def reversal_statistic(name: str, xa, growth, params: EmParams, window: float, cfg: ReversalConfig,
                fsc=None) -> tuple[np.ndarray, str, callable]:
    """Per-cycle statistic for a test, the trigger direction, and the current threshold."""
    if name == "lead":
        s = first_sign_change(xa, params, window, cfg.max_lead) if fsc is None else fsc
        return s, "below", cfg.lambda_lead
    if name == "bv":
        return np.nan_to_num(np.asarray(growth, dtype=float), nan=-np.inf), "above", cfg.rho_bv
    if name == "corr":
        return np.nan_to_num(corr_slopes(xa, cfg.lambda_corr), nan=-np.inf), "above", cfg.rho_corr
    raise ValueError(f"unknown reversal test {name!r}; expected one of {TESTS}")


def _triggers(score, direction, th):
    return (score <= th) if direction == "below" else (score > th)


def _candidates(name, score, cfg):
    if name == "lead":
        return np.arange(0, cfg.max_lead + 1, dtype=float)
    finite = score[np.isfinite(score)]
    if finite.size == 0:
        return np.array([0.0])
    return np.unique(np.quantile(finite, np.linspace(0.0, 0.995, 200)))


def evaluate(records, params: EmParams, cfg: ReversalConfig | None = None, tests=TESTS,
             growth=None) -> dict:
    """Run the occurrence tests and residency forecasts on one analysis experiment.

    The first ``train_fraction`` of the cycles builds the amplitude/residency
    table (and, with ``retune``, re-fits each threshold for the best TS at
    ``POD >= pod_min``); scores are computed on the remaining cycles.
    """
    from .verification import categorical_scores, rps, rps_skill

    cfg = cfg or ReversalConfig()
    window = records.window
    xa = np.asarray(records.xa, dtype=float)
    growth = records.bv_growth if growth is None else growth
    if "bv" in tests and np.all(np.isnan(growth)):
        raise ValueError("the bv test needs bred-vector growth values")
    ev = event_cycles(detect_truth_reversals(records.q_truth))
    n = xa.shape[0]
    n_train = int(round(cfg.train_fraction * n))
    ev_train = ev[ev < n_train]
    ev_test = ev[ev >= n_train] - n_train

    table = build_residency_table(xa[:n_train, 0], ev_train, window, cfg.typical_minutes)
    if len(table):
        clim = table.climatology()
    else:
        log.warning("empty residency training table: forecasts fall back to a uniform climatology")
        clim = np.full(N_CATEGORIES, 1.0 / N_CATEGORIES)

    out = {"window_s": window, "n_cycles": n, "n_train": n_train, "events_train": int(ev_train.size),
           "events_test": int(ev_test.size), "residency_table_rows": len(table),
           "climatology": clim.tolist(), "tests": {}}
    fsc = None
    xa_test = xa[n_train:]
    for name in tests:
        if name == "lead" and fsc is None:
            fsc = first_sign_change(xa, params, window, cfg.max_lead)
        score, direction, th = reversal_statistic(name, xa, growth, params, window, cfg, fsc)
        tuning = None
        if cfg.retune:
            tuning = tune_threshold(score[:n_train], ev_train, _candidates(name, score[:n_train], cfg),
                                    cfg.horizon, cfg.pod_min, direction)
            th = tuning.threshold
        trig = _triggers(score[n_train:], direction, th)
        lab = label_outcomes(trig, ev_test, cfg.horizon)
        ts, far, pod = categorical_scores(lab.table)
        warn = warning_times(lab, window, cfg.horizon)

        f_scores, c_scores, rlog = [], [], []
        lam = int(th) if name == "lead" else cfg.lambda_lead
        for e, k in zip(lab.hit_events, lab.first_trigger):
            nxt = ev_test[ev_test > e]
            if nxt.size == 0:
                continue
            observed = oscillation_category((nxt[0] - e) * window / 60.0, cfg.typical_minutes)
            amp = estimate_x1_max(xa_test, int(k), params, window, lam)
            fc = residency_forecast(amp, table, cfg.half_width) if len(table) else ResidencyForecast(clim, True)
            f_scores.append(rps(fc, observed))
            c_scores.append(rps(clim, observed))
            rlog.append({"cycle": int(k + n_train), "x1_max": amp, "probabilities": fc.probabilities.tolist(),
                         "climatological": fc.climatological, "observed": observed})
        have = len(f_scores) > 0 and len(table) > 0
        out["tests"][name] = {
            "threshold": float(th),
            "table": lab.table.to_dict(),
            "ts": ts, "far": far, "pod": pod,
            "rps_avg": rps_skill(f_scores, c_scores, "mean") if have else None,
            "rps_med": rps_skill(f_scores, c_scores, "median") if have else None,
            "warning_times": warn.to_dict(),
            "residency_log": rlog,
            "tuning": None if tuning is None else {"feasible": tuning.feasible, "ts": tuning.ts,
                                                   "far": tuning.far, "pod": tuning.pod},
        }
    return out
