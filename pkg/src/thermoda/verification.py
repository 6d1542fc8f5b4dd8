"""
Forecast verification: categorical scores from 2x2 contingency tables,
ranked probability scores for the residency-time forecasts, and the
climatology-scaled RMSE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from decimal import Decimal, ROUND_HALF_UP

import numpy as np

N_CATEGORIES = 6


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # hits
    b: int  # false alarms
    c: int  # misses
    d: int  # correct negatives

    def __post_init__(self):
        for name in "abcd":
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d

    def to_dict(self) -> dict:
        return {**asdict(self), "n": self.n}


@dataclass
class SkillReport:
    ts: float | None
    far: float | None
    pod: float | None
    rps_avg: float | None = None
    rps_med: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    return num / den if den > 0 else None


def categorical_scores(t: ContingencyTable):
    """Threat score, false alarm ratio and probability of detection.

    A score whose denominator is zero is returned as ``None``.
    """
    ts = _ratio(t.a, t.a + t.b + t.c)
    far = _ratio(t.b, t.a + t.b)
    pod = _ratio(t.a, t.a + t.c)
    return ts, far, pod


def as_percent(value, detect_upper=False) -> str:
    """Integer percent, rounding half away from zero.

    With ``detect_upper`` a value in (0.995, 1) is shown as ``>99`` (used for POD).
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "--"
    if detect_upper and 0.995 < value < 1.0:
        return ">99"
    q = Decimal(repr(float(value) * 100)).quantize(Decimal("1"), rounding=ROUND_HALF_UP)
    return str(int(q))


def _cdf(probs) -> np.ndarray:
    return np.cumsum(np.asarray(probs, dtype=float))


def rps(forecast, observed: int, n_categories: int = N_CATEGORIES) -> float:
    """Ranked probability score of a forecast over ordered categories ``1..n``.

    ``sum_k (F_k - O_k)^2`` with ``F``/``O`` the forecast and observed CDFs.
    """
    p = np.zeros(n_categories)
    f = np.asarray(getattr(forecast, "probabilities", forecast), dtype=float)
    if f.size > n_categories:
        raise ValueError("forecast has more categories than n_categories")
    p[: f.size] = f
    if not 1 <= observed <= n_categories:
        raise ValueError(f"observed category must be in 1..{n_categories}")
    obs = np.zeros(n_categories)
    obs[observed - 1] = 1.0
    return float(np.sum((_cdf(p) - _cdf(obs)) ** 2))


def rps_skill(forecast_scores, climatology_scores, aggregate: str = "mean"):
    """``1 - agg(forecast RPS) / agg(climatology RPS)`` over the same events.

    Aggregation happens before the ratio.  Returns ``None`` when the
    climatological aggregate is zero.
    """
    f = np.asarray(forecast_scores, dtype=float)
    c = np.asarray(climatology_scores, dtype=float)
    if f.size == 0 or f.shape != c.shape:
        raise ValueError("need equal-length, non-empty score lists")
    agg = {"mean": np.mean, "median": np.median}[aggregate]
    denom = agg(c)
    if denom == 0:
        return None
    return float(1.0 - agg(f) / denom)


def scaled_rmse(residuals, climatology: float) -> float:
    if not climatology > 0:
        raise ValueError("climatology must be positive")
    r = np.asarray(residuals, dtype=float)
    return float(np.sqrt(np.mean(r * r)) / climatology)


def skill_table(rows: dict) -> str:
    """Text table in the style ``Method | TS | FAR | POD | RPS-avg | RPS-med`` (percent)."""
    lines = [f"{'Method':>12} | {'TS':>4} | {'FAR':>4} | {'POD':>4} | {'RPS-avg':>7} | {'RPS-med':>7}"]
    lines.append("-" * len(lines[0]))
    for name, rep in rows.items():
        r = rep if isinstance(rep, SkillReport) else SkillReport(**rep)
        lines.append(f"{name:>12} | {as_percent(r.ts):>4} | {as_percent(r.far):>4} | "
                     f"{as_percent(r.pod, detect_upper=True):>4} | {as_percent(r.rps_avg):>7} | "
                     f"{as_percent(r.rps_med):>7}")
    return "\n".join(lines)
