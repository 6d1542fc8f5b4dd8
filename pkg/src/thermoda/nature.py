"""
Surrogate nature run: a one-dimensional finite-volume thermosyphon loop.

The loop momentum and energy equations are discretized on ``n_cells``
angular cells (first-order upwind advection, midpoint buoyancy quadrature)
and advanced with fixed-step RK4.  With linear friction, a uniform wall
heat-transfer coefficient and no axial conduction, the lowest Fourier mode
of the temperature field reduces exactly to the EM model.  Quadratic
friction (``c_quad``), axial conduction (``kappa_axial``) and the
discretization itself break that reduction, so the EM forecasts of this
truth carry genuine structural model error.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numba
import numpy as np

from .models import EmParams, _h_scalar

log = logging.getLogger(__name__)


class BlowUpError(RuntimeError):
    """Raised when the loop temperature leaves its physical bound."""

    def __init__(self, message, time_s=None):
        super().__init__(message)
        self.time_s = time_s


@dataclass(frozen=True)
class LoopConfig:
    """Physics and numerics of the surrogate loop.

    Defaults are pinned by ``scripts/tune_nature.py``: the fluid/heat-transfer
    coefficients reproduce the reference EM parameters in the first-mode
    reduction (alpha 7.99, beta 27.3, K 0.148, 631.6 s, 0.0136 kg/s) at
    Ra = 1.5e5, and the model-error knobs give a chaotic truth with
    roughly 11-minute oscillations.
    """

    R: float = 0.36  # loop radius, m
    r: float = 0.015  # tube radius, m
    T_h: float = 305.0  # K
    T_c: float = 295.0  # K
    g: float = 0.0562192  # m/s^2
    gamma: float = 1.1e-3  # 1/K
    nu: float = 1.0e-6  # m^2/s
    kappa: float = 1.1131407e-07  # m^2/s
    rho0: float = 795.348  # kg/m^3
    c_p: float = 2400.0  # J/(kg K)
    h_w0: float = 3022.22  # W/(m^3 K)
    f_w0: float = 0.0253008  # 1/s
    k_coeff_true: float = 0.148
    c_quad: float = 0.05  # 1/m
    kappa_axial: float = 0.0  # m^2/s
    n_cells: int = 512
    dt_sim: float = 0.25  # s
    report_interval: float = 10.0  # s
    geometry: str = "2d"  # "2d": q = rho0*2r*u ; "3d": q = rho0*pi*r^2*u
    transient_fraction: float = 0.1
    transient_min_s: float = 7200.0

    def __post_init__(self):
        positive = ("R", "r", "g", "gamma", "nu", "kappa", "rho0", "c_p", "h_w0", "f_w0",
                    "dt_sim", "report_interval")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T_h < self.T_c:
            raise ValueError("T_h must not be below T_c")
        if self.n_cells < 16 or self.n_cells % 2:
            raise ValueError("n_cells must be even and at least 16")
        if self.c_quad < 0 or self.kappa_axial < 0 or self.k_coeff_true < 0:
            raise ValueError("c_quad, kappa_axial and k_coeff_true must be non-negative")
        if self.geometry not in ("2d", "3d"):
            raise ValueError(f"geometry must be '2d' or '3d', got {self.geometry!r}")
        ratio = self.report_interval / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("report_interval must be an integer multiple of dt_sim")

    @property
    def delta_T(self) -> float:
        return self.T_h - self.T_c

    @property
    def area(self) -> float:
        """Cross-section used to turn velocity into mass flow rate."""
        return 2.0 * self.r if self.geometry == "2d" else math.pi * self.r ** 2

    @property
    def u_ref(self) -> float:
        """Velocity scale that makes ``|u| / u_ref`` the EM variable ``|x1|``."""
        return self.R * self.h_w0 / (self.rho0 * self.c_p)

    @property
    def cell_centers(self) -> np.ndarray:
        dphi = 2 * math.pi / self.n_cells
        return -math.pi / 2 + (np.arange(self.n_cells) + 0.5) * dphi

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoopState:
    u: float  # bulk velocity, m/s
    T: np.ndarray  # per-cell temperature, K

    def copy(self) -> "LoopState":
        return LoopState(float(self.u), np.array(self.T, dtype=float))


@dataclass
class TruthSeries:
    times: np.ndarray  # s
    q: np.ndarray  # kg/s
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.times.shape != self.q.shape or self.times.size < 2:
            raise ValueError("truth series needs matching times/q of length >= 2")

    @property
    def interval(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self):
        return self.q.size


# ---------------------------------------------------------------------------
# physics


def rayleigh(c: LoopConfig) -> float:
    return 8.0 * c.g * c.gamma * c.r ** 3 * c.delta_T / (c.nu * c.kappa)


def gravity_for_rayleigh(c: LoopConfig, ra: float) -> float:
    """Gravitational acceleration giving Rayleigh number ``ra`` for config ``c``."""
    return ra * c.nu * c.kappa / (8.0 * c.gamma * c.r ** 3 * c.delta_T)


def wall_temperature(phi, c: LoopConfig):
    """Imposed wall temperature: T_h on the lower half, T_c on the upper half.

    ``phi`` is measured from the bottom of the loop; exactly at the
    junctions (+-pi/2) the mean of the two temperatures is returned.
    """
    phi = np.asarray(phi, dtype=float)
    wrapped = np.mod(phi + math.pi, 2 * math.pi) - math.pi  # in [-pi, pi)
    dist = np.abs(np.abs(wrapped) - math.pi / 2)
    out = np.where(np.abs(wrapped) < math.pi / 2, c.T_h, c.T_c)
    out = np.where(dist < 1e-12, 0.5 * (c.T_h + c.T_c), out)
    return float(out) if out.ndim == 0 else out


def em_equivalent(c: LoopConfig) -> EmParams:
    """EM parameters of the loop's lowest-Fourier-mode reduction."""
    t_scale = c.rho0 * c.c_p / c.h_w0
    alpha = 0.5 * c.f_w0 * t_scale
    beta = (2.0 / math.pi) * c.gamma * c.g * c.delta_T * t_scale / (c.R * c.f_w0)
    q_scale = c.rho0 * c.area * c.u_ref
    return EmParams(alpha=alpha, beta=beta, k_coeff=c.k_coeff_true, t_scale=t_scale, q_scale=q_scale)


def loop_config_for_em(p: EmParams, base: LoopConfig | None = None, **overrides) -> LoopConfig:
    """Loop config whose first-mode reduction is ``p``.

    Geometry, wall temperatures, ``gamma`` and ``c_p`` are taken from ``base``;
    ``rho0``, ``h_w0``, ``f_w0``, ``g`` and ``k_coeff_true`` are solved for.
    """
    base = base or LoopConfig()
    base = replace(base, **overrides) if overrides else base
    area = 2.0 * base.r if base.geometry == "2d" else math.pi * base.r ** 2
    rho0 = p.q_scale * p.t_scale / (area * base.R)
    h_w0 = rho0 * base.c_p / p.t_scale
    f_w0 = 2.0 * p.alpha / p.t_scale
    if base.delta_T <= 0:
        raise ValueError("need T_h > T_c to match a heating parameter")
    g = p.beta * math.pi * base.R * f_w0 / (2.0 * p.t_scale * base.gamma * base.delta_T)
    return replace(base, rho0=rho0, h_w0=h_w0, f_w0=f_w0, g=g, k_coeff_true=p.k_coeff)


def temperature_bounds(c: LoopConfig) -> tuple[float, float]:
    return c.T_c - 5.0 * c.delta_T, c.T_h + 5.0 * c.delta_T


def _packed(c: LoopConfig) -> np.ndarray:
    return np.array([
        c.gamma * c.g / (2.0 * math.pi),  # buoyancy prefactor
        0.5 * c.f_w0,
        c.c_quad,
        c.h_w0 / (c.rho0 * c.c_p),  # base relaxation rate
        c.k_coeff_true,
        1.0 / c.u_ref,
        c.kappa_axial / c.R ** 2,
        1.0 / c.R,
    ])


@numba.njit(cache=True)
def _loop_rhs(u, T, Tw, sinphi, dphi, pk, dT):
    n = T.shape[0]
    buoy = 0.0
    for i in range(n):
        buoy += T[i] * sinphi[i]
    du = pk[0] * buoy * dphi - pk[1] * u - pk[2] * u * abs(u)
    relax = pk[3] * (1.0 + pk[4] * _h_scalar(abs(u) * pk[5]))
    adv = u * pk[7] / dphi
    diff = pk[6] / (dphi * dphi)
    for i in range(n):
        im = i - 1 if i > 0 else n - 1
        ip = i + 1 if i < n - 1 else 0
        if u >= 0.0:
            grad = T[i] - T[im]
        else:
            grad = T[ip] - T[i]
        dT[i] = -adv * grad - relax * (T[i] - Tw[i]) + diff * (T[ip] - 2.0 * T[i] + T[im])
    return du


@numba.njit(cache=True)
def _loop_run(u, T, Tw, sinphi, dphi, pk, dt, steps_per_sample, n_samples, lo, hi):
    """Advance with RK4, returning velocity samples; stops at blow-up.

    Returns (u_samples, u, T, n_done) where n_done < n_samples flags blow-up.
    """
    n = T.shape[0]
    us = np.empty(n_samples)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    Tt = np.empty(n)
    for s in range(n_samples):
        us[s] = u
        for _ in range(steps_per_sample):
            a1 = _loop_rhs(u, T, Tw, sinphi, dphi, pk, k1)
            for i in range(n):
                Tt[i] = T[i] + 0.5 * dt * k1[i]
            a2 = _loop_rhs(u + 0.5 * dt * a1, Tt, Tw, sinphi, dphi, pk, k2)
            for i in range(n):
                Tt[i] = T[i] + 0.5 * dt * k2[i]
            a3 = _loop_rhs(u + 0.5 * dt * a2, Tt, Tw, sinphi, dphi, pk, k3)
            for i in range(n):
                Tt[i] = T[i] + dt * k3[i]
            a4 = _loop_rhs(u + dt * a3, Tt, Tw, sinphi, dphi, pk, k4)
            u = u + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            bad = not np.isfinite(u)
            for i in range(n):
                T[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not (lo <= T[i] <= hi):
                    bad = True
            if bad:
                return us, u, T, s
    return us, u, T, n_samples


def loop_rhs(s: LoopState, c: LoopConfig) -> LoopState:
    """Semi-discrete time derivative of the loop state."""
    lo, hi = temperature_bounds(c)
    T = np.ascontiguousarray(s.T, dtype=float)
    if T.shape != (c.n_cells,):
        raise ValueError(f"expected {c.n_cells} cell temperatures, got {T.shape}")
    if not np.all((T >= lo) & (T <= hi)):
        raise BlowUpError("loop temperature outside physical bound")
    phi = c.cell_centers
    dT = np.empty_like(T)
    du = _loop_rhs(float(s.u), T, wall_temperature(phi, c), np.sin(phi), 2 * math.pi / c.n_cells,
                   _packed(c), dT)
    return LoopState(du, dT)


def mass_flow_rate(u, c: LoopConfig):
    return c.rho0 * c.area * np.asarray(u)


def default_initial_state(c: LoopConfig, seed: int = 0) -> LoopState:
    """Conduction profile plus a small seeded perturbation in velocity."""
    rng = np.random.default_rng(seed)
    T = wall_temperature(c.cell_centers, c).astype(float)
    u = 1e-3 * c.u_ref * (1.0 + rng.random())
    return LoopState(u, T)


def transient_seconds(c: LoopConfig, t_end: float) -> float:
    return max(c.transient_fraction * t_end, c.transient_min_s)


def simulate_truth(c: LoopConfig, t_end: float, ic: LoopState | None = None, seed: int = 0,
                   discard_transient: bool = True) -> TruthSeries:
    """Integrate the loop and sample the mass flow rate every ``report_interval``.

    ``t_end`` is the length of the reported series; a transient of
    ``max(transient_fraction * t_end, transient_min_s)`` is integrated first
    and dropped unless ``discard_transient`` is false.  The reported times
    start at zero.
    """
    if t_end < c.report_interval:
        raise ValueError("t_end must cover at least one report interval")
    state = (ic or default_initial_state(c, seed)).copy()
    phi = c.cell_centers
    Tw = wall_temperature(phi, c)
    sinphi = np.sin(phi)
    dphi = 2 * math.pi / c.n_cells
    pk = _packed(c)
    lo, hi = temperature_bounds(c)
    steps = int(round(c.report_interval / c.dt_sim))

    def run(u, T, n_samples, offset):
        us, u, T, done = _loop_run(u, T, Tw, sinphi, dphi, pk, c.dt_sim, steps, n_samples, lo, hi)
        if done < n_samples:
            t_bad = offset + (done + 1) * c.report_interval
            raise BlowUpError(f"loop solver blew up near t = {t_bad:.1f} s", time_s=t_bad)
        return us, u, T

    u, T = state.u, np.ascontiguousarray(state.T)
    t0 = 0.0
    if discard_transient:
        n_tr = int(math.ceil(transient_seconds(c, t_end) / c.report_interval))
        _, u, T = run(u, T, n_tr, 0.0)
        t0 = n_tr * c.report_interval
    n = int(round(t_end / c.report_interval))
    us, u, T = run(u, T, n, t0)
    times = np.arange(n) * c.report_interval
    meta = {"loop_config": c.to_dict(), "seed": int(seed), "t_end": float(t_end),
            "final_state": {"u": float(u)}}
    return TruthSeries(times, mass_flow_rate(us, c), meta)


def observe(series: TruthSeries, noise_std: float, seed) -> np.ndarray:
    """Noisy observations ``q + N(0, noise_std**2)``, reproducible from ``seed``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if noise_std == 0:
        return series.q.copy()
    return series.q + rng.normal(0.0, noise_std, size=series.q.shape)


def climatology(q) -> float:
    """Root-mean-square mass flow rate ``sqrt(<q^2>)``."""
    q = np.asarray(q.q if isinstance(q, TruthSeries) else q, dtype=float)
    if q.size == 0:
        raise ValueError("empty series")
    return float(np.sqrt(np.mean(q * q)))


# ---------------------------------------------------------------------------
# persistence


def write_truth_csv(series: TruthSeries, path, extra_meta: dict | None = None) -> Path:
    """Write ``t_s,q_kg_s`` rows plus a ``.json`` sidecar with the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write("t_s,q_kg_s\n")
        for t, q in zip(series.times, series.q):
            fh.write(f"{float(t)!r},{float(q)!r}\n")
    meta = dict(series.metadata)
    if extra_meta:
        meta.update(extra_meta)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_truth_csv(path) -> TruthSeries:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return TruthSeries(data[:, 0], data[:, 1], meta)


def em_truth(p: EmParams, t_end: float, report_interval: float = 10.0, x0=None,
             spinup: float = 50.0) -> tuple[TruthSeries, np.ndarray]:
    """Truth generated by the EM model itself (perfect-model experiments).

    Returns the series of ``q_scale * x1`` and the full state at each sample.
    The model step is ``report_interval / t_scale / k`` with the smallest
    integer ``k`` keeping it at or below 0.01.
    """
    from .models import MODEL_DT, em_forecast

    x = np.array([1.0, 1.0, 1.0] if x0 is None else x0, dtype=float)
    span = report_interval / p.t_scale
    k = max(1, int(math.ceil(span / MODEL_DT - 1e-12)))
    dt = span / k
    x = em_forecast(x, p, dt, int(round(spinup / dt)))
    n = int(round(t_end / report_interval))
    states = np.empty((n, 3))
    for i in range(n):
        states[i] = x
        x = em_forecast(x, p, dt, k)
    times = np.arange(n) * report_interval
    meta = {"em_params": p.to_dict(), "kind": "em-perfect-model"}
    return TruthSeries(times, p.q_scale * states[:, 0], meta), states
