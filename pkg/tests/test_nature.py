import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from thermoda.models import EmParams, convecting_fixed_points, h_transfer
from thermoda.nature import (
    BlowUpError,
    LoopConfig,
    LoopState,
    TruthSeries,
    climatology,
    em_equivalent,
    gravity_for_rayleigh,
    loop_config_for_em,
    loop_rhs,
    observe,
    rayleigh,
    read_truth_csv,
    simulate_truth,
    wall_temperature,
    write_truth_csv,
)

# pinned from the default configuration, 1 day after the transient, seed 0
DEFAULT_CLIMATOLOGY_1DAY = 0.0728908595513371


@pytest.fixture(scope="module")
def default_truth_10d():
    return simulate_truth(LoopConfig(), 10 * 86400.0, seed=0)


class TestRayleigh:
    def test_zero_temperature_difference(self):
        assert rayleigh(LoopConfig(T_h=300.0, T_c=300.0)) == 0.0

    def test_linear_in_g(self):
        c = LoopConfig()
        from dataclasses import replace
        assert rayleigh(replace(c, g=2 * c.g)) == pytest.approx(2 * rayleigh(c), rel=1e-14)

    def test_formula(self):
        c = LoopConfig()
        expected = 8 * c.g * c.gamma * c.r**3 * (c.T_h - c.T_c) / (c.nu * c.kappa)
        assert rayleigh(c) == pytest.approx(expected, rel=1e-14)

    def test_round_trip(self):
        from dataclasses import replace
        c = LoopConfig()
        g = gravity_for_rayleigh(c, 1.5e5)
        assert rayleigh(replace(c, g=g)) == pytest.approx(1.5e5, rel=1e-9)

    def test_default_is_reference_rayleigh(self):
        assert rayleigh(LoopConfig()) == pytest.approx(1.5e5, rel=1e-5)


class TestWall:
    def test_values(self):
        c = LoopConfig()
        assert wall_temperature(0.0, c) == c.T_h
        assert wall_temperature(math.pi, c) == c.T_c
        assert wall_temperature(math.pi / 2, c) == 0.5 * (c.T_h + c.T_c)
        assert wall_temperature(-math.pi / 2, c) == 0.5 * (c.T_h + c.T_c)
        assert wall_temperature(2 * math.pi, c) == c.T_h

    def test_cells_never_on_junction(self):
        c = LoopConfig(n_cells=64)
        Tw = wall_temperature(c.cell_centers, c)
        assert set(np.unique(Tw)) == {c.T_h, c.T_c}
        assert np.sum(Tw == c.T_h) == 32

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LoopConfig(n_cells=15)
        with pytest.raises(ValueError):
            LoopConfig(T_h=290.0, T_c=300.0)
        with pytest.raises(ValueError):
            LoopConfig(c_quad=-1.0)
        with pytest.raises(ValueError):
            LoopConfig(geometry="torus")


class TestLoopRhs:
    def test_rest_at_wall_profile(self):
        c = LoopConfig(n_cells=64)
        d = loop_rhs(LoopState(0.0, wall_temperature(c.cell_centers, c)), c)
        np.testing.assert_allclose(d.T, 0.0, atol=1e-12)
        assert abs(d.u) < 1e-15

    def test_rest_at_uniform_temperature(self):
        c = LoopConfig(n_cells=64)
        T0 = 301.0
        d = loop_rhs(LoopState(0.0, np.full(64, T0)), c)
        assert abs(d.u) < 1e-15
        rate = c.h_w0 / (c.rho0 * c.c_p)
        np.testing.assert_allclose(d.T, -rate * (T0 - wall_temperature(c.cell_centers, c)), rtol=1e-12)

    @given(st.floats(-3, 3), st.integers(0, 10_000))
    def test_mirror_symmetry(self, u_units, seed):
        c = LoopConfig(n_cells=32, kappa_axial=1e-6)
        rng = np.random.default_rng(seed)
        T = 300.0 + 4 * rng.standard_normal(32)
        reflect = (32 // 2 - 1 - np.arange(32)) % 32  # cell index of -phi
        u = u_units * c.u_ref
        a = loop_rhs(LoopState(u, T), c)
        b = loop_rhs(LoopState(-u, T[reflect]), c)
        # the buoyancy sum cancels ~300 K terms, so compare at round-off scale
        scale = c.gamma * c.g * 300.0
        assert abs(b.u + a.u) <= 1e-13 * scale
        np.testing.assert_allclose(b.T, a.T[reflect], rtol=1e-12, atol=1e-14)

    def test_blow_up_detected(self):
        c = LoopConfig(n_cells=16)
        with pytest.raises(BlowUpError):
            loop_rhs(LoopState(0.0, np.full(16, 1e4)), c)

    def test_em_equivalent_round_trip(self):
        p = EmParams()
        c = loop_config_for_em(p)
        q = em_equivalent(c)
        for name in ("alpha", "beta", "k_coeff", "t_scale", "q_scale"):
            assert getattr(q, name) == pytest.approx(getattr(p, name), rel=1e-12)
        assert em_equivalent(LoopConfig()).alpha == pytest.approx(7.99, rel=1e-5)


def three_mode_oracle(c, u0, a0, b0, times):
    """First-Fourier-pair projection of the loop equations (no axial diffusion, linear friction)."""
    def f(t, y):
        u, a, b = y
        hc = c.h_w0 * (1 + c.k_coeff_true * h_transfer(abs(u) / c.u_ref)) / (c.rho0 * c.c_p)
        return [0.5 * c.gamma * c.g * b - 0.5 * c.f_w0 * u,
                -(u / c.R) * b - hc * (a - 2 * c.delta_T / math.pi),
                (u / c.R) * a - hc * b]
    sol = solve_ivp(f, (0, times[-1]), [u0, a0, b0], t_eval=times, rtol=1e-11, atol=1e-14,
                    method="DOP853")
    return sol.y[0]


def test_refinement_matches_three_mode_projection():
    p = EmParams()
    fp = convecting_fixed_points(p)[0]
    errs = []
    for n in (128, 256, 512):
        c = loop_config_for_em(p, c_quad=0.0, kappa_axial=0.0, n_cells=n)
        phi = c.cell_centers
        u0 = 1.3 * fp[0] * c.u_ref
        b0 = fp[1] * c.f_w0 * c.u_ref / (c.gamma * c.g)
        a0 = 0.8 * 2 * c.delta_T / math.pi
        T0 = 0.5 * (c.T_h + c.T_c) + a0 * np.cos(phi) + b0 * np.sin(phi)
        tr = simulate_truth(c, p.t_scale, ic=LoopState(u0, T0), discard_transient=False)
        u = tr.q / (c.rho0 * c.area)
        errs.append(np.max(np.abs(u - three_mode_oracle(c, u0, a0, b0, tr.times))) / c.u_ref)
    # first-order upwind advection: halving the cell size halves the error
    assert errs[0] / errs[1] > 1.8
    assert errs[1] / errs[2] > 1.8
    assert errs[2] < 0.3


class TestSimulate:
    def test_subcritical_decays(self):
        c = loop_config_for_em(EmParams(beta=0.5), n_cells=64, dt_sim=1.0)
        tr = simulate_truth(c, 20 * 631.6, discard_transient=False)
        assert abs(tr.q[-1]) < 1e-3 * abs(tr.q[0])

    @pytest.mark.parametrize("seed", [0, 3])
    def test_supercritical_steady(self, seed):
        c = loop_config_for_em(EmParams(beta=5.0), n_cells=64, dt_sim=1.0)
        tr = simulate_truth(c, 30 * 631.6, seed=seed, discard_transient=False)
        tail = tr.q[-100:]
        assert np.all(np.abs(tail) > 0.5 * c.rho0 * c.area * c.u_ref)
        assert np.ptp(tail) < 1e-3 * np.abs(tail).mean()

    def test_onset_bracketed(self):
        def settles_moving(beta):
            c = loop_config_for_em(EmParams(beta=beta), n_cells=32, dt_sim=1.0)
            tr = simulate_truth(c, 60 * 631.6, discard_transient=False)
            return abs(tr.q[-1]) > abs(tr.q[0])
        lo, hi = 0.5, 3.0
        assert not settles_moving(lo) and settles_moving(hi)
        for _ in range(5):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if settles_moving(mid) else (mid, hi)
        # the EM reduction loses conduction stability at beta = 1
        assert 0.8 < 0.5 * (lo + hi) < 1.3

    def test_zero_forcing_decays_monotonically(self):
        c = LoopConfig(n_cells=32, T_h=300.0, T_c=300.0, dt_sim=1.0)
        tr = simulate_truth(c, 2000.0, ic=LoopState(0.01, np.full(32, 300.0)), discard_transient=False)
        assert np.all(np.diff(np.abs(tr.q)) <= 0)

    def test_chaotic_default_reverses_and_is_bimodal(self, default_truth_10d):
        q = default_truth_10d.q
        assert np.sum(np.diff(np.sign(q)) != 0) > 50
        hist, edges = np.histogram(q / climatology(q), bins=np.linspace(-2.5, 2.5, 21))
        centers = 0.5 * (edges[1:] + edges[:-1])
        for sign in (-1, 1):
            wing = hist[(sign * centers > 1.25) & (sign * centers < 2.0)].max()
            trough = hist[(sign * centers > 0.75) & (sign * centers < 1.25)].min()
            assert wing > trough
        assert 0.4 < np.mean(q > 0) < 0.6

    def test_energy_bound_over_1e6_steps(self, default_truth_10d):
        c = LoopConfig()
        steps = 10 * 86400.0 / c.dt_sim
        assert steps >= 1e6
        assert np.all(np.isfinite(default_truth_10d.q))

    def test_default_climatology_pinned(self):
        tr = simulate_truth(LoopConfig(), 86400.0, seed=0)
        assert climatology(tr) == pytest.approx(DEFAULT_CLIMATOLOGY_1DAY, rel=1e-9)
        assert len(tr) == 8640 and tr.interval == 10.0

    def test_deterministic(self):
        c = LoopConfig(n_cells=64)
        a = simulate_truth(c, 3600.0, seed=5)
        b = simulate_truth(c, 3600.0, seed=5)
        np.testing.assert_array_equal(a.q, b.q)

    def test_short_t_end_rejected(self):
        with pytest.raises(ValueError):
            simulate_truth(LoopConfig(), 5.0)


class TestObserve:
    def test_zero_noise(self, em_series):
        truth, _ = em_series
        np.testing.assert_array_equal(observe(truth, 0.0, seed=1), truth.q)

    def test_noise_statistics(self):
        tr = TruthSeries(np.arange(100_000) * 10.0, np.zeros(100_000))
        y = observe(tr, 6e-4, seed=11)
        assert np.std(y) == pytest.approx(6e-4, rel=0.02)

    def test_default_noise_relative_to_reference_climatology(self):
        assert 6e-4 / 0.075812 == pytest.approx(0.008, abs=0.0005)

    def test_reproducible(self, em_series):
        truth, _ = em_series
        np.testing.assert_array_equal(observe(truth, 1e-3, 4), observe(truth, 1e-3, 4))
        assert not np.array_equal(observe(truth, 1e-3, 4), observe(truth, 1e-3, 5))

    def test_negative_noise(self, em_series):
        with pytest.raises(ValueError):
            observe(em_series[0], -1.0, 0)


class TestClimatology:
    @given(st.floats(-5, 5, allow_nan=False), st.integers(1, 50))
    def test_constant(self, c, n):
        assert climatology(np.full(n, c)) == pytest.approx(abs(c))

    def test_plus_minus(self):
        assert climatology([0.3, -0.3]) == pytest.approx(0.3)

    def test_empty(self):
        with pytest.raises(ValueError):
            climatology([])


def test_csv_round_trip_and_bytes(tmp_path, em_series):
    truth, _ = em_series
    a = write_truth_csv(truth, tmp_path / "a" / "truth.csv", {"seed": 0})
    b = write_truth_csv(truth, tmp_path / "b" / "truth.csv", {"seed": 0})
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "t_s,q_kg_s"
    back = read_truth_csv(a)
    np.testing.assert_array_equal(back.q, truth.q)
    np.testing.assert_array_equal(back.times, truth.times)
    assert back.metadata["seed"] == 0
