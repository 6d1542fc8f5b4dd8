import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from thermoda.models import (
    EmParams,
    LorenzParams,
    em_forecast,
    em_jacobian,
    em_rhs,
    em_tangent_forecast,
    em_trajectory,
    h_transfer,
    h_transfer_derivative,
    integrate,
    lorenz_rhs,
    rk4_step,
    to_observation,
    window_steps,
    convecting_fixed_points,
)

finite = st.floats(-30, 30, allow_nan=False)


def h_ref(x):
    # direct scalar evaluation, written independently of the package
    if x < 1:
        return 44 / 9 * x**2 - 55 / 9 * x**3 + 20 / 9 * x**4
    return x ** (1 / 3)


class TestHTransfer:
    def test_endpoints(self):
        assert h_transfer(0.0) == 0.0
        assert h_transfer(1.0) == pytest.approx(1.0, abs=1e-15)

    def test_half(self):
        assert h_transfer(0.5) == pytest.approx((11 - 6.875 + 1.25) / 9, rel=1e-14)
        assert h_transfer(0.5) == pytest.approx(0.5972222222, abs=1e-9)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            h_transfer(-0.1)

    @given(st.floats(0, 50, allow_nan=False))
    def test_matches_reference_and_nonnegative(self, x):
        assert h_transfer(x) == pytest.approx(h_ref(x), rel=1e-12, abs=1e-15)
        assert h_transfer(x) >= 0

    @pytest.mark.parametrize("x0", [0.0, 1.0])
    def test_c1_junctions(self, x0):
        eps = 1e-7
        left = (h_ref(x0) - h_ref(x0 - eps)) / eps if x0 > 0 else 0.0  # h is even in |x1|
        right = (h_ref(x0 + eps) - h_ref(x0)) / eps
        assert abs(left - right) < 1e-6
        assert abs(h_ref(x0 + 1e-12) - h_ref(max(x0 - 1e-12, 0))) < 1e-10
        assert h_transfer_derivative(x0) == pytest.approx(right, abs=1e-6)

    def test_derivative_at_one(self):
        assert h_transfer_derivative(1.0) == pytest.approx(1 / 3)
        assert h_transfer_derivative(1.0 - 1e-12) == pytest.approx(1 / 3, abs=1e-9)


class TestRhs:
    def test_origin(self):
        for p in [EmParams(), EmParams(beta=3.0, k_coeff=0.0)]:
            np.testing.assert_array_equal(em_rhs([0, 0, 0], p), 0.0)

    def test_hand_evaluation(self):
        p = EmParams(alpha=7.99, beta=27.3, k_coeff=0.148)
        damp = 1 + 0.148 * 1.0
        expected = [7.99 * (2 - 1), 27.3 * 1 - 2 * damp - 1 * 3, 1 * 2 - 3 * damp]
        np.testing.assert_allclose(em_rhs([1.0, 2.0, 3.0], p), expected, rtol=1e-14)
        assert em_rhs([1.0, 2.0, 3.0], p)[0] == pytest.approx(7.99)

    def test_convecting_fixed_point_k0(self):
        p = EmParams(k_coeff=0.0)
        s = np.sqrt(p.beta - 1)
        for sign in (1, -1):
            np.testing.assert_allclose(em_rhs([sign * s, sign * s, p.beta - 1], p), 0.0, atol=1e-13)

    def test_convecting_fixed_points_with_k(self):
        p = EmParams()
        for row in convecting_fixed_points(p):
            np.testing.assert_allclose(em_rhs(row, p), 0.0, atol=1e-9)

    @given(finite, finite, finite, st.floats(0.5, 20), st.floats(-5, 40))
    def test_k0_equals_lorenz_b1(self, a, b, c, alpha, beta):
        p = EmParams(alpha=alpha, beta=beta, k_coeff=0.0)
        lp = LorenzParams(sigma=alpha, rho=beta, b=1.0)
        np.testing.assert_allclose(em_rhs([a, b, c], p), lorenz_rhs(np.array([a, b, c]), lp),
                                   rtol=1e-15, atol=1e-12)

    def test_k0_equals_lorenz_1000_states(self, rng):
        p = EmParams(k_coeff=0.0)
        lp = LorenzParams(sigma=p.alpha, rho=p.beta, b=1.0)
        for s in rng.normal(scale=10, size=(1000, 3)):
            assert np.array_equal(em_rhs(s, p), lorenz_rhs(s, lp)) or np.allclose(
                em_rhs(s, p), lorenz_rhs(s, lp), rtol=0, atol=1e-12)

    def test_lorenz_fixed_points(self):
        lp = LorenzParams()
        np.testing.assert_array_equal(lorenz_rhs(np.zeros(3), lp), 0.0)
        s = np.sqrt(lp.b * (lp.rho - 1))
        np.testing.assert_allclose(lorenz_rhs(np.array([s, s, lp.rho - 1]), lp), 0.0, atol=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            EmParams(alpha=0.0)
        with pytest.raises(ValueError):
            EmParams(k_coeff=-1.0)
        with pytest.raises(ValueError):
            EmParams(t_scale=0.0)
        with pytest.raises(ValueError):
            LorenzParams(b=0.0)


def fd_jacobian(s, p, h=1e-6):
    J = np.empty((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        J[:, j] = (em_rhs(s + e, p) - em_rhs(s - e, p)) / (2 * h)
    return J


def jac_rel_error(s, p):
    J, F = em_jacobian(s, p), fd_jacobian(s, p)
    return np.max(np.abs(J - F)) / max(np.max(np.abs(J)), 1.0)


class TestJacobian:
    def test_origin_k0(self):
        p = EmParams(k_coeff=0.0)
        expected = [[-p.alpha, p.alpha, 0], [p.beta, -1, 0], [0, 0, -1]]
        np.testing.assert_allclose(em_jacobian([0, 0, 0], p), expected)

    def test_random_states_vs_central_differences(self, rng):
        p = EmParams()
        states = rng.normal(scale=[6, 8, 8], size=(100, 3)) + [0, 0, 25]
        for i, x1 in enumerate([0.001, -0.001, 0.999, -0.999, 1.001, -1.001]):
            states[i, 0] = x1
        errs = [jac_rel_error(s, p) for s in states]
        assert max(errs) < 1e-6

    def test_continuous_across_x1_one(self):
        p = EmParams()
        lo = em_jacobian([1 - 1e-10, 2.0, 3.0], p)
        hi = em_jacobian([1 + 1e-10, 2.0, 3.0], p)
        np.testing.assert_allclose(lo, hi, atol=1e-8)

    def test_tangent_forecast_is_linearization(self, rng):
        p = EmParams()
        x0 = np.array([1.5, 2.0, 24.0])
        xf, M = em_tangent_forecast(x0, np.eye(3), p, 0.01, 5)
        np.testing.assert_allclose(xf, em_forecast(x0, p, 0.01, 5), rtol=1e-13)
        d = 1e-6 * rng.normal(size=3)
        diff = em_forecast(x0 + d, p, 0.01, 5) - em_forecast(x0 - d, p, 0.01, 5)
        np.testing.assert_allclose(M @ d, diff / 2, rtol=1e-5, atol=1e-13)


class TestRk4:
    def test_zero_rhs(self):
        s = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(rk4_step(lambda x: np.zeros_like(x), s, 0.1), s)

    def test_exponential_decay(self):
        # one step reproduces the degree-4 Taylor polynomial; its error is h^5/120 to leading order
        h = 0.1
        one = rk4_step(lambda x: -x, 1.0, h)
        assert one == pytest.approx(1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24, rel=1e-15)
        assert abs(one - np.exp(-h)) == pytest.approx(h**5 / 120, rel=0.05)
        # at the production step size the decay to t = 0.1 is within 1e-8
        assert abs(integrate(lambda x: -x, 1.0, 0.01, 10) - np.exp(-0.1)) < 1e-8

    def test_taylor_polynomial(self, rng):
        A = rng.normal(size=(3, 3))
        s = rng.normal(size=3)
        h = 0.05
        hA = h * A
        T = np.eye(3) + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + np.linalg.matrix_power(hA, 4) / 24
        np.testing.assert_allclose(rk4_step(lambda x: A @ x, s, h), T @ s, rtol=1e-13, atol=1e-14)

    def test_fourth_order_convergence(self):
        A = np.array([[-0.5, 2.0], [-2.0, -0.5]])
        s0 = np.array([1.0, 0.0])
        exact = expm(A * 2.0) @ s0
        errs = []
        for n in (20, 40, 80):
            errs.append(np.linalg.norm(integrate(lambda x: A @ x, s0, 2.0 / n, n) - exact))
        assert errs[0] / errs[1] >= 14
        assert errs[1] / errs[2] >= 14

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            rk4_step(lambda x: x, 1.0, 0.0)

    def test_compiled_matches_python(self):
        p = EmParams()
        s = np.array([1.0, 2.0, 20.0])
        ref = integrate(lambda x: em_rhs(x, p), s, 0.01, 50)
        np.testing.assert_allclose(em_forecast(s, p, 0.01, 50), ref, rtol=1e-12)
        traj = em_trajectory(s, p, 0.01, 50)
        assert traj.shape == (51, 3)
        np.testing.assert_array_equal(traj[0], s)
        np.testing.assert_allclose(traj[-1], ref, rtol=1e-12)

    def test_batch_matches_single(self, rng):
        p = EmParams()
        X = rng.normal(size=(5, 3)) + [0, 0, 20]
        out = em_forecast(X, p, 0.01, 10)
        for i in range(5):
            np.testing.assert_allclose(out[i], em_forecast(X[i], p, 0.01, 10), rtol=1e-14)


class TestObservation:
    @pytest.mark.parametrize("x1, q", [(1.0, 0.0136), (0.0, 0.0), (-2.0, -0.0272)])
    def test_values(self, x1, q):
        assert to_observation([x1, 5.0, 7.0], EmParams()) == pytest.approx(q, abs=1e-15)

    def test_operator_row(self):
        np.testing.assert_array_equal(EmParams().obs_operator, [[0.0136, 0.0, 0.0]])

    def test_window_mapping(self):
        p = EmParams()
        assert p.t_scale * 0.01 == pytest.approx(6.316)
        n, dt = window_steps(30.0, p)
        assert n == 5
        assert n * dt * p.t_scale == pytest.approx(30.0)
        n, dt = window_steps(600.0, p)
        assert n == 95 and n * dt * p.t_scale == pytest.approx(600.0)
