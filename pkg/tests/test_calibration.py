import numpy as np
import pytest

from thermoda.calibration import (
    PARAM_NAMES,
    PENALTY,
    CalibrationResult,
    ShootingProblem,
    calibrate,
    calibrate_staged,
    continuity_gaps,
    derivative_states,
    estimate_period,
    pack,
    shooting_residual,
    unpack,
)
from thermoda.models import EmParams
from thermoda.nature import em_truth, observe

TRUE = EmParams()


@pytest.fixture(scope="module")
def data():
    truth, states = em_truth(TRUE, 4 * 3600.0, report_interval=10.0)
    return truth, states


@pytest.fixture(scope="module")
def problem(data):
    truth, _ = data
    return ShootingProblem.from_series(truth.times, truth.q, n_windows=6)


def true_z(problem, states):
    return pack(TRUE, states[problem.starts])


def scaled(p, factors):
    return EmParams(*[getattr(p, n) * f for n, f in zip(PARAM_NAMES, factors)])


def test_problem_layout(problem):
    assert problem.n_windows == 6
    assert problem.n_unknowns == 23
    step = problem.window_samples - 1
    np.testing.assert_array_equal(problem.starts, np.arange(6) * step)
    # about two oscillation periods of roughly 11 min per window
    assert 15 < problem.window_samples * 10.0 / 60.0 < 40


def test_problem_validation():
    with pytest.raises(ValueError):
        ShootingProblem(np.arange(10.0), np.zeros(10), window_samples=3)
    with pytest.raises(ValueError):
        ShootingProblem(np.arange(5.0), np.zeros(5), window_samples=8)


def test_pack_round_trip(problem, data):
    _, states = data
    p, ics = unpack(problem, true_z(problem, states))
    for n in PARAM_NAMES:
        assert getattr(p, n) == pytest.approx(getattr(TRUE, n), rel=1e-14)
    np.testing.assert_array_equal(ics, states[problem.starts])
    with pytest.raises(ValueError):
        unpack(problem, np.zeros(5))


def test_residual_vanishes_at_truth(problem, data):
    _, states = data
    r = shooting_residual(problem, true_z(problem, states))
    assert np.max(np.abs(r)) < 1e-9
    np.testing.assert_allclose(continuity_gaps(problem, true_z(problem, states)), 0.0, atol=1e-10)


def test_beta_shift_increases_residual(problem, data):
    _, states = data
    z = true_z(problem, states)
    r0 = np.linalg.norm(shooting_residual(problem, z))
    z2 = pack(scaled(TRUE, [1, (TRUE.beta + 1) / TRUE.beta, 1, 1, 1]), states[problem.starts])
    assert np.linalg.norm(shooting_residual(problem, z2)) > r0 + 1e-3


def test_truth_beats_random_perturbations(problem, data, rng):
    _, states = data
    z = true_z(problem, states)
    r0 = np.linalg.norm(shooting_residual(problem, z))
    for _ in range(100):
        f = 1 + rng.uniform(-0.1, 0.1, 5)
        zp = pack(scaled(TRUE, f), states[problem.starts])
        assert np.linalg.norm(shooting_residual(problem, zp)) > r0


def test_blow_up_penalized(problem, data):
    _, states = data
    z = pack(scaled(TRUE, [1, 1, 1, 1e-6, 1]), states[problem.starts])
    r, bad = shooting_residual(problem, z, return_flag=True)
    assert bad and np.all(r == PENALTY)
    r, bad = shooting_residual(problem, np.full(problem.n_unknowns, np.nan), return_flag=True)
    assert bad and np.all(np.isfinite(r))
    z_big = true_z(problem, states)
    z_big[-1] = 800.0  # exp overflows
    r, bad = shooting_residual(problem, z_big, return_flag=True)
    assert bad and np.all(r == PENALTY)


def test_period_estimate():
    t = np.arange(0, 7200.0, 10.0)
    q = np.sin(2 * np.pi * t / 1320.0)  # |q| has minima every 660 s
    assert estimate_period(q, 10.0) == pytest.approx(660.0, abs=10.0)
    noisy = q + np.random.default_rng(0).normal(scale=0.02, size=q.size)
    assert estimate_period(noisy, 10.0) == pytest.approx(660.0, abs=20.0)
    with pytest.raises(ValueError):
        estimate_period(np.ones(10), 10.0)


def test_derivative_states_close_to_truth(data):
    truth, states = data
    est = derivative_states(truth.q, 10.0, TRUE)
    inner = slice(10, -10)
    big = np.abs(states[inner, 0]) > 1
    assert np.median(np.abs(est[inner, 1] - states[inner, 1])[big]) < 0.05
    assert np.median(np.abs(est[inner, 2] - states[inner, 2])[big]) < 0.5


def test_noiseless_recovery_from_one_corner(problem):
    guess = scaled(TRUE, [1.2, 0.8, 1.2, 0.8, 1.2])
    res = calibrate_staged(problem, guess)
    assert isinstance(res, CalibrationResult)
    for n in PARAM_NAMES:
        assert getattr(res.params, n) == pytest.approx(getattr(TRUE, n), rel=0.01), n
    assert res.converged and not res.blew_up


def test_deterministic(data):
    truth, _ = data
    prob = ShootingProblem.from_series(truth.times[:600], truth.q[:600], n_windows=2)
    guess = scaled(TRUE, [1.05, 0.95, 1.05, 1.05, 0.95])
    a = calibrate(prob, guess, max_iter=20)
    b = calibrate(prob, guess, max_iter=20)
    assert a.params == b.params
    np.testing.assert_array_equal(a.initial_states, b.initial_states)


def test_stronger_continuity_weight_shrinks_gaps(data):
    truth, _ = data
    y = observe(truth, 6e-4, seed=5)
    norms = []
    for lam in (10.0, 20.0):
        prob = ShootingProblem.from_series(truth.times, y, n_windows=3, lambda_cont=lam)
        res = calibrate_staged(prob, TRUE, max_iter=60)
        norms.append(np.linalg.norm(continuity_gaps(prob, pack(res.params, res.initial_states))))
    assert norms[1] <= norms[0] * (1 + 1e-6)


def test_bad_guess_rejected(problem):
    with pytest.raises(ValueError):
        calibrate(problem, EmParams(alpha=1.0, k_coeff=0.0))
