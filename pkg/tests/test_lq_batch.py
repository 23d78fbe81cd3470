import numpy as np
import pytest

from refcond.lq_batch import (
    LtiSystem,
    NumericalError,
    TrackingWeights,
    build_batch_operators,
    open_loop_sequence,
    rollout,
    tracking_cost,
    tracking_gains,
    zoh_double_integrator,
)


def scalar_setup(q=1.0, r=1.0, N=1):
    sys = LtiSystem(A=[[1.0]], B=[[1.0]], C=[[1.0]], Ts=1.0)
    w = TrackingWeights(Q=[[q]], R=[[r]])
    return sys, w, build_batch_operators(sys, w, N)


def lstsq_oracle(ops, x0, r):
    """Independent minimizer of the batch cost via a stacked least-squares solve."""
    Qs = np.linalg.cholesky(ops.Qbold + 1e-300 * np.eye(ops.Qbold.shape[0])).T \
        if np.all(np.linalg.eigvalsh(ops.Qbold) > 0) else _psd_sqrt(ops.Qbold)
    Rs = _psd_sqrt(ops.Rbold)
    CA = ops.Cbold @ ops.Abold
    CB = ops.Cbold @ ops.Bbold
    A_ls = np.vstack([Qs @ CB, Rs])
    b_ls = np.concatenate([Qs @ (r - CA @ x0), np.zeros(Rs.shape[0])])
    u, *_ = np.linalg.lstsq(A_ls, b_ls, rcond=None)
    return u


def _psd_sqrt(M):
    vals, vecs = np.linalg.eigh(M)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


# ---------------------------------------------------------------------------
# operators


def test_scalar_hessian_is_two():
    _, _, ops = scalar_setup()
    assert ops.H.shape == (1, 1)
    assert ops.H[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_double_integrator_impulse_matrix_n2(double_integrator, unit_weights):
    ops = build_batch_operators(double_integrator, unit_weights, 2)
    expected = np.array(
        [[0.005, 0.0], [0.1, 0.0], [0.015, 0.005], [0.1, 0.1]]
    )
    np.testing.assert_allclose(ops.Bbold, expected, atol=1e-15)


def test_hessian_spectrum_shifted_by_r(di_ops_n50):
    # with R = I the Hessian spectrum sits at or above 1
    assert np.allclose(di_ops_n50.H, di_ops_n50.H.T)
    assert np.min(np.linalg.eigvalsh(di_ops_n50.H)) >= 1.0 - 1e-9


def test_stacked_powers(mimo_system, mimo_weights):
    ops = build_batch_operators(mimo_system, mimo_weights, 4)
    n = mimo_system.n_x
    np.testing.assert_allclose(
        ops.Abold[2 * n : 3 * n], np.linalg.matrix_power(mimo_system.A, 3)
    )


def test_dimension_mismatch_rejected(double_integrator):
    bad_q = TrackingWeights(Q=np.eye(2), R=[[1.0]])
    with pytest.raises(ValueError):
        build_batch_operators(double_integrator, bad_q, 5)
    with pytest.raises(ValueError):
        build_batch_operators(double_integrator, TrackingWeights([[1.0]], [[1.0]]), 0)


def test_weight_validation():
    with pytest.raises(ValueError):
        TrackingWeights(Q=[[1.0]], R=[[0.0]])
    with pytest.raises(ValueError):
        TrackingWeights(Q=[[-1.0]], R=[[1.0]])
    with pytest.raises(ValueError):
        TrackingWeights(Q=[[0.0, 1.0], [0.0, 0.0]], R=np.eye(2))


def test_system_validation():
    with pytest.raises(ValueError):
        LtiSystem(A=[[1.0, 0.0]], B=[[1.0]], C=[[1.0]])
    with pytest.raises(ValueError):
        LtiSystem(A=[[1.0]], B=[[1.0]], C=[[1.0]], Ts=0.0)


# ---------------------------------------------------------------------------
# gains


def test_scalar_gains():
    # minimize (x0 + u - r)^2 + u^2  ->  u = (r - x0) / 2
    _, _, ops = scalar_setup()
    g = tracking_gains(ops)
    assert g.Fx[0, 0] == pytest.approx(-0.5, abs=1e-14)
    assert g.Fr[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_zero_q_gives_zero_gains(double_integrator):
    w = TrackingWeights(Q=[[0.0]], R=[[1.0]])
    g = tracking_gains(build_batch_operators(double_integrator, w, 8))
    assert np.max(np.abs(g.Fx)) == 0.0
    assert np.max(np.abs(g.Fr)) == 0.0


def test_fr_first_row_profile(di_gains_n50):
    """First-control weights on future references peak early and decay.

    Near-term samples carry nonnegative weight with a peak around step 10;
    distant samples only get small (possibly slightly negative) weight.
    """
    row = di_gains_n50.Fr[0]
    assert np.min(row[:15]) >= -1e-12
    peak = int(np.argmax(row)) + 1  # 1-based horizon step
    assert 5 <= peak <= 15
    assert np.max(np.abs(row[35:])) < 0.01


def test_gradient_vanishes_at_optimum(di_ops_n50, di_gains_n50):
    rng = np.random.default_rng(0)
    E = di_ops_n50.cost_gradient_map
    CA = di_ops_n50.free_output_response
    for _ in range(100):
        x0 = rng.standard_normal(2)
        r = rng.standard_normal(50)
        u = open_loop_sequence(di_gains_n50, x0, r)
        grad = 2.0 * di_ops_n50.H @ u + 2.0 * E @ (CA @ x0 - r)
        assert np.linalg.norm(grad) <= 1e-8 * (1.0 + np.linalg.norm(u))


def test_perturbation_optimality(di_ops_n50, di_gains_n50):
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(2)
    r = rng.standard_normal(50)
    u = open_loop_sequence(di_gains_n50, x0, r)
    j_star = tracking_cost(di_ops_n50, x0, u, r)
    for _ in range(100):
        delta = rng.standard_normal(50) * 10.0 ** rng.uniform(-6, 1)
        assert tracking_cost(di_ops_n50, x0, u + delta, r) >= j_star - 1e-12


# ---------------------------------------------------------------------------
# open-loop sequence and rollout


def test_open_loop_zero_through_origin(di_gains_n50):
    u = open_loop_sequence(di_gains_n50, np.zeros(2), np.zeros(50))
    assert np.max(np.abs(u)) == 0.0


def test_open_loop_scalar_cancellation():
    _, _, ops = scalar_setup()
    g = tracking_gains(ops)
    u = open_loop_sequence(g, [1.0], [1.0])
    assert u[0] == pytest.approx(0.0, abs=1e-15)


def test_open_loop_matches_lstsq_oracle(double_integrator, unit_weights):
    ops = build_batch_operators(double_integrator, unit_weights, 10)
    g = tracking_gains(ops)
    rng = np.random.default_rng(2)
    for _ in range(20):
        x0 = rng.standard_normal(2)
        r = rng.standard_normal(10)
        np.testing.assert_allclose(
            open_loop_sequence(g, x0, r), lstsq_oracle(ops, x0, r), atol=1e-8
        )


def test_open_loop_matches_lstsq_oracle_mimo(mimo_system, mimo_weights):
    ops = build_batch_operators(mimo_system, mimo_weights, 6)
    g = tracking_gains(ops)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(3)
    r = rng.standard_normal(12)
    np.testing.assert_allclose(
        open_loop_sequence(g, x0, r), lstsq_oracle(ops, x0, r), atol=1e-8
    )


def test_rollout_identity_hold():
    sys = LtiSystem(A=np.eye(2), B=np.eye(2), C=np.eye(2), Ts=1.0)
    x0 = np.array([1.0, -2.0])
    states = rollout(sys, x0, np.zeros(10)).reshape(5, 2)
    for row in states:
        np.testing.assert_array_equal(row, x0)


def test_rollout_quadratic_position_growth(double_integrator):
    states = rollout(double_integrator, np.zeros(2), np.ones(20)).reshape(20, 2)
    for k in range(1, 21):
        assert states[k - 1, 0] == pytest.approx(0.005 * k * k, rel=1e-12)


def test_rollout_matches_batch_operators(double_integrator, unit_weights):
    ops = build_batch_operators(double_integrator, unit_weights, 50)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal(2)
    u = rng.standard_normal(50)
    np.testing.assert_allclose(
        rollout(double_integrator, x0, u),
        ops.Abold @ x0 + ops.Bbold @ u,
        atol=1e-12,
    )
