import numpy as np
import pytest

from scanmpc import reference

from conftest import random_ltv_qp, scalar_qp


class TestRiccatiOracle:
    def test_scalar_analytic(self):
        sol = reference.riccati_lqr(scalar_qp())
        assert sol.du[0, 0] == pytest.approx(-0.5)
        assert sol.dx[1, 0] == pytest.approx(0.5)

    def test_time_invariant_horizon_reaches_are_fixed_point(self):
        # scalar A = B = Q = R = 1: P* = (1 + sqrt(5)) / 2
        N = 500
        qp = scalar_qp(
            A=np.ones((N, 1, 1)), B=np.ones((N, 1, 1)), b=np.zeros((N, 1)),
            Q=np.ones((N, 1, 1)), R=np.ones((N, 1, 1)), S=np.zeros((N, 1, 1)),
            q=np.zeros((N, 1)), r=np.zeros((N, 1)),
            C=np.zeros((N, 0, 1)), D=np.zeros((N, 0, 1)), f=np.zeros((N, 0)),
        )
        sol = reference.riccati_lqr(qp)
        assert abs(sol.P[0, 0, 0] - sol.P[1, 0, 0]) <= 1e-6
        assert sol.P[0, 0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-9)

    def test_dynamics_residual(self, rng):
        qp = random_ltv_qp(rng, 4, 2, 30)
        assert reference.riccati_lqr(qp).dynamics_residual(qp) <= 1e-10


class TestDenseQp:
    def test_unconstrained(self, rng):
        H = np.diag([2.0, 1.0, 4.0])
        g = rng.standard_normal(3)
        x, obj, _ = reference.dense_qp(H, g)
        np.testing.assert_allclose(x, -np.linalg.solve(H, g), atol=1e-12)

    def test_scalar_bound_with_dual(self):
        x, obj, (z, _) = reference.dense_qp(
            np.eye(1), np.zeros(1), A_ineq=np.array([[-1.0]]), b_ineq=np.array([-1.0]))
        assert x[0] == pytest.approx(1.0, abs=1e-8)
        assert z[0] == pytest.approx(1.0, abs=1e-7)
        assert obj == pytest.approx(0.5, abs=1e-8)

    def test_kkt_residual_small_on_random_qps(self, rng):
        for _ in range(5):
            n, mi, me = 12, 8, 3
            Hh = rng.standard_normal((n, n))
            H = Hh @ Hh.T + np.eye(n)
            g = rng.standard_normal(n)
            Ai = rng.standard_normal((mi, n))
            x_feas = rng.standard_normal(n) * 0.1
            bi = Ai @ x_feas + rng.random(mi) + 0.1   # Slater point exists
            Ae = rng.standard_normal((me, n))
            be = Ae @ x_feas
            x, obj, (z, y) = reference.dense_qp(H, g, Ai, bi, Ae, be)
            assert np.abs(H @ x + g + Ai.T @ z + Ae.T @ y).max() <= 1e-8
            assert np.abs(Ae @ x - be).max() <= 1e-8
            assert (Ai @ x - bi).max() <= 1e-8
            assert (z >= -1e-10).all()
            assert np.abs(z * (bi - Ai @ x)).max() <= 1e-7

    def test_equality_only(self):
        H = np.diag([1.0, 1.0])
        g = np.zeros(2)
        Ae = np.array([[1.0, 1.0]])
        be = np.array([2.0])
        x, _, _ = reference.dense_qp(H, g, A_eq=Ae, b_eq=be)
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-12)


class TestFastSlsSequential:
    def test_zero_disturbance_zero_response(self, rng):
        from scanmpc.sls import SlsWeights, assemble_costs
        N, nx, nu = 5, 3, 2
        A = rng.standard_normal((N, nx, nx)) * 0.4
        B = rng.standard_normal((N, nx, nu))
        costs = assemble_costs(None, np.zeros((N, 0, nx)), np.zeros((N, 0, nu)),
                               np.zeros((0, nx)), SlsWeights.identity(nx, nu))
        resp = reference.fastsls_sequential(A, B, np.zeros((N, nx, nx)), costs)
        for j in range(N):
            assert np.abs(resp.Phi_x[j]).max() == 0.0

    def test_hand_computed_two_stage_scalar(self):
        from scanmpc.sls import SlsCosts
        costs = SlsCosts(
            Qx=[np.ones((1, 1, 1)), np.zeros((0, 1, 1))],
            Qu=[np.ones((1, 1, 1)), np.zeros((0, 1, 1))],
            Qux=[np.zeros((1, 1, 1)), np.zeros((0, 1, 1))],
            Qx_term=np.ones((2, 1, 1)),
        )
        ones = np.ones((2, 1, 1))
        resp = reference.fastsls_sequential(ones, ones, ones, costs)
        assert resp.gains[0][0, 0, 0] == pytest.approx(-0.5)
        assert resp.phi_x(2, 0)[0, 0] == pytest.approx(0.5)
        assert resp.phi_u(1, 0)[0, 0] == pytest.approx(-0.5)


def test_finite_difference_oracle_on_polynomial():
    fun = lambda x, u: np.array([x[0] ** 2 + 3 * u[0], x[0] * x[1]])  # noqa: E731
    Jx, Ju = reference.finite_difference_jacobians(fun, np.array([1.0, 2.0]), np.array([0.5]))
    np.testing.assert_allclose(Jx, [[2.0, 0.0], [2.0, 1.0]], atol=1e-8)
    np.testing.assert_allclose(Ju, [[3.0], [0.0]], atol=1e-8)
