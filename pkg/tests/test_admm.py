import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanmpc import admm, lqr, reference

from conftest import dense_form, qp_objective, random_ltv_qp, scalar_qp


def test_augment_zero_rho_is_identity(rng):
    qp = random_ltv_qp(rng, 3, 2, 4, nc=2, nf=1)
    aug = admm.augment_quadratic(qp, 0.0)
    for fld in ("Q", "R", "S", "QN"):
        assert np.allclose(getattr(aug, fld), getattr(qp, fld))


def test_augment_identity_rows():
    # C = I, D = 0, rho = 2, Q = I  ->  Q_hat = 3 I
    qp = random_ltv_qp(np.random.default_rng(0), 2, 1, 3, nc=2)
    qp.C = np.broadcast_to(np.eye(2), (3, 2, 2)).copy()
    qp.D = np.zeros((3, 2, 1))
    qp.Q = np.broadcast_to(np.eye(2), (3, 2, 2)).copy()
    aug = admm.augment_quadratic(qp, 2.0)
    assert np.allclose(aug.Q, 3.0 * np.eye(2))


def test_augment_linear_matches_elementwise(rng):
    qp = random_ltv_qp(rng, 3, 2, 5, nc=2, nf=1)
    m = 5 * 2 + 1
    y = rng.standard_normal(m)
    z = rng.standard_normal(m)
    rho = 1.7
    lin = admm.augment_linear(qp, rho, y, z)
    w = (y - z)[:10].reshape(5, 2)
    for k in range(5):
        assert np.allclose(lin.q[k] - qp.q[k], rho * qp.C[k].T @ w[k], atol=1e-14)
        assert np.allclose(lin.r[k] - qp.r[k], rho * qp.D[k].T @ w[k], atol=1e-14)
    assert np.allclose(lin.qN - qp.qN, rho * qp.CN.T @ (y - z)[10:], atol=1e-14)


class TestProjectAndAscend:
    def test_inactive_fixed_point_zeroes_duals(self):
        state = admm.AdmmState(z=np.zeros(3), lam=np.array([0.2, 0.4, 0.0]),
                               y=np.array([0.2, 0.4, 0.0]), rho=1.0)
        gvals = np.array([-1.0, -2.0, -0.5])
        f = np.ones(3)
        state = admm.project_and_ascend(state, gvals, f)
        assert np.allclose(state.z, gvals + np.array([0.2, 0.4, 0.0]))
        assert np.allclose(state.lam, 0.0)

    def test_clamped_scalar(self):
        state = admm.AdmmState(z=np.zeros(1), lam=np.zeros(1), y=np.zeros(1), rho=1.0)
        state = admm.project_and_ascend(state, np.array([2.0]), np.array([1.0]))
        assert state.z[0] == 1.0 and state.lam[0] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 1000))
    def test_matches_scalar_loop(self, m, seed):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal(m)
        f = rng.standard_normal(m)
        lam = rng.standard_normal(m)
        rho = float(rng.uniform(0.1, 5.0))
        state = admm.AdmmState(z=rng.standard_normal(m), lam=lam.copy(), y=lam / rho, rho=rho)
        out = admm.project_and_ascend(state, g, f)
        for i in range(m):
            zi = min(g[i] + lam[i] / rho, f[i])
            assert out.z[i] == zi
            assert out.lam[i] == lam[i] + rho * (g[i] - zi)
            assert out.y[i] == out.lam[i] / rho


class TestUpdateRho:
    def test_balanced_residuals_keep_rho(self):
        st_ = admm.AdmmState.fresh(2, 1.0)
        out = admm.update_rho(st_, 0.5, 0.5, admm.AdmmSettings())
        assert out.rho == 1.0 and out.generation == 0

    def test_hundredfold_ratio_commits(self):
        st_ = admm.AdmmState.fresh(2, 1.0)
        st_.lam = np.array([2.0, -1.0])
        out = admm.update_rho(st_, 100.0, 1.0, admm.AdmmSettings())
        assert out.rho == pytest.approx(10.0)
        assert out.generation == 1
        assert np.allclose(out.y, st_.lam / 10.0)

    def test_clamped_to_rho_max(self):
        settings_ = admm.AdmmSettings(rho_max=1e6)
        st_ = admm.AdmmState.fresh(1, 1.0)
        out = admm.update_rho(st_, 1e20, 1.0, settings_)
        assert out.rho == settings_.rho_max

    def test_within_gate_is_retained(self):
        st_ = admm.AdmmState.fresh(1, 1.0)
        out = admm.update_rho(st_, 4.0, 1.0, admm.AdmmSettings())  # ratio 2 < 5
        assert out.rho == 1.0 and out.generation == 0


class TestSolveQp:
    def test_no_inequalities_single_iteration_bitwise(self):
        qp = scalar_qp()
        res = admm.solve_qp(qp, admm.AdmmSettings(tol_primal=1e-9, tol_dual=1e-9))
        plain = lqr.solve(qp)
        assert res.stats.iterations == 1
        assert (res.du == plain.du).all() and (res.dx == plain.dx).all()

    def test_scalar_active_constraint_kkt(self):
        # min 1/2 u^2 + 1/2 x1^2 s.t. x1 = x0 + u, x0 = 1, -u <= 0
        qp = scalar_qp(Q=np.zeros((1, 1, 1)), C=np.zeros((1, 1, 1)),
                       D=np.array([[[-1.0]]]), f=np.zeros((1, 1)))
        res = admm.solve_qp(qp, admm.AdmmSettings(tol_primal=1e-8, tol_dual=1e-8))
        assert res.stats.converged
        assert abs(res.du[0, 0]) <= 1e-6
        assert abs(res.dx[1, 0] - 1.0) <= 1e-6
        lam, _ = res.stage_duals(qp)
        assert abs(lam[0, 0] - 1.0) <= 1e-5

    def test_random_qp_matches_dense_interior_point(self, rng):
        settings_ = admm.AdmmSettings(tol_primal=1e-6, tol_dual=1e-6)
        for _ in range(3):
            qp = random_ltv_qp(rng, 4, 2, 12, nc=3, nf=1)
            res = admm.solve_qp(qp, settings_)
            assert res.stats.converged
            H, g, Ai, bi, Ae, be = dense_form(qp)
            _, obj_star, _ = reference.dense_qp(H, g, Ai, bi, Ae, be)
            obj = qp_objective(qp, res.dx, res.du)
            assert abs(obj - obj_star) <= 1e-4 * max(1.0, abs(obj_star))
            viol = (admm.constraint_values(qp, res.dx, res.du) - admm.stacked_offsets(qp)).max()
            assert viol <= 1e-6

    def test_iterates_keep_z_feasible_and_slackness_at_convergence(self, rng):
        qp = random_ltv_qp(rng, 3, 2, 10, nc=2, nf=1)
        tol = 1e-7
        res = admm.solve_qp(qp, admm.AdmmSettings(tol_primal=tol, tol_dual=tol))
        assert res.stats.converged
        f = admm.stacked_offsets(qp)
        assert (res.state.z <= f + 1e-12).all()
        slack = res.state.lam * (f - res.state.z)
        assert np.abs(slack).max() <= 10 * tol

    def test_warm_started_resolve_converges_in_two_iterations(self, rng):
        qp = random_ltv_qp(rng, 3, 2, 10, nc=2)
        settings_ = admm.AdmmSettings(tol_primal=1e-7, tol_dual=1e-7)
        first = admm.solve_qp(qp, settings_)
        assert first.stats.converged
        again = admm.solve_qp(qp, settings_, warm_start=first.state)
        assert again.stats.converged and again.stats.iterations <= 2

    def test_max_iter_flags_not_converged(self, rng):
        qp = random_ltv_qp(rng, 3, 2, 10, nc=3)
        res = admm.solve_qp(qp, admm.AdmmSettings(tol_primal=1e-12, tol_dual=1e-12, max_iter=5))
        assert not res.stats.converged
        assert res.stats.iterations == 5


def test_sigma_lower_bound_enforced():
    with pytest.raises(ValueError, match="sigma"):
        admm.AdmmSettings(sigma=1)
