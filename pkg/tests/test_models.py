import numpy as np
import pytest

from scanmpc import models, reference


@pytest.fixture(params=["dubins", "quadrotor", "pendulum2", "pendulum4"])
def model(request):
    if request.param == "dubins":
        return models.make_model("dubins", obstacles=[(2.0, 0.0, 0.5)])
    if request.param == "quadrotor":
        return models.make_model("quadrotor", obstacles=[(1.5, 0.0, 0.4)])
    n = int(request.param[-1])
    return models.make_model("pendulum", n_links=n)


def test_jacobians_match_finite_differences(model, rng):
    for _ in range(4):
        x = rng.standard_normal(model.nx) * 0.4
        u = rng.standard_normal(model.nu)
        A, B = model.jacobians(x, u)
        Jx, Ju = reference.finite_difference_jacobians(model.step, x, u, eps=1e-5)
        assert np.abs(A - Jx).max() <= 1e-5
        assert np.abs(B - Ju).max() <= 1e-5


def test_disturbance_is_square_state_map(model):
    E = model.disturbance(np.zeros(model.nx))
    assert E.shape == (model.nx, model.nx)


class TestDubins:
    def test_straight_step(self):
        dub = models.make_model("dubins", v=1.0, dt=0.1)
        np.testing.assert_allclose(dub.step(np.zeros(3), np.zeros(1)), [0.1, 0.0, 0.0])

    def test_heading_symmetry(self):
        dub = models.make_model("dubins", v=1.0, dt=0.1)
        out = dub.step(np.array([0.0, 0.0, np.pi / 2]), np.zeros(1))
        assert abs(out[0]) <= 1e-15
        assert out[1] == pytest.approx(0.1)

    def test_jacobian_row_at_zero_heading(self):
        dub = models.make_model("dubins", v=1.0, dt=0.1)
        A, _ = dub.jacobians(np.zeros(3), np.zeros(1))
        np.testing.assert_allclose(A[0], [1.0, 0.0, 0.0])

    def test_disturbance_scale(self):
        dub = models.make_model("dubins")
        assert (dub.disturbance(np.zeros(3)) == 2.5e-2 * np.eye(3)).all()


class TestObstacles:
    def test_center_violated_boundary_zero(self):
        obstacles = [(1.0, 2.0, 0.5)]
        assert models.obstacle_values(1.0, 2.0, obstacles)[0] == pytest.approx(0.25)
        assert models.obstacle_values(1.5, 2.0, obstacles)[0] == pytest.approx(0.0)

    def test_thirty_obstacle_field_matches_loop(self, rng):
        obstacles = [tuple(row) for row in rng.random((30, 3)) * [4, 4, 0.5]]
        px, py = 1.3, 0.7
        got = models.obstacle_values(px, py, obstacles)
        for i, (cx, cy, r) in enumerate(obstacles):
            assert got[i] == r * r - (px - cx) ** 2 - (py - cy) ** 2


class TestQuadrotor:
    def test_hover_force_balance(self):
        quad = models.make_model("quadrotor")
        xdot = quad.f_cont(np.zeros(6), np.full(2, quad.hover_thrust()))
        assert abs(xdot[4]) <= 1e-12

    def test_differential_thrust_pitch_acceleration(self):
        quad = models.make_model("quadrotor")
        u = np.array([quad.hover_thrust() - 1.0, quad.hover_thrust() + 1.0])
        xdot = quad.f_cont(np.zeros(6), u)
        assert xdot[5] == pytest.approx(quad.L * 2.0 / quad.J)

    def test_rk4_against_fine_euler(self):
        # balanced thrusts keep the Euler oracle's own error below the bound
        quad = models.make_model("quadrotor", dt=0.02)
        x = np.array([0.1, -0.2, 0.05, 0.3, -0.1, 0.2])
        u = np.full(2, quad.hover_thrust()) + 0.15
        fine = reference.fine_euler(quad.f_cont, x, u, quad.dt, substeps=1000)
        assert np.abs(quad.step(x, u) - fine).max() <= 1e-6

    def test_disturbance_structure(self):
        quad = models.make_model("quadrotor")
        E = quad.disturbance(np.zeros(6))
        assert (np.diag(E) == 5e-2 * np.array([0, 0, 0, 1, 1, 0])).all()


class TestPendulum:
    def test_upright_equilibrium(self):
        for n in (1, 2, 4):
            pen = models.make_model("pendulum", n_links=n)
            assert np.abs(pen.accel(pen.upright(), np.zeros(n))).max() <= 1e-12

    def test_single_link_reduces_to_rod_pendulum(self):
        pen = models.make_model("pendulum", n_links=1)
        th, u = 0.7, 1.3
        acc = pen.accel(np.array([th, 0.0]), np.array([u]))
        inertia = 1.0 / 3.0  # m l^2 / 3 about the pivot
        expect = (u - 1.0 * models.GRAVITY * 0.5 * np.sin(th)) / inertia
        assert acc[0] == pytest.approx(expect)

    def test_energy_drift_small_unforced(self):
        pen = models.make_model("pendulum", n_links=2, dt=1e-3)
        x = np.array([0.3, -0.2, 0.0, 0.0])
        e0 = pen.energy(x)
        for _ in range(1000):
            x = pen.step(x, np.zeros(2))
        assert abs(pen.energy(x) - e0) <= 0.01 * abs(e0)

    def test_torque_box_rows(self):
        pen = models.make_model("pendulum", n_links=2, u_max=5.0)
        g = pen.stage_constraints(np.zeros(4), np.array([6.0, -7.0]))
        assert g[0] == pytest.approx(1.0)    # u_0 - u_max
        assert g[3] == pytest.approx(2.0)    # -u_1 - u_max


def test_unknown_model_rejected():
    with pytest.raises(ValueError, match="unknown model id"):
        models.make_model("hovercraft")
