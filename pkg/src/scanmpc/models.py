"""Benchmark systems: discrete dynamics, Jacobians, constraints, costs.

Each model provides the pieces the SQP layer linearizes: a one-step map
`step`, its Jacobians, stage constraints g(x, u) <= 0 with Jacobians, state
terminal constraints, a disturbance scaling matrix E(x) mapping a unit-ball
disturbance into state space, and diagonal tracking-cost weights with a
reference. Models are immutable parameter records; every method is pure.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81


def obstacle_values(px: float, py: float, obstacles) -> np.ndarray:
    """One row per obstacle: r^2 - (px-cx)^2 - (py-cy)^2 (<= 0 means clear)."""
    out = np.empty(len(obstacles))
    for i, (cx, cy, r) in enumerate(obstacles):
        out[i] = r * r - (px - cx) ** 2 - (py - cy) ** 2
    return out


def obstacle_position_jacobian(px: float, py: float, obstacles) -> np.ndarray:
    """Rows of d/d(px,py) of the obstacle values."""
    J = np.empty((len(obstacles), 2))
    for i, (cx, cy, _r) in enumerate(obstacles):
        J[i, 0] = -2.0 * (px - cx)
        J[i, 1] = -2.0 * (py - cy)
    return J


class Model(abc.ABC):
    """Interface consumed by the SQP/SLS layers."""

    nx: int
    nu: int
    dt: float

    @abc.abstractmethod
    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def jacobians(self, x: np.ndarray, u: np.ndarray): ...

    @abc.abstractmethod
    def stage_constraints(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def stage_constraint_jacobians(self, x: np.ndarray, u: np.ndarray): ...

    def terminal_constraints(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def terminal_constraint_jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((0, self.nx))

    @abc.abstractmethod
    def disturbance(self, x: np.ndarray) -> np.ndarray: ...

    def clip_input(self, u: np.ndarray) -> np.ndarray:
        """Actuator saturation applied by the plant; identity by default."""
        return u

    @property
    def nc(self) -> int:
        z = np.zeros
        return self.stage_constraints(z(self.nx), z(self.nu)).shape[0]

    @property
    def nf(self) -> int:
        return self.terminal_constraints(np.zeros(self.nx)).shape[0]

    # quadratic tracking cost
    @abc.abstractmethod
    def cost_weights(self): ...

    @abc.abstractmethod
    def reference(self, N: int): ...

    def tracking_cost(self, x: np.ndarray, u: np.ndarray) -> float:
        Q, R, QN = self.cost_weights()
        N = u.shape[0]
        xref, uref = self.reference(N)
        ex, eu = x - xref, u - uref
        J = 0.5 * float(np.einsum("ki,ij,kj->", ex[:-1], Q, ex[:-1]))
        J += 0.5 * float(np.einsum("ki,ij,kj->", eu, R, eu))
        J += 0.5 * float(ex[-1] @ QN @ ex[-1])
        return J


def rk4_step(f_cont, x, u, dt):
    k1 = f_cont(x, u)
    k2 = f_cont(x + 0.5 * dt * k1, u)
    k3 = f_cont(x + 0.5 * dt * k2, u)
    k4 = f_cont(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_jacobians(f_cont, jac_cont, x, u, dt):
    """Exact Jacobians of the RK4 map, chained through the four stages."""
    nx, nu = x.shape[0], u.shape[0]
    I = np.eye(nx)
    k1 = f_cont(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = f_cont(x2, u)
    x3 = x + 0.5 * dt * k2
    k3 = f_cont(x3, u)
    x4 = x + dt * k3
    J1x, J1u = jac_cont(x, u)
    J2x, J2u = jac_cont(x2, u)
    J3x, J3u = jac_cont(x3, u)
    J4x, J4u = jac_cont(x4, u)
    D1x, D1u = J1x, J1u
    D2x = J2x @ (I + 0.5 * dt * D1x)
    D2u = J2u + J2x @ (0.5 * dt * D1u)
    D3x = J3x @ (I + 0.5 * dt * D2x)
    D3u = J3u + J3x @ (0.5 * dt * D2u)
    D4x = J4x @ (I + dt * D3x)
    D4u = J4u + J4x @ (dt * D3u)
    A = I + (dt / 6.0) * (D1x + 2 * D2x + 2 * D3x + D4x)
    B = (dt / 6.0) * (D1u + 2 * D2u + 2 * D3u + D4u)
    return A, B


@dataclass(frozen=True)
class DubinsCar(Model):
    """Planar Dubins car (px, py, theta) at constant speed, steered by omega.

    Forward-Euler discrete dynamics; box bound on omega plus one concave
    quadratic row per obstacle; constant disturbance scaling 2.5e-2 I.
    """

    v: float = 1.0
    dt: float = 0.1
    omega_max: float = 2.0
    obstacles: tuple = ()
    goal: tuple = (4.0, 0.0, 0.0)
    q_diag: tuple = (1.0, 1.0, 0.1)
    r_diag: tuple = (0.1,)
    qn_diag: tuple = (10.0, 10.0, 1.0)
    e_scale: float = 2.5e-2

    nx: int = field(default=3, init=False)
    nu: int = field(default=1, init=False)

    def step(self, x, u):
        px, py, th = x
        return np.array([
            px + self.v * np.cos(th) * self.dt,
            py + self.v * np.sin(th) * self.dt,
            th + u[0] * self.dt,
        ])

    def jacobians(self, x, u):
        th = x[2]
        A = np.array([
            [1.0, 0.0, -self.v * np.sin(th) * self.dt],
            [0.0, 1.0, self.v * np.cos(th) * self.dt],
            [0.0, 0.0, 1.0],
        ])
        B = np.array([[0.0], [0.0], [self.dt]])
        return A, B

    def stage_constraints(self, x, u):
        box = np.array([u[0] - self.omega_max, -u[0] - self.omega_max])
        return np.concatenate([box, obstacle_values(x[0], x[1], self.obstacles)])

    def stage_constraint_jacobians(self, x, u):
        n_obs = len(self.obstacles)
        C = np.zeros((2 + n_obs, 3))
        C[2:, :2] = obstacle_position_jacobian(x[0], x[1], self.obstacles)
        D = np.zeros((2 + n_obs, 1))
        D[0, 0] = 1.0
        D[1, 0] = -1.0
        return C, D

    def terminal_constraints(self, x):
        return obstacle_values(x[0], x[1], self.obstacles)

    def terminal_constraint_jacobian(self, x):
        CN = np.zeros((len(self.obstacles), 3))
        CN[:, :2] = obstacle_position_jacobian(x[0], x[1], self.obstacles)
        return CN

    def disturbance(self, x):
        return self.e_scale * np.eye(3)

    def clip_input(self, u):
        return np.clip(u, -self.omega_max, self.omega_max)

    def cost_weights(self):
        return np.diag(self.q_diag), np.diag(self.r_diag), np.diag(self.qn_diag)

    def reference(self, N):
        xref = np.tile(np.asarray(self.goal, float), (N + 1, 1))
        return xref, np.zeros((N, 1))


@dataclass(frozen=True)
class PlanarQuadrotor(Model):
    """Planar quadrotor (px, py, phi, vx, vy, phidot) with rotor thrusts u1, u2.

    RK4 discretization of
        vdot_x = -(u1+u2) sin(phi) / m
        vdot_y =  (u1+u2) cos(phi) / m - g
        phiddot = L (u2 - u1) / J
    with m = 2.0576, L = 0.25, J = 0.01. Velocity-channel disturbance
    E = 5e-2 diag(0, 0, 0, 1, 1, 0).
    """

    m: float = 2.0576
    L: float = 0.25
    J: float = 0.01
    dt: float = 0.02
    thrust_max: float = 40.0
    obstacles: tuple = ()
    goal: tuple = (3.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    q_diag: tuple = (1.0, 1.0, 0.5, 0.1, 0.1, 0.05)
    r_diag: tuple = (0.05, 0.05)
    qn_diag: tuple = (20.0, 20.0, 5.0, 1.0, 1.0, 0.5)
    e_scale: float = 5e-2

    nx: int = field(default=6, init=False)
    nu: int = field(default=2, init=False)

    def f_cont(self, x, u):
        _, _, phi, vx, vy, phidot = x
        thrust = u[0] + u[1]
        return np.array([
            vx,
            vy,
            phidot,
            -thrust * np.sin(phi) / self.m,
            thrust * np.cos(phi) / self.m - GRAVITY,
            self.L * (u[1] - u[0]) / self.J,
        ])

    def jac_cont(self, x, u):
        phi = x[2]
        thrust = u[0] + u[1]
        Jx = np.zeros((6, 6))
        Jx[0, 3] = Jx[1, 4] = Jx[2, 5] = 1.0
        Jx[3, 2] = -thrust * np.cos(phi) / self.m
        Jx[4, 2] = -thrust * np.sin(phi) / self.m
        Ju = np.zeros((6, 2))
        Ju[3, :] = -np.sin(phi) / self.m
        Ju[4, :] = np.cos(phi) / self.m
        Ju[5, 0] = -self.L / self.J
        Ju[5, 1] = self.L / self.J
        return Jx, Ju

    def step(self, x, u):
        return rk4_step(self.f_cont, np.asarray(x, float), np.asarray(u, float), self.dt)

    def jacobians(self, x, u):
        return rk4_jacobians(self.f_cont, self.jac_cont, np.asarray(x, float), np.asarray(u, float), self.dt)

    def hover_thrust(self) -> float:
        return self.m * GRAVITY / 2.0

    def stage_constraints(self, x, u):
        box = np.concatenate([u - self.thrust_max, -u])
        return np.concatenate([box, obstacle_values(x[0], x[1], self.obstacles)])

    def stage_constraint_jacobians(self, x, u):
        n_obs = len(self.obstacles)
        C = np.zeros((4 + n_obs, 6))
        C[4:, :2] = obstacle_position_jacobian(x[0], x[1], self.obstacles)
        D = np.zeros((4 + n_obs, 2))
        D[0, 0] = D[1, 1] = 1.0
        D[2, 0] = D[3, 1] = -1.0
        return C, D

    def terminal_constraints(self, x):
        return obstacle_values(x[0], x[1], self.obstacles)

    def terminal_constraint_jacobian(self, x):
        CN = np.zeros((len(self.obstacles), 6))
        CN[:, :2] = obstacle_position_jacobian(x[0], x[1], self.obstacles)
        return CN

    def disturbance(self, x):
        return self.e_scale * np.diag([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])

    def clip_input(self, u):
        return np.clip(u, 0.0, self.thrust_max)

    def cost_weights(self):
        return np.diag(self.q_diag), np.diag(self.r_diag), np.diag(self.qn_diag)

    def reference(self, N):
        xref = np.tile(np.asarray(self.goal, float), (N + 1, 1))
        uref = np.full((N, 2), self.hover_thrust())
        return xref, uref


@dataclass(frozen=True)
class NLinkPendulum(Model):
    """Serial n-link pendulum of uniform rods, absolute angles from hanging.

    State (theta_1..n, omega_1..n); input is the joint torque vector, mapped
    to absolute coordinates by T' (joint i acts between links i-1 and i).
    Mass matrix M_ij = kappa_ij cos(ti - tj) + delta_ij m_i l_i^2 / 12 with
    kappa_ij = sum_k m_k a_ki a_kj, a_ki the lever of joint i on rod k's
    centre of mass. Velocity-product terms collapse to
    Cor_i = sum_j kappa_ij sin(ti - tj) wj^2. Semi-implicit Euler step.
    """

    n_links: int = 2
    masses: tuple = None
    lengths: tuple = None
    dt: float = 0.01
    u_max: float = 20.0
    q_angle: float = 10.0
    q_rate: float = 1.0
    r_torque: float = 0.05
    qn_scale: float = 10.0
    e_rate: float = 0.0  # disturbance scaling on the rate channels

    def __post_init__(self):
        n = self.n_links
        if self.masses is None:
            object.__setattr__(self, "masses", tuple(1.0 for _ in range(n)))
        if self.lengths is None:
            object.__setattr__(self, "lengths", tuple(1.0 for _ in range(n)))
        m = np.asarray(self.masses, float)
        l = np.asarray(self.lengths, float)
        # a[k, i]: distance from joint i to rod k's centre of mass lever
        a = np.zeros((n, n))
        for k in range(n):
            a[k, :k] = l[:k]
            a[k, k] = 0.5 * l[k]
        kappa = (m[:, None, None] * a[:, :, None] * a[:, None, :]).sum(axis=0)
        object.__setattr__(self, "_kappa", kappa)
        object.__setattr__(self, "_rot_inertia", m * l ** 2 / 12.0)
        object.__setattr__(self, "_grav_lever", GRAVITY * (m[:, None] * a).sum(axis=0))
        Tmap = np.eye(n)
        Tmap[np.arange(n - 1), np.arange(1, n)] = -1.0
        object.__setattr__(self, "_input_map", Tmap)

    @property
    def nx(self) -> int:
        return 2 * self.n_links

    @property
    def nu(self) -> int:
        return self.n_links

    def _mass_matrix(self, th):
        dth = th[:, None] - th[None, :]
        return self._kappa * np.cos(dth) + np.diag(self._rot_inertia)

    def _bias(self, th, om):
        dth = th[:, None] - th[None, :]
        cor = (self._kappa * np.sin(dth)) @ (om ** 2)
        grav = self._grav_lever * np.sin(th)
        return cor + grav

    def accel(self, x, u):
        n = self.n_links
        th, om = x[:n], x[n:]
        M = self._mass_matrix(th)
        rhs = self._input_map @ u - self._bias(th, om)
        try:
            return np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError("pendulum mass matrix is singular") from exc

    def step(self, x, u):
        n = self.n_links
        th, om = x[:n], x[n:]
        om_new = om + self.dt * self.accel(x, u)
        th_new = th + self.dt * om_new
        return np.concatenate([th_new, om_new])

    def jacobians(self, x, u):
        n = self.n_links
        th, om = x[:n], x[n:]
        M = self._mass_matrix(th)
        Minv = np.linalg.inv(M)
        acc = Minv @ (self._input_map @ u - self._bias(th, om))
        dth = th[:, None] - th[None, :]
        sin_d, cos_d = np.sin(dth), np.cos(dth)
        # d(bias)/dth and d(M theta_dd)/dth assembled columnwise
        om2 = om ** 2
        dcor = np.diag((self._kappa * cos_d) @ om2) - self._kappa * cos_d * om2[None, :]
        dgrav = np.diag(self._grav_lever * np.cos(th))
        dM_acc = np.zeros((n, n))
        for mcol in range(n):
            dM = np.zeros((n, n))
            dM[mcol, :] = -self._kappa[mcol, :] * sin_d[mcol, :]
            dM[:, mcol] += self._kappa[:, mcol] * sin_d[:, mcol]
            dM_acc[:, mcol] = dM @ acc
        dacc_dth = Minv @ (-(dcor + dgrav) - dM_acc)
        dacc_dom = Minv @ (-2.0 * self._kappa * sin_d * om[None, :])
        dacc_du = Minv @ self._input_map
        I = np.eye(n)
        dt = self.dt
        A = np.block([
            [I + dt * dt * dacc_dth, dt * I + dt * dt * dacc_dom],
            [dt * dacc_dth, I + dt * dacc_dom],
        ])
        B = np.vstack([dt * dt * dacc_du, dt * dacc_du])
        return A, B

    def energy(self, x) -> float:
        n = self.n_links
        th, om = x[:n], x[n:]
        kinetic = 0.5 * om @ self._mass_matrix(th) @ om
        potential = -(self._grav_lever * np.cos(th)).sum()
        return float(kinetic + potential)

    def stage_constraints(self, x, u):
        return np.concatenate([u - self.u_max, -u - self.u_max])

    def stage_constraint_jacobians(self, x, u):
        n = self.n_links
        C = np.zeros((2 * n, 2 * n))
        D = np.vstack([np.eye(n), -np.eye(n)])
        return C, D

    def disturbance(self, x):
        n = self.n_links
        E = np.zeros((2 * n, 2 * n))
        E[n:, n:] = self.e_rate * np.eye(n)
        return E

    def clip_input(self, u):
        return np.clip(u, -self.u_max, self.u_max)

    def cost_weights(self):
        n = self.n_links
        Q = np.diag(np.concatenate([np.full(n, self.q_angle), np.full(n, self.q_rate)]))
        R = self.r_torque * np.eye(n)
        QN = self.qn_scale * Q
        return Q, R, QN

    def upright(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_links, np.pi), np.zeros(self.n_links)])

    def reference(self, N):
        xref = np.tile(self.upright(), (N + 1, 1))
        return xref, np.zeros((N, self.n_links))


_MODELS = {"dubins": DubinsCar, "quadrotor": PlanarQuadrotor, "pendulum": NLinkPendulum}


def make_model(model_id: str, **params) -> Model:
    try:
        cls = _MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model id {model_id!r}") from None
    if "obstacles" in params:
        params["obstacles"] = tuple(tuple(o) for o in params["obstacles"])
    for key in ("goal", "masses", "lengths", "q_diag", "r_diag", "qn_diag"):
        if key in params and params[key] is not None:
            params[key] = tuple(params[key])
    return cls(**params)
