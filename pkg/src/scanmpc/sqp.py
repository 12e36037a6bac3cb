"""Outer nonlinear loop: linearize, solve the LTV-QP by ADMM, step.

Gauss-Newton only: for the quadratic tracking costs the Lagrangian curvature
is the cost Hessian, which keeps every stage block PSD by construction. The
convergence residual is the max of the proposed step norm (stationarity
surrogate), the nominal dynamics defect, and the tightened constraint
violation, all in the infinity norm.

Batch mode backtracks on an l1 merit function; RTI mode takes one full step
per control period and shifts the horizon for the next warm start.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import admm, lqr
from .scan import default_executor


class DivergenceError(RuntimeError):
    pass


@dataclass
class Trajectory:
    x: np.ndarray   # (N+1, nx)
    u: np.ndarray   # (N, nu)
    dt: float

    @property
    def N(self) -> int:
        return self.u.shape[0]

    def applied(self, dx: np.ndarray, du: np.ndarray, alpha: float) -> "Trajectory":
        return Trajectory(x=self.x + alpha * dx, u=self.u + alpha * du, dt=self.dt)

    def shifted(self) -> "Trajectory":
        x = np.vstack([self.x[1:], self.x[-1:]])
        u = np.vstack([self.u[1:], self.u[-1:]]) if self.N > 1 else self.u.copy()
        return Trajectory(x=x, u=u, dt=self.dt)


@dataclass
class SqpSettings:
    max_sqp_iters: int = 50
    kkt_tol: float = 1e-6
    line_search: bool = True
    alpha_min: float = 1e-3
    admm: admm.AdmmSettings = field(default_factory=admm.AdmmSettings)

    def __post_init__(self):
        if self.kkt_tol <= 0:
            raise ValueError("kkt_tol must be positive")


@dataclass
class SqpStats:
    iterations: int = 0
    converged: bool = False
    residual: float = np.inf
    admm_iterations: int = 0
    cost: float = np.nan
    scan_layers: int = 0
    admm_converged: bool = True


@dataclass
class NmpcResult:
    trajectory: Trajectory
    lam_stage: np.ndarray   # (N, nc)
    lam_terminal: np.ndarray  # (nf,)
    stats: SqpStats
    qp: lqr.LtvQpData | None = None


@dataclass
class RtiResult:
    u0: np.ndarray
    warm_start: Trajectory   # shifted by one stage, last stage duplicated
    plan: Trajectory         # the updated (unshifted) horizon plan
    lam_stage: np.ndarray
    lam_terminal: np.ndarray
    stats: SqpStats


def initial_guess(model, x0: np.ndarray, N: int, mode: str = "hold") -> Trajectory:
    """A dimensionally-valid starting trajectory: held state or zero-input rollout."""
    x0 = np.asarray(x0, float)
    u = np.zeros((N, model.nu))
    if mode == "hold":
        x = np.tile(x0, (N + 1, 1))
    elif mode == "rollout":
        x = np.zeros((N + 1, model.nx))
        x[0] = x0
        for k in range(N):
            x[k + 1] = model.step(x[k], u[k])
    else:
        raise ValueError(f"unknown initial guess mode {mode!r}")
    return Trajectory(x=x, u=u, dt=model.dt)


def linearize(model, traj: Trajectory, tightenings=None, x_bar0: np.ndarray | None = None) -> lqr.LtvQpData:
    """Build the stagewise QP data around `traj`.

    b_k is the dynamics defect f(x_k, u_k) - x_{k+1}; constraint offsets are
    f_k = -g(x_k, u_k) - h_k when tube tightenings h are supplied. Cost blocks
    are the Gauss-Newton terms of the tracking cost.
    """
    N, nx, nu = traj.N, model.nx, model.nu
    nc, nf = model.nc, model.nf
    Qw, Rw, QNw = model.cost_weights()
    xref, uref = model.reference(N)
    h_stage = tightenings.h if tightenings is not None else np.zeros((N, nc))
    h_term = tightenings.hf if tightenings is not None else np.zeros(nf)

    A = np.zeros((N, nx, nx)); B = np.zeros((N, nx, nu)); b = np.zeros((N, nx))
    C = np.zeros((N, nc, nx)); D = np.zeros((N, nc, nu)); f = np.zeros((N, nc))
    q = np.zeros((N, nx)); r = np.zeros((N, nu))
    for k in range(N):
        xk, uk = traj.x[k], traj.u[k]
        fk = model.step(xk, uk)
        if not np.all(np.isfinite(fk)):
            raise ArithmeticError(f"non-finite dynamics at stage {k}")
        A[k], B[k] = model.jacobians(xk, uk)
        b[k] = fk - traj.x[k + 1]
        gk = model.stage_constraints(xk, uk)
        if not np.all(np.isfinite(gk)):
            raise ArithmeticError(f"non-finite constraints at stage {k}")
        C[k], D[k] = model.stage_constraint_jacobians(xk, uk)
        f[k] = -gk - h_stage[k]
        q[k] = Qw @ (xk - xref[k])
        r[k] = Rw @ (uk - uref[k])
    CN = model.terminal_constraint_jacobian(traj.x[N])
    fN = -model.terminal_constraints(traj.x[N]) - h_term
    qp = lqr.LtvQpData(
        A=A, B=B, b=b,
        Q=np.broadcast_to(Qw, (N, nx, nx)).copy(),
        R=np.broadcast_to(Rw, (N, nu, nu)).copy(),
        S=np.zeros((N, nu, nx)), q=q, r=r,
        QN=np.asarray(QNw, float), qN=QNw @ (traj.x[N] - xref[N]),
        C=C, D=D, f=f, CN=CN, fN=fN,
        dx0=(np.asarray(x_bar0, float) - traj.x[0]) if x_bar0 is not None else np.zeros(nx),
    )
    return qp


def _defect(model, traj: Trajectory) -> float:
    worst = 0.0
    for k in range(traj.N):
        worst = max(worst, float(np.abs(traj.x[k + 1] - model.step(traj.x[k], traj.u[k])).max()))
    return worst


def _violation(model, traj: Trajectory, tightenings=None) -> float:
    worst = 0.0
    h = tightenings.h if tightenings is not None else None
    for k in range(traj.N):
        g = model.stage_constraints(traj.x[k], traj.u[k])
        if h is not None:
            g = g + h[k]
        if g.size:
            worst = max(worst, float(g.max()))
    gf = model.terminal_constraints(traj.x[-1])
    if tightenings is not None and gf.size:
        gf = gf + tightenings.hf
    if gf.size:
        worst = max(worst, float(gf.max()))
    return max(worst, 0.0)


def _merit(model, traj, x_bar0, tightenings, weight) -> float:
    J = model.tracking_cost(traj.x, traj.u)
    pen = float(np.abs(traj.x[0] - x_bar0).sum())
    for k in range(traj.N):
        pen += float(np.abs(traj.x[k + 1] - model.step(traj.x[k], traj.u[k])).sum())
        g = model.stage_constraints(traj.x[k], traj.u[k])
        if tightenings is not None:
            g = g + tightenings.h[k]
        pen += float(np.clip(g, 0.0, None).sum())
    gf = model.terminal_constraints(traj.x[-1])
    if tightenings is not None and gf.size:
        gf = gf + tightenings.hf
    pen += float(np.clip(gf, 0.0, None).sum())
    return J + weight * pen


def solve_nmpc(model, x_bar0, settings: SqpSettings, initial: Trajectory,
               tightenings=None, executor=None, warm_admm: admm.AdmmState | None = None) -> NmpcResult:
    """Full SQP solve to the stated residual tolerance.

    Raises DivergenceError when the merit increases over five consecutive
    accepted steps; ADMM non-convergence is reported through stats instead.
    """
    executor = executor or default_executor()
    x_bar0 = np.asarray(x_bar0, float)
    traj = initial
    stats = SqpStats()
    admm_state = warm_admm
    lam_stage = np.zeros((traj.N, model.nc))
    lam_term = np.zeros(model.nf)
    qp = None
    merit_increases = 0
    tol_scale = 1.0   # inexact-SQP forcing: shrink the inner tolerance on rejected steps
    for _ in range(settings.max_sqp_iters):
        inner = settings.admm if tol_scale == 1.0 else replace(
            settings.admm,
            tol_primal=settings.admm.tol_primal * tol_scale,
            tol_dual=settings.admm.tol_dual * tol_scale,
        )
        qp = linearize(model, traj, tightenings, x_bar0)
        res = admm.solve_qp(qp, inner, warm_start=admm_state, executor=executor)
        admm_state = res.state
        stats.admm_iterations += res.stats.iterations
        stats.admm_converged = stats.admm_converged and res.stats.converged
        stats.scan_layers = res.stats.scan_layers
        lam_stage, lam_term = res.stage_duals(qp)

        step_norm = max(
            float(np.abs(res.dx).max(initial=0.0)),
            float(np.abs(res.du).max(initial=0.0)),
        )
        residual = max(
            step_norm,
            _defect(model, traj),
            _violation(model, traj, tightenings),
            float(np.abs(traj.x[0] - x_bar0).max()),
        )
        stats.residual = residual
        if residual <= settings.kkt_tol:
            stats.converged = True
            break

        alpha = 1.0
        if settings.line_search:
            # exact-penalty weight must dominate every multiplier estimate:
            # inequality duals lam and the dynamics costates P dx + p
            costate = res.solution.P @ res.dx[..., None]
            mu_max = float(np.abs(costate[..., 0] + res.solution.p).max(initial=0.0))
            weight = max(1.0,
                         10.0 * float(np.abs(res.state.lam).max(initial=0.0)),
                         10.0 * mu_max)
            merit0 = _merit(model, traj, x_bar0, tightenings, weight)
            grad_dot = float((qp.q * res.dx[:-1]).sum() + (qp.r * res.du).sum()
                             + qp.qN @ res.dx[-1])
            while True:
                cand_merit = _merit(model, traj.applied(res.dx, res.du, alpha),
                                    x_bar0, tightenings, weight)
                if cand_merit <= merit0 + 1e-4 * alpha * min(grad_dot, 0.0):
                    break
                if alpha <= settings.alpha_min:
                    alpha = 0.0   # reject; the warm-started re-solve refines the step
                    break
                alpha *= 0.5
        stats.iterations += 1
        if alpha == 0.0:
            merit_increases += 1
            if merit_increases >= 5:
                raise DivergenceError("diverged")
            tol_scale = max(tol_scale * 0.1, 1e-4)
            continue
        merit_increases = 0
        tol_scale = 1.0
        traj = traj.applied(res.dx, res.du, alpha)
    stats.cost = model.tracking_cost(traj.x, traj.u)
    return NmpcResult(trajectory=traj, lam_stage=lam_stage, lam_terminal=lam_term,
                      stats=stats, qp=qp)


def rti_step(model, x_bar0, previous: Trajectory | None, settings: SqpSettings,
             tightenings=None, executor=None, warm_admm: admm.AdmmState | None = None,
             horizon: int | None = None) -> RtiResult:
    """One linearize + QP solve + full step; returns u0 and the shifted warm start.

    Cold start (previous=None, horizon given) falls back to one full batch
    solve before entering the single-iteration regime.
    """
    executor = executor or default_executor()
    x_bar0 = np.asarray(x_bar0, float)
    if previous is None:
        if horizon is None:
            raise ValueError("cold start needs a horizon")
        full = solve_nmpc(model, x_bar0, settings,
                          initial_guess(model, x_bar0, horizon), tightenings, executor)
        plan = full.trajectory
        return RtiResult(u0=plan.u[0].copy(), warm_start=plan.shifted(), plan=plan,
                         lam_stage=full.lam_stage, lam_terminal=full.lam_terminal,
                         stats=full.stats)
    qp = linearize(model, previous, tightenings, x_bar0)
    res = admm.solve_qp(qp, settings.admm, warm_start=warm_admm, executor=executor)
    plan = previous.applied(res.dx, res.du, 1.0)
    lam_stage, lam_term = res.stage_duals(qp)
    stats = SqpStats(iterations=1, converged=res.stats.converged,
                     residual=max(res.stats.r_primal, res.stats.r_dual),
                     admm_iterations=res.stats.iterations,
                     scan_layers=res.stats.scan_layers,
                     admm_converged=res.stats.converged,
                     cost=model.tracking_cost(plan.x, plan.u))
    return RtiResult(u0=plan.u[0].copy(), warm_start=plan.shifted(), plan=plan,
                     lam_stage=lam_stage, lam_terminal=lam_term, stats=stats)
