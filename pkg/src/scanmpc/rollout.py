"""Closed-loop verification under the disturbance-feedback policy.

The simulator steps the true model with injected disturbances E(x_k) w_k,
applies u_k = v_k + sum_{j<k} Phi^u_{k,j} w_j with w reconstructed from the
realized state jump through the pseudo-inverse of E (range-restricted, so
rank-deficient disturbance maps are fine), and checks the realized states
against the nominal constraints and the tube margins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PINV_TRUNCATION = 1e-10   # singular values below this are treated as zero
WNORM_TOL = 1e-9


@dataclass
class RolloutRecord:
    x: np.ndarray            # realized states (N+1, nx)
    u: np.ndarray            # applied controls (N, nu)
    w: np.ndarray            # reconstructed disturbances (N, nx)
    stage_g: np.ndarray      # realized stage constraint values (N, nc)
    terminal_g: np.ndarray   # realized terminal constraint values (nf,)
    tube_margin: np.ndarray  # per-stage slack of the tube check (N,)
    safe: bool
    tube_ok: bool
    disturbance_model_violated: bool
    max_w_norm: float

    @property
    def min_margin(self) -> float:
        vals = [-self.stage_g.max()] if self.stage_g.size else []
        if self.terminal_g.size:
            vals.append(-float(self.terminal_g.max()))
        return float(min(vals)) if vals else np.inf


def _range_restricted_pinv(E: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(E)
    s_inv = np.where(s >= PINV_TRUNCATION, 1.0 / np.where(s >= PINV_TRUNCATION, s, 1.0), 0.0)
    return Vt.T @ (s_inv[:, None] * U.T)


def closed_loop(model, traj, response, disturbances: np.ndarray,
                tightening=None, tol_lin: float = 1e-2) -> RolloutRecord:
    """Simulate the disturbed model under the synthesized feedback policy.

    `disturbances` holds the true injected w_k (N, nx); the policy only sees
    their reconstructions. The tube check compares realized constraint values
    against the nominal ones plus the stage tightening (slack recorded in
    tube_margin); the safety verdict uses the raw constraints g <= 0.
    """
    N, nx = traj.N, model.nx
    disturbances = np.asarray(disturbances, float)
    if disturbances.shape != (N, nx):
        raise ValueError(f"disturbances must be ({N}, {nx})")
    x = np.zeros((N + 1, nx))
    u = np.zeros((N, model.nu))
    w_hat = np.zeros((N, nx))
    stage_g = np.zeros((N, model.nc))
    tube_margin = np.full(N, np.inf)
    x[0] = traj.x[0]
    violated = False
    tube_ok = True
    for k in range(N):
        fb = np.zeros(model.nu)
        for j in range(k):
            if k - j - 1 < response.Phi_u[j].shape[0]:
                fb += response.Phi_u[j][k - j - 1] @ w_hat[j]
        u[k] = traj.u[k] + fb
        nominal_next = model.step(x[k], u[k])
        E = model.disturbance(x[k])
        x[k + 1] = nominal_next + E @ disturbances[k]
        w_hat[k] = _range_restricted_pinv(E) @ (x[k + 1] - nominal_next)
        if np.linalg.norm(w_hat[k]) > 1.0 + WNORM_TOL:
            violated = True
        stage_g[k] = model.stage_constraints(x[k], u[k])
        if tightening is not None and stage_g[k].size:
            g_nom = model.stage_constraints(traj.x[k], traj.u[k])
            slack = (g_nom + tightening.h[k] + tol_lin - stage_g[k]).min()
            tube_margin[k] = float(slack)
            tube_ok = tube_ok and slack >= 0.0
    terminal_g = model.terminal_constraints(x[N])
    safe = bool((stage_g <= 0.0).all() and (terminal_g <= 0.0).all())
    max_w = float(np.linalg.norm(w_hat, axis=1).max(initial=0.0))
    return RolloutRecord(x=x, u=u, w=w_hat, stage_g=stage_g, terminal_g=terminal_g,
                         tube_margin=tube_margin, safe=safe, tube_ok=tube_ok,
                         disturbance_model_violated=violated, max_w_norm=max_w)


def sample_disturbance(kind: str, n_x: int, horizon: int, seed,
                       rows: np.ndarray | None = None) -> np.ndarray:
    """Seeded disturbance sequences inside the unit ball.

    uniform_ball draws uniformly from the ball, boundary uniformly from the
    sphere; adversarial normalizes the supplied per-stage rows (the
    constraint gradient mapped through E) into unit pushes toward the
    nearest constraint boundary.
    """
    rng = np.random.default_rng(seed)
    if kind == "uniform_ball":
        d = rng.standard_normal((horizon, n_x))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        radius = rng.random((horizon, 1)) ** (1.0 / n_x)
        return d * radius
    if kind == "boundary":
        d = rng.standard_normal((horizon, n_x))
        return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    if kind == "adversarial":
        if rows is None:
            raise ValueError("adversarial sampling needs per-stage constraint rows")
        rows = np.asarray(rows, float)
        if rows.shape != (horizon, n_x):
            raise ValueError(f"rows must be ({horizon}, {n_x})")
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        out = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 1e-12)
        return out
    raise ValueError(f"unknown disturbance kind {kind!r}")


def adversarial_rows(model, traj, constraint_row: int | None = None,
                     max_lookahead: int = 4) -> np.ndarray:
    """Per-stage push directions toward the nearest constraint boundary.

    The greedy direction is (C_{k+1} E_k)^T; when the constraint gradient has
    no component in range(E) (for example position constraints with a
    velocity-channel disturbance), the row is propagated through the
    linearized dynamics, C_{k+m} A_{k+m-1} ... A_{k+1} E_k, until it picks up
    a nonzero push, up to max_lookahead stages.
    """
    N = traj.N
    rows = np.zeros((N, model.nx))
    for k in range(N):
        E = model.disturbance(traj.x[k])
        prop = np.eye(model.nx)
        for m in range(1, max_lookahead + 1):
            idx_k = min(k + m, N)
            xk = traj.x[idx_k]
            uk = traj.u[min(idx_k, N - 1)]
            C, _ = model.stage_constraint_jacobians(xk, uk)
            if C.shape[0]:
                if constraint_row is None:
                    g = model.stage_constraints(xk, uk)
                    state_rows = np.where(np.abs(C).sum(axis=1) > 1e-12)[0]
                    idx = state_rows[np.argmax(g[state_rows])] if state_rows.size else None
                else:
                    idx = constraint_row
                if idx is not None:
                    cand = (C[idx] @ prop @ E).T
                    if np.linalg.norm(cand) > 1e-9:
                        rows[k] = cand
                        break
            if idx_k >= N:
                break
            A, _ = model.jacobians(traj.x[idx_k], traj.u[min(idx_k, N - 1)])
            prop = A @ prop
    return rows


def superposition_check(traj, response, w: np.ndarray, realized_x: np.ndarray) -> float:
    """Worst deviation between realized offsets and sum_j Phi^x_{k,j} w_j.

    Exact (to roundoff) for linear models; the LTV-surrogate tube identity.
    """
    worst = 0.0
    for k in range(1, traj.N + 1):
        pred = np.zeros(traj.x.shape[1])
        for j in range(k):
            pred += response.phi_x(k, j) @ w[j]
        worst = max(worst, float(np.abs(realized_x[k] - traj.x[k] - pred).max()))
    return worst
