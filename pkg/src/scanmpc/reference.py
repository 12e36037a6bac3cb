"""Independent oracles used only for correctness testing.

Everything here is deliberately plain: sequential loops, dense algebra,
no shared code with the scan-based solver path. The oracles trade speed
for being easy to audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_location: str


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    actual = np.asarray(actual, float)
    expected = np.asarray(expected, float)
    denom = max(1.0, float(np.abs(expected).max())) if expected.size else 1.0
    if actual.size == 0:
        return 0.0
    return float(np.abs(actual - expected).max() / denom)


def riccati_lqr(qp):
    """Textbook backward Riccati recursion plus forward rollout, O(N) sequential."""
    from .lqr import LqrSolution

    N, nx, nu = qp.N, qp.nx, qp.nu
    P = np.zeros((N + 1, nx, nx))
    p = np.zeros((N + 1, nx))
    K = np.zeros((N, nu, nx))
    kff = np.zeros((N, nu))
    P[N] = qp.QN
    p[N] = qp.qN
    for i in range(N - 1, -1, -1):
        A, B, b = qp.A[i], qp.B[i], qp.b[i]
        H = qp.R[i] + B.T @ P[i + 1] @ B
        M = qp.S[i] + B.T @ P[i + 1] @ A
        try:
            c = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError(f"singular innovation at stage {i}") from exc
        solve = lambda rhs: np.linalg.solve(c.T, np.linalg.solve(c, rhs))  # noqa: E731
        K[i] = -solve(M)
        kff[i] = -solve(B.T @ (p[i + 1] + P[i + 1] @ b) + qp.r[i])
        P[i] = qp.Q[i] + A.T @ P[i + 1] @ A + M.T @ K[i]
        p[i] = qp.q[i] + A.T @ (p[i + 1] + P[i + 1] @ b) + M.T @ kff[i]
    dx = np.zeros((N + 1, nx))
    du = np.zeros((N, nu))
    dx[0] = qp.dx0
    for i in range(N):
        du[i] = K[i] @ dx[i] + kff[i]
        dx[i + 1] = qp.A[i] @ dx[i] + qp.B[i] @ du[i] + qp.b[i]
    return LqrSolution(dx=dx, du=du, K=K, k=kff, P=P, p=p)


def fastsls_sequential(A, B, E, costs):
    """Per-disturbance Riccati recursions and forward propagations, direct loops."""
    from .sls import SlsResponse

    A = np.asarray(A, float)
    B = np.asarray(B, float)
    E = np.asarray(E, float)
    N, nx, nu = A.shape[0], A.shape[-1], B.shape[-1]
    Phi_x, Phi_u, gains = [], [], []
    for j in range(N):
        stages = range(j + 1, N)
        P = {N: np.asarray(costs.terminal(j), float)}
        Kj = {}
        for i in reversed(stages):
            Qx, Qu, Qux = costs.blocks(i, j)
            G = np.linalg.inv(Qu + B[i].T @ P[i + 1] @ B[i])
            Bk = Qux + B[i].T @ P[i + 1] @ A[i]
            Kj[i] = -G @ Bk
            P[i] = Qx + A[i].T @ P[i + 1] @ A[i] + Kj[i].T @ Bk
        phix = np.zeros((N - j, nx, nx))
        phiu = np.zeros((max(N - 1 - j, 0), nu, nx))
        gj = np.zeros((max(N - 1 - j, 0), nu, nx))
        phix[0] = E[j]
        for i in stages:
            gj[i - j - 1] = Kj[i]
            phiu[i - j - 1] = Kj[i] @ phix[i - j - 1]
            phix[i - j] = (A[i] + B[i] @ Kj[i]) @ phix[i - j - 1]
        Phi_x.append(phix)
        Phi_u.append(phiu)
        gains.append(gj)
    return SlsResponse(Phi_x=Phi_x, Phi_u=Phi_u, gains=gains, N=N, nx=nx, nu=nu)


def dense_qp(H, g, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None,
             tol: float = 1e-9, max_iter: int = 100):
    """Dense convex QP by a Mehrotra-style primal-dual interior point method.

    minimize 1/2 x'Hx + g'x  s.t.  A_ineq x <= b_ineq,  A_eq x = b_eq.
    Returns (x, objective, duals) where duals = (z_ineq, y_eq). Desk-scale
    only; raises ArithmeticError on non-convergence.
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    n = g.shape[0]
    Ai = np.zeros((0, n)) if A_ineq is None else np.asarray(A_ineq, float)
    bi = np.zeros(0) if b_ineq is None else np.asarray(b_ineq, float)
    Ae = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, float)
    be = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    mi, me = Ai.shape[0], Ae.shape[0]

    def kkt_solve(W, rd, rpe):
        # [[H + Ai' W Ai, Ae'], [Ae, 0]] [dx, dy] = [-rd, -rpe]
        top = H + Ai.T @ (W[:, None] * Ai) if mi else H.copy()
        if me:
            KKT = np.block([[top, Ae.T], [Ae, np.zeros((me, me))]])
            rhs = np.concatenate([-rd, -rpe])
            sol = np.linalg.solve(KKT, rhs)
            return sol[:n], sol[n:]
        return np.linalg.solve(top, -rd), np.zeros(0)

    x = np.zeros(n)
    y = np.zeros(me)
    if mi == 0:
        # Equality-constrained (or unconstrained) QP: one KKT solve is exact.
        dx, y = kkt_solve(np.zeros(0), H @ x + g, Ae @ x - be if me else np.zeros(0))
        x = x + dx
        obj = 0.5 * x @ H @ x + g @ x
        return x, obj, (np.zeros(0), y)

    s = np.maximum(bi - Ai @ x, 1.0)
    z = np.ones(mi)
    for _ in range(max_iter):
        rd = H @ x + g + Ai.T @ z + Ae.T @ y
        rpe = Ae @ x - be if me else np.zeros(0)
        rpi = Ai @ x + s - bi
        mu = float(s @ z) / mi
        res = max(
            np.abs(rd).max(initial=0.0),
            np.abs(rpe).max(initial=0.0),
            np.abs(rpi).max(initial=0.0),
            mu,
        )
        if res <= tol:
            obj = 0.5 * x @ H @ x + g @ x
            return x, obj, (z, y)

        W = z / s

        def direction(sigma_mu, comp_corr):
            # eliminate ds, dz: dz = (-rc - z*ds)/s with ds = -rpi - Ai dx
            rc = s * z - sigma_mu + comp_corr
            RD = rd + Ai.T @ ((z * rpi - rc) / s)
            dx, dy = kkt_solve(W, RD, rpe)
            ds = -rpi - Ai @ dx
            dz = (-rc - z * ds) / s
            return dx, dy, ds, dz

        # affine (predictor) step
        dxa, dya, dsa, dza = direction(0.0, 0.0)
        alpha_p = _step_len(s, dsa)
        alpha_d = _step_len(z, dza)
        mu_aff = float((s + alpha_p * dsa) @ (z + alpha_d * dza)) / mi
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, ds, dz = direction(sigma * mu, dsa * dza)
        alpha_p = 0.99 * _step_len(s, ds)
        alpha_d = 0.99 * _step_len(z, dz)
        alpha = min(alpha_p, alpha_d)
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        if me:
            y = y + alpha * dy
    raise ArithmeticError(f"interior point did not converge (residual {res:.2e})")


def _step_len(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def finite_difference_jacobians(fun, x, u, eps: float = 1e-5):
    """Central-difference Jacobians of fun(x, u) with respect to x and u."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    f0 = np.asarray(fun(x, u), float)
    Jx = np.zeros((f0.shape[0], x.shape[0]))
    Ju = np.zeros((f0.shape[0], u.shape[0]))
    for i in range(x.shape[0]):
        d = np.zeros_like(x)
        d[i] = eps
        Jx[:, i] = (np.asarray(fun(x + d, u)) - np.asarray(fun(x - d, u))) / (2 * eps)
    for i in range(u.shape[0]):
        d = np.zeros_like(u)
        d[i] = eps
        Ju[:, i] = (np.asarray(fun(x, u + d)) - np.asarray(fun(x, u - d))) / (2 * eps)
    return Jx, Ju


def fine_euler(f_cont, x, u, dt: float, substeps: int = 1000):
    """Explicit Euler with many substeps; integration oracle for one-step maps."""
    x = np.asarray(x, float).copy()
    h = dt / substeps
    for _ in range(substeps):
        x = x + h * np.asarray(f_cont(x, u), float)
    return x
