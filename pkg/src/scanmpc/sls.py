"""Disturbance-feedback synthesis, constraint tightening, and the robust loop.

For each injection time j the closed-loop response blocks Phi^x_{k,j},
Phi^u_{k,j} solve an independent Riccati problem whose costs are reweighted
by duals tau telling the controller which nominal constraints are tight.
All N backward recursions are evaluated together: the scan elements carry an
extra leading axis over j, so one reverse scan (and one forward
matrix-product scan) services every disturbance at once, in the same tree
order as the nominal solver.

Row-norm sums of the constraint-mapped response blocks give the tube
tightenings h; alternating tightened nominal solves with controller
synthesis drives h to a fixed point (the batch robust solve), while the RTI
variant performs exactly one linearization, one synthesis, and one
tightened nominal update per control step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import admm, lqr, sqp
from .lqr import _cvf_matrix_core, _matvec, spd_inverse
from .scan import default_executor, tree_scan


class RobustInfeasibleError(RuntimeError):
    pass


@dataclass
class SlsWeights:
    Qbar: np.ndarray
    Rbar: np.ndarray
    QbarN: np.ndarray

    @classmethod
    def identity(cls, nx: int, nu: int, scale: float = 1.0) -> "SlsWeights":
        return cls(scale * np.eye(nx), scale * np.eye(nu), scale * np.eye(nx))

    def validate(self):
        for name in ("Qbar", "Rbar", "QbarN"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            np.linalg.cholesky(M)


@dataclass
class SlsResponse:
    """Lower-triangular response maps, ragged storage indexed [j][k - j - 1].

    Phi_x[j] stacks Phi^x_{k,j} for k in [j+1, N]; Phi_u[j] stacks
    Phi^u_{k,j} for k in [j+1, N-1]; gains mirror Phi_u.
    """

    Phi_x: list
    Phi_u: list
    gains: list
    N: int
    nx: int
    nu: int

    def phi_x(self, k: int, j: int) -> np.ndarray:
        return self.Phi_x[j][k - j - 1]

    def phi_u(self, k: int, j: int) -> np.ndarray:
        return self.Phi_u[j][k - j - 1]

    def scaled(self, factor: float) -> "SlsResponse":
        return SlsResponse([factor * p for p in self.Phi_x],
                           [factor * p for p in self.Phi_u],
                           [g.copy() for g in self.gains], self.N, self.nx, self.nu)

    @classmethod
    def zero(cls, N: int, nx: int, nu: int) -> "SlsResponse":
        return cls(
            Phi_x=[np.zeros((N - j, nx, nx)) for j in range(N)],
            Phi_u=[np.zeros((max(N - 1 - j, 0), nu, nx)) for j in range(N)],
            gains=[np.zeros((max(N - 1 - j, 0), nu, nx)) for j in range(N)],
            N=N, nx=nx, nu=nu,
        )

    def dynamics_residual(self, A: np.ndarray, B: np.ndarray) -> float:
        worst = 0.0
        for j in range(self.N):
            for k in range(j + 1, self.N):
                pred = A[k] @ self.phi_x(k, j) + B[k] @ self.phi_u(k, j)
                worst = max(worst, float(np.abs(self.phi_x(k + 1, j) - pred).max()))
        return worst


@dataclass
class SlsDuals:
    tau: list          # tau[j]: (N-1-j, nc) rows for k in [j+1, N-1]
    tau_term: np.ndarray  # (N, nf) terminal rows per injection time
    beta: list
    beta_term: np.ndarray
    eps: float

    @classmethod
    def zero(cls, N: int, nc: int, nf: int, eps: float = 1e-8) -> "SlsDuals":
        return cls(
            tau=[np.zeros((max(N - 1 - j, 0), nc)) for j in range(N)],
            tau_term=np.zeros((N, nf)),
            beta=[np.zeros((max(N - 1 - j, 0), nc)) for j in range(N)],
            beta_term=np.zeros((N, nf)),
            eps=eps,
        )


@dataclass
class Tightening:
    h: np.ndarray    # (N, nc)
    hf: np.ndarray   # (nf,)

    @classmethod
    def zero(cls, N: int, nc: int, nf: int) -> "Tightening":
        return cls(h=np.zeros((N, nc)), hf=np.zeros(nf))

    def max_abs_diff(self, other: "Tightening") -> float:
        dh = float(np.abs(self.h - other.h).max(initial=0.0))
        dhf = float(np.abs(self.hf - other.hf).max(initial=0.0))
        return max(dh, dhf)


@dataclass
class SlsCosts:
    """Per-(k, j) synthesis cost blocks on the ragged stage range."""

    Qx: list       # [j] -> (N-1-j, nx, nx)
    Qu: list       # [j] -> (N-1-j, nu, nu)
    Qux: list      # [j] -> (N-1-j, nu, nx)
    Qx_term: np.ndarray  # (N, nx, nx)

    def blocks(self, k: int, j: int):
        i = k - j - 1
        return self.Qx[j][i], self.Qu[j][i], self.Qux[j][i]

    def terminal(self, j: int) -> np.ndarray:
        return self.Qx_term[j]


def row_norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt((M * M).sum(axis=-1))


def compute_duals(lam_stage: np.ndarray, lam_term: np.ndarray,
                  response: SlsResponse | None, C: np.ndarray, D: np.ndarray,
                  CN: np.ndarray, eps: float = 1e-8) -> SlsDuals:
    """Appendix-style reweighting tau = lam / sqrt(beta + eps).

    beta is the squared row norm of the constraint-mapped response block;
    a missing response (cold start) means beta = 0 everywhere. Negative
    duals are clamped to zero before use.
    """
    N, nc = lam_stage.shape
    nf = lam_term.shape[0]
    lam_stage = np.clip(lam_stage, 0.0, None)
    lam_term = np.clip(lam_term, 0.0, None)
    duals = SlsDuals.zero(N, nc, nf, eps)
    for j in range(N):
        for k in range(j + 1, N):
            if response is not None:
                rows = C[k] @ response.phi_x(k, j) + D[k] @ response.phi_u(k, j)
                duals.beta[j][k - j - 1] = row_norms(rows) ** 2
            duals.tau[j][k - j - 1] = lam_stage[k] / np.sqrt(duals.beta[j][k - j - 1] + eps)
        if response is not None and nf:
            duals.beta_term[j] = row_norms(CN @ response.phi_x(N, j)) ** 2
        duals.tau_term[j] = lam_term / np.sqrt(duals.beta_term[j] + eps)
    return duals


def assemble_costs(duals: SlsDuals | None, C: np.ndarray, D: np.ndarray,
                   CN: np.ndarray, weights: SlsWeights) -> SlsCosts:
    """Cost blocks [C D]' diag(tau) [C D] + blkdiag(Qbar, Rbar) per (k, j)."""
    N = C.shape[0]
    nx, nu = weights.Qbar.shape[0], weights.Rbar.shape[0]
    Qx, Qu, Qux = [], [], []
    Qx_term = np.empty((N, nx, nx))
    for j in range(N):
        cnt = max(N - 1 - j, 0)
        qx = np.empty((cnt, nx, nx))
        qu = np.empty((cnt, nu, nu))
        qux = np.empty((cnt, nu, nx))
        for k in range(j + 1, N):
            t = duals.tau[j][k - j - 1] if duals is not None else np.zeros(C.shape[1])
            CtT = C[k].T * t
            DtT = D[k].T * t
            qx[k - j - 1] = CtT @ C[k] + weights.Qbar
            qu[k - j - 1] = DtT @ D[k] + weights.Rbar
            qux[k - j - 1] = DtT @ C[k]
        Qx.append(qx)
        Qu.append(qu)
        Qux.append(qux)
        tN = duals.tau_term[j] if duals is not None else np.zeros(CN.shape[0])
        Qx_term[j] = (CN.T * tN) @ CN + weights.QbarN
    return SlsCosts(Qx=Qx, Qu=Qu, Qux=Qux, Qx_term=Qx_term)


def _sls_cvf_kernel(left, right):
    Pl, Al, Cl = left
    Pr, Ar, Cr = right
    P, A, C, _, _ = _cvf_matrix_core(Pl, Al, Cl, Pr, Ar, Cr)
    return (P, A, C), ()


def _sls_cvf_identity(count: int, J: int, nx: int):
    shape = (count, J, nx, nx)
    eye = np.zeros(shape)
    eye[...] = np.eye(nx)
    return (np.zeros(shape), eye, np.zeros(shape))


def _matprod_kernel(left, right):
    return (right[0] @ left[0],), ()


def _matprod_identity(count: int, J: int, nx: int):
    eye = np.zeros((count, J, nx, nx))
    eye[...] = np.eye(nx)
    return (eye,)


def synthesize(A: np.ndarray, B: np.ndarray, E: np.ndarray, costs: SlsCosts,
               executor=None) -> SlsResponse:
    """Solve all per-disturbance Riccati problems by one batched scan pair.

    Scan elements carry a (position, injection) grid; positions at or below
    the injection time hold neutral elements, so each column's suffix
    reduction is exactly that disturbance's backward recursion. Gains follow
    from the recovered value Hessians, and a forward matrix-product scan over
    [E_j, closed-loop maps] yields Phi^x columnwise.
    """
    executor = executor or default_executor()
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    E = np.asarray(E, float)
    N, nx, nu = A.shape[0], A.shape[-1], B.shape[-1]
    if N == 0:
        return SlsResponse.zero(0, nx, nu)

    # grid cost blocks, identity-filled where (i, j) is outside [j+1, N-1]
    Qx_g = np.tile(np.eye(nx), (N, N, 1, 1))
    Qu_g = np.tile(np.eye(nu), (N, N, 1, 1))
    Qux_g = np.zeros((N, N, nu, nx))
    valid = np.zeros((N, N), dtype=bool)
    for j in range(N):
        for k in range(j + 1, N):
            Qx_g[k, j] = costs.Qx[j][k - j - 1]
            Qu_g[k, j] = costs.Qu[j][k - j - 1]
            Qux_g[k, j] = costs.Qux[j][k - j - 1]
            valid[k, j] = True

    try:
        Qu_inv = spd_inverse(Qu_g, "synthesis input-cost block")
    except lqr.SingularStageError:
        _locate_singular(Qu_g, valid, "Qu")
        raise
    Ag = np.broadcast_to(A[:, None], (N, N, nx, nx))
    Bg = np.broadcast_to(B[:, None], (N, N, nx, nu))
    BgT = np.swapaxes(Bg, -1, -2)
    QuinvQux = Qu_inv @ Qux_g
    P_el = np.ascontiguousarray(Qx_g - np.swapaxes(Qux_g, -1, -2) @ QuinvQux)
    A_el = np.ascontiguousarray(Ag - Bg @ QuinvQux)
    C_el = np.ascontiguousarray(Bg @ Qu_inv @ BgT)
    # neutral elements wherever the stage is outside the j-th recursion
    inv_mask = ~valid
    P_el[inv_mask] = 0.0
    A_el[inv_mask] = np.eye(nx)
    C_el[inv_mask] = 0.0
    term = (
        np.ascontiguousarray(costs.Qx_term[None]),
        np.zeros((1, N, nx, nx)),
        np.zeros((1, N, nx, nx)),
    )
    batch = tuple(np.concatenate([s, t], axis=0) for s, t in zip((P_el, A_el, C_el), term))

    out, _ = tree_scan(
        batch, _sls_cvf_kernel, lambda c: _sls_cvf_identity(c, N, nx),
        direction="reverse", executor=executor,
    )
    P_grid = out[0]   # (N+1, N, nx, nx); column j valid for positions >= j+1

    P_next = np.ascontiguousarray(P_grid[1:])      # P_{i+1}^{(j)} on the (i, j) grid
    inner = Qu_g + BgT @ P_next @ Bg
    try:
        G = spd_inverse(inner, "synthesis innovation")
    except lqr.SingularStageError:
        _locate_singular(inner, valid, "Qu + B'PB")
        raise
    K_grid = -(G @ (Qux_g + BgT @ P_next @ Ag))

    # forward product scan: position j carries E_j, later positions the
    # closed-loop maps; column j's inclusive products are Phi^x_{i+1, j}
    M_el = np.tile(np.eye(nx), (N, N, 1, 1))
    diag = np.arange(N)
    M_el[diag, diag] = E
    cl = Ag + Bg @ K_grid
    M_el[valid] = cl[valid]
    prod, _ = tree_scan(
        (np.ascontiguousarray(M_el),), _matprod_kernel,
        lambda c: _matprod_identity(c, N, nx),
        direction="forward", executor=executor,
    )
    Phi_grid = prod[0]   # (N, N, nx, nx): Phi^x_{i+1, j} at (i, j) for i >= j

    Phi_x, Phi_u, gains = [], [], []
    for j in range(N):
        phix = np.ascontiguousarray(Phi_grid[j:, j])
        kj = np.ascontiguousarray(K_grid[j + 1:, j])
        phiu = kj @ phix[:-1] if N - 1 - j > 0 else np.zeros((0, nu, nx))
        Phi_x.append(phix)
        Phi_u.append(phiu)
        gains.append(kj)
    return SlsResponse(Phi_x=Phi_x, Phi_u=Phi_u, gains=gains, N=N, nx=nx, nu=nu)


def _locate_singular(grid: np.ndarray, valid: np.ndarray, label: str):
    for (k, j) in np.argwhere(valid):
        try:
            np.linalg.cholesky(grid[k, j])
        except np.linalg.LinAlgError:
            raise lqr.SingularStageError(f"singular {label} block at (k={k}, j={j})") from None


def tighten(response: SlsResponse, C: np.ndarray, D: np.ndarray, CN: np.ndarray) -> Tightening:
    """h_k = sum_{j<k} rownorm(C_k Phi^x_{k,j} + D_k Phi^u_{k,j}), terminal analog."""
    N = response.N
    nc, nf = C.shape[1], CN.shape[0]
    h = np.zeros((N, nc))
    for k in range(1, N):
        for j in range(k):
            h[k] += row_norms(C[k] @ response.phi_x(k, j) + D[k] @ response.phi_u(k, j))
    hf = np.zeros(nf)
    if nf:
        for j in range(N):
            hf += row_norms(CN @ response.phi_x(N, j))
    return Tightening(h=h, hf=hf)


def sls_cost(response: SlsResponse, weights: SlsWeights) -> float:
    """Weighted Frobenius energy of the response maps; zero iff the maps vanish."""
    Lq = np.linalg.cholesky(weights.Qbar)
    Lr = np.linalg.cholesky(weights.Rbar)
    Lqn = np.linalg.cholesky(weights.QbarN)
    total = 0.0
    for j in range(response.N):
        px = response.Phi_x[j]
        if px.shape[0] > 1:
            total += float(((Lq.T @ px[:-1]) ** 2).sum())
        total += float(((Lqn.T @ px[-1]) ** 2).sum())
        pu = response.Phi_u[j]
        if pu.shape[0]:
            total += float(((Lr.T @ pu) ** 2).sum())
    return total


@dataclass
class RobustSettings:
    sqp: sqp.SqpSettings = field(default_factory=sqp.SqpSettings)
    weights: SlsWeights | None = None
    eps: float = 1e-8
    tol_h: float = 1e-3
    max_alternations: int = 20
    weight_scale: float = 1.0
    tau_damping: float = 0.5   # blend of previous tau; stabilizes the reweighting cycle


@dataclass
class RobustStats:
    alternations: int = 0
    converged: bool = False
    dh: float = np.inf
    sqp_iterations: int = 0
    nominal_converged: bool = True


@dataclass
class RobustResult:
    trajectory: sqp.Trajectory
    response: SlsResponse
    tightening: Tightening
    duals: SlsDuals
    lam_stage: np.ndarray
    lam_terminal: np.ndarray
    stats: RobustStats
    qp: lqr.LtvQpData


def _stage_disturbances(model, traj: sqp.Trajectory, inflation=None) -> np.ndarray:
    E = np.stack([model.disturbance(traj.x[k]) for k in range(traj.N)])
    if inflation is not None:
        E = E + np.stack([inflation(k, traj.x[k]) for k in range(traj.N)])
    return E


def solve_robust(model, x_bar0, settings: RobustSettings, initial=None,
                 executor=None, e_inflation=None) -> RobustResult:
    """Alternate tightened nominal solves with controller synthesis.

    Stops when the tightening change drops below tol_h (in the infinity
    norm) or after max_alternations; three consecutive non-convergent
    nominal solves raise RobustInfeasibleError.
    """
    executor = executor or default_executor()
    x_bar0 = np.asarray(x_bar0, float)
    weights = settings.weights or SlsWeights.identity(model.nx, model.nu, settings.weight_scale)
    guess = initial
    tight = None
    response = None
    duals = None
    stats = RobustStats()
    infeasible_run = 0
    result = None
    last_good = None
    for alt in range(settings.max_alternations + 1):
        try:
            nominal = sqp.solve_nmpc(model, x_bar0, settings.sqp,
                                     guess if guess is not None else _default_guess(model, x_bar0),
                                     tightenings=tight, executor=executor)
        except sqp.DivergenceError:
            if last_good is None:
                raise
            nominal = None
        if nominal is None or not nominal.stats.converged:
            infeasible_run += 1
            if infeasible_run >= 3:
                raise RobustInfeasibleError(
                    "robust problem infeasible: reduce disturbance or relax constraints")
            if nominal is None:
                # keep the last good nominal; the damped tau blend still moves h
                nominal = last_good
        else:
            infeasible_run = 0
            last_good = nominal
        stats.sqp_iterations += nominal.stats.iterations
        stats.nominal_converged = nominal.stats.converged and infeasible_run == 0
        guess = nominal.trajectory
        qp = sqp.linearize(model, nominal.trajectory, tight, x_bar0)
        if response is not None:
            # this nominal was solved against (response, tight): a consistent triple
            result = RobustResult(trajectory=nominal.trajectory, response=response,
                                  tightening=tight,
                                  duals=duals or SlsDuals.zero(qp.N, qp.nc, qp.nf, settings.eps),
                                  lam_stage=nominal.lam_stage, lam_terminal=nominal.lam_terminal,
                                  stats=stats, qp=qp)
            if stats.dh <= settings.tol_h:
                stats.converged = True
                break
        if alt == settings.max_alternations:
            break
        stats.alternations = alt + 1
        if response is None:
            duals = None   # cold start: unweighted blkdiag(Qbar, Rbar) synthesis
        else:
            fresh = compute_duals(nominal.lam_stage, nominal.lam_terminal, response,
                                  qp.C, qp.D, qp.CN, settings.eps)
            duals = _blend_duals(fresh, duals, settings.tau_damping)
        costs = assemble_costs(duals, qp.C, qp.D, qp.CN, weights)
        E = _stage_disturbances(model, nominal.trajectory, e_inflation)
        response = synthesize(qp.A, qp.B, E, costs, executor=executor)
        new_tight = tighten(response, qp.C, qp.D, qp.CN)
        stats.dh = (new_tight.max_abs_diff(tight)
                    if tight is not None and tight.h.shape == new_tight.h.shape else np.inf)
        tight = new_tight
    return result


def _default_guess(model, x_bar0, N: int = 32):
    return sqp.initial_guess(model, x_bar0, N)


def _blend_duals(fresh: SlsDuals, previous: SlsDuals | None, damping: float) -> SlsDuals:
    if previous is None or damping <= 0.0:
        return fresh
    keep = damping
    for j in range(len(fresh.tau)):
        if fresh.tau[j].size:
            fresh.tau[j] = (1 - keep) * fresh.tau[j] + keep * previous.tau[j]
    fresh.tau_term = (1 - keep) * fresh.tau_term + keep * previous.tau_term
    return fresh


@dataclass
class RobustRtiResult:
    u0: np.ndarray
    warm_start: sqp.Trajectory
    plan: sqp.Trajectory
    tau: SlsDuals
    tightening: Tightening
    response: SlsResponse
    lam_stage: np.ndarray
    lam_terminal: np.ndarray
    stats: sqp.SqpStats


def rti_robust_step(model, x_bar0, previous: sqp.Trajectory, tau: SlsDuals | None,
                    settings: RobustSettings, executor=None, e_inflation=None,
                    warm_admm=None) -> RobustRtiResult:
    """One linearization, one controller update, one tightened nominal update.

    The synthesis is warm-started with the previous step's tau (tau=None
    means unweighted blkdiag(Qbar, Rbar) costs); the fresh duals from the
    tightened solve are post-processed into the tau handed to the next step.
    """
    executor = executor or default_executor()
    x_bar0 = np.asarray(x_bar0, float)
    weights = settings.weights or SlsWeights.identity(model.nx, model.nu, settings.weight_scale)
    qp = sqp.linearize(model, previous, None, x_bar0)
    costs = assemble_costs(tau, qp.C, qp.D, qp.CN, weights)
    E = _stage_disturbances(model, previous, e_inflation)
    response = synthesize(qp.A, qp.B, E, costs, executor=executor)
    tight = tighten(response, qp.C, qp.D, qp.CN)

    step = sqp.rti_step(model, x_bar0, previous, settings.sqp, tightenings=tight,
                        executor=executor, warm_admm=warm_admm)
    tau_next = compute_duals(step.lam_stage, step.lam_terminal, response,
                             qp.C, qp.D, qp.CN, settings.eps)
    return RobustRtiResult(u0=step.u0, warm_start=step.warm_start, plan=step.plan,
                           tau=tau_next, tightening=tight, response=response,
                           lam_stage=step.lam_stage, lam_terminal=step.lam_terminal,
                           stats=step.stats)
