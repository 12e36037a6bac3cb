"""Inequality-constrained LTV-QP solver by operator splitting.

The stage inequalities C_k dx_k + D_k du_k <= f_k (terminal CN dx_N <= fN)
are tracked by a split variable z with scaled duals y = lam / rho. Each
iteration solves the rho-augmented equality-constrained LQR (through the
scan solver, reusing its factorization cache while rho is unchanged),
projects z onto {z <= f}, and ascends the duals. The penalty follows an
OSQP-style residual-balancing rule applied every `sigma` iterations, gated
by a factor-5 hysteresis so the LQR cache survives small rebalances.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import lqr
from .scan import default_executor

RHO_GATE = 5.0  # hysteresis: commit a rho change only beyond this factor


@dataclass
class AdmmSettings:
    rho0: float = 0.1
    rho_min: float = 1e-6
    rho_max: float = 1e6
    sigma: int = 10
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    max_iter: int = 4000

    def __post_init__(self):
        if self.sigma < 2:
            raise ValueError("sigma must be >= 2")
        for name in ("rho0", "rho_min", "rho_max", "tol_primal", "tol_dual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class AdmmState:
    z: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    rho: float
    generation: int = 0
    iteration: int = 0
    r_primal: float = np.inf
    r_dual: float = np.inf

    @classmethod
    def fresh(cls, m: int, rho: float) -> "AdmmState":
        return cls(z=np.zeros(m), lam=np.zeros(m), y=np.zeros(m), rho=rho)


@dataclass
class AdmmStats:
    iterations: int = 0
    converged: bool = False
    r_primal: float = np.inf
    r_dual: float = np.inf
    rho: float = 0.0
    rho_changes: int = 0
    cache_builds: int = 0
    scan_layers: int = 0


@dataclass
class AdmmResult:
    dx: np.ndarray
    du: np.ndarray
    state: AdmmState
    stats: AdmmStats
    solution: lqr.LqrSolution

    def stage_duals(self, qp: lqr.LtvQpData):
        return split_stacked(qp, self.state.lam)


def stacked_offsets(qp: lqr.LtvQpData) -> np.ndarray:
    return np.concatenate([qp.f.ravel(), qp.fN])


def split_stacked(qp: lqr.LtvQpData, v: np.ndarray):
    nc, N = qp.nc, qp.N
    return v[: N * nc].reshape(N, nc), v[N * nc:]


def constraint_values(qp: lqr.LtvQpData, dx: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Stacked G(dx, du): stage rows then terminal rows."""
    if qp.N == 0:
        return qp.CN @ dx[0] if qp.nf else np.zeros(0)
    stage = (qp.C @ dx[:-1, :, None])[..., 0] + (qp.D @ du[..., None])[..., 0]
    term = qp.CN @ dx[-1] if qp.nf else np.zeros(0)
    return np.concatenate([stage.ravel(), term])


def augment_quadratic(qp: lqr.LtvQpData, rho: float) -> lqr.LtvQpData:
    """Penalty-augmented quadratic blocks; linear terms are left untouched."""
    CT = np.swapaxes(qp.C, -1, -2)
    DT = np.swapaxes(qp.D, -1, -2)
    return replace(
        qp,
        Q=qp.Q + rho * (CT @ qp.C),
        R=qp.R + rho * (DT @ qp.D),
        S=qp.S + rho * (DT @ qp.C),
        QN=qp.QN + rho * (qp.CN.T @ qp.CN),
    )


def augment_linear(qp: lqr.LtvQpData, rho: float, y: np.ndarray, z: np.ndarray) -> lqr.LqrLinearTerms:
    """Scaled-dual linear terms q + rho C'(y - z), r + rho D'(y - z)."""
    w_stage, w_term = split_stacked(qp, y - z)
    CT = np.swapaxes(qp.C, -1, -2)
    DT = np.swapaxes(qp.D, -1, -2)
    q = qp.q + rho * (CT @ w_stage[..., None])[..., 0]
    r = qp.r + rho * (DT @ w_stage[..., None])[..., 0]
    qN = qp.qN + rho * (qp.CN.T @ w_term)
    return lqr.LqrLinearTerms(q=q, r=r, qN=qN)


def augment_costs(qp: lqr.LtvQpData, state: AdmmState) -> lqr.LtvQpData:
    aug = augment_quadratic(qp, state.rho)
    lin = augment_linear(qp, state.rho, state.y, state.z)
    return replace(aug, q=lin.q, r=lin.r, qN=lin.qN)


def project_and_ascend(state: AdmmState, gvals: np.ndarray, f: np.ndarray) -> AdmmState:
    """z <- min(G + y, f); lam <- lam + rho (G - z); keeps y = lam / rho."""
    state.z = np.minimum(gvals + state.y, f)
    state.lam = state.lam + state.rho * (gvals - state.z)
    state.y = state.lam / state.rho
    return state


def update_rho(state: AdmmState, r_primal: float, r_dual: float, settings: AdmmSettings) -> AdmmState:
    """Residual-balancing penalty update with a factor-RHO_GATE hysteresis.

    A committed change rescales y = lam / rho and bumps the generation stamp,
    invalidating any factorization cache keyed to the old penalty.
    """
    ratio = np.sqrt(max(r_primal, 1e-30) / max(r_dual, 1e-30))
    proposed = float(np.clip(state.rho * ratio, settings.rho_min, settings.rho_max))
    if proposed > RHO_GATE * state.rho or proposed < state.rho / RHO_GATE:
        state.rho = proposed
        state.generation += 1
        state.y = state.lam / state.rho
    return state


def solve_qp(qp: lqr.LtvQpData, settings: AdmmSettings | None = None,
             warm_start: AdmmState | None = None, executor=None) -> AdmmResult:
    """ADMM loop around the scan-LQR primal update.

    Terminates when ||G - z||_inf <= tol_primal and rho ||z+ - z||_inf
    <= tol_dual; otherwise returns the last iterate with converged=False.
    """
    settings = settings or AdmmSettings()
    executor = executor or default_executor()
    m = qp.N * qp.nc + qp.nf
    f = stacked_offsets(qp)
    state = warm_start if warm_start is not None else AdmmState.fresh(m, settings.rho0)
    stats = AdmmStats(rho=state.rho)

    cache: lqr.LqrCache | None = None
    aug: lqr.LtvQpData | None = None
    sol: lqr.LqrSolution | None = None
    for it in range(1, settings.max_iter + 1):
        if cache is None or cache.generation != state.generation:
            aug = augment_quadratic(qp, state.rho)
            lin = augment_linear(qp, state.rho, state.y, state.z)
            sol, cache = lqr.build_cache(
                aug.with_linear_terms(lin.q, lin.r, lin.qN),
                executor=executor, generation=state.generation,
            )
            stats.cache_builds += 1
        else:
            lin = augment_linear(qp, state.rho, state.y, state.z)
            sol = lqr.solve_cached(lin, cache, state.generation, executor=executor)
        stats.scan_layers = sol.scan_layers

        gvals = constraint_values(qp, sol.dx, sol.du)
        z_old = state.z
        state = project_and_ascend(state, gvals, f)
        state.iteration += 1
        r_primal = float(np.abs(gvals - state.z).max(initial=0.0))
        r_dual = float(state.rho * np.abs(state.z - z_old).max(initial=0.0))
        state.r_primal, state.r_dual = r_primal, r_dual
        stats.iterations = it
        if r_primal <= settings.tol_primal and r_dual <= settings.tol_dual:
            stats.converged = True
            break
        if it % settings.sigma == 0:
            gen = state.generation
            state = update_rho(state, r_primal, r_dual, settings)
            if state.generation != gen:
                stats.rho_changes += 1

    stats.r_primal, stats.r_dual = state.r_primal, state.r_dual
    stats.rho = state.rho
    return AdmmResult(dx=sol.dx, du=sol.du, state=state, stats=stats, solution=sol)
