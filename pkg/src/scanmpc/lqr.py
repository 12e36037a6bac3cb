"""Equality-constrained LTV-LQR solved by conditional-value-function scans.

The backward Riccati pass is expressed as a reverse inclusive scan over
conditional value function (CVF) elements (P, p, A, C, b); the forward
rollout as a forward scan over affine conditional-optimal-trajectory (COT)
elements. Both passes run through :mod:`scanmpc.scan`, so the combine order
is a fixed balanced tree regardless of executor.

A cache built at one set of cost matrices lets subsequent solves that only
change the linear terms (q, r, qN) replay the scans with every matrix
intermediate reused: per tree node the combine reduces to four matrix-vector
products, and no factorization or inversion happens per iteration. The
cached path is bitwise identical to a full solve because both call the same
affine helpers on the same arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scan import LayerCounter, default_executor, tree_scan

RCOND_COMBINE = 1e-14      # reject combines with worse (I + P C) conditioning
CHOL_PIVOT_MIN = 1e-10     # smallest admissible Cholesky pivot before regularizing
CHOL_REG = 1e-9            # ridge added to a near-singular SPD block


class IllConditionedCombineError(ArithmeticError):
    pass


class SingularStageError(ArithmeticError):
    pass


class CacheInvalidatedError(RuntimeError):
    pass


@dataclass
class LtvQpData:
    """Stagewise data of the structured LTV-QP.

    Dynamics x_{k+1} = A_k x_k + B_k u_k + b_k for k in [0, N); stage cost
    1/2 [x,u]^T [[Q, S^T],[S, R]] [x,u] + q^T x + r^T u plus terminal
    1/2 x^T QN x + qN^T x; inequality rows C_k x + D_k u <= f_k and terminal
    CN x <= fN; initial offset dx0.
    """

    A: np.ndarray          # (N, nx, nx)
    B: np.ndarray          # (N, nx, nu)
    b: np.ndarray          # (N, nx)
    Q: np.ndarray          # (N, nx, nx)
    R: np.ndarray          # (N, nu, nu)
    S: np.ndarray          # (N, nu, nx)
    q: np.ndarray          # (N, nx)
    r: np.ndarray          # (N, nu)
    QN: np.ndarray         # (nx, nx)
    qN: np.ndarray         # (nx,)
    C: np.ndarray          # (N, nc, nx)
    D: np.ndarray          # (N, nc, nu)
    f: np.ndarray          # (N, nc)
    CN: np.ndarray         # (nf, nx)
    fN: np.ndarray         # (nf,)
    dx0: np.ndarray        # (nx,)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def nx(self) -> int:
        return self.QN.shape[0]

    @property
    def nu(self) -> int:
        return self.R.shape[-1] if self.N > 0 else self.S.shape[1]

    @property
    def nc(self) -> int:
        return self.C.shape[1]

    @property
    def nf(self) -> int:
        return self.CN.shape[0]

    def validate(self) -> None:
        N, nx, nu, nc, nf = self.N, self.nx, self.nu, self.nc, self.nf
        expect = {
            "A": (N, nx, nx), "B": (N, nx, nu), "b": (N, nx),
            "Q": (N, nx, nx), "R": (N, nu, nu), "S": (N, nu, nx),
            "q": (N, nx), "r": (N, nu), "QN": (nx, nx), "qN": (nx,),
            "C": (N, nc, nx), "D": (N, nc, nu), "f": (N, nc),
            "CN": (nf, nx), "fN": (nf,), "dx0": (nx,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if N > 0 and not np.allclose(self.Q, np.swapaxes(self.Q, -1, -2)):
            raise ValueError("Q stages must be symmetric")
        if not np.allclose(self.QN, self.QN.T):
            raise ValueError("QN must be symmetric")

    def with_linear_terms(self, q: np.ndarray, r: np.ndarray, qN: np.ndarray) -> "LtvQpData":
        return LtvQpData(
            A=self.A, B=self.B, b=self.b, Q=self.Q, R=self.R, S=self.S,
            q=q, r=r, QN=self.QN, qN=qN, C=self.C, D=self.D, f=self.f,
            CN=self.CN, fN=self.fN, dx0=self.dx0,
        )


@dataclass
class LqrLinearTerms:
    q: np.ndarray    # (N, nx)
    r: np.ndarray    # (N, nu)
    qN: np.ndarray   # (nx,)


@dataclass
class LqrSolution:
    dx: np.ndarray        # (N+1, nx)
    du: np.ndarray        # (N, nu)
    K: np.ndarray         # (N, nu, nx)
    k: np.ndarray         # (N, nu)
    P: np.ndarray         # (N+1, nx, nx)
    p: np.ndarray         # (N+1, nx)
    scan_layers: int = 0  # CVF reverse-scan combine layers executed

    def dynamics_residual(self, qp: LtvQpData) -> float:
        if qp.N == 0:
            return 0.0
        pred = _matvec(qp.A, self.dx[:-1]) + _matvec(qp.B, self.du) + qp.b
        return float(np.abs(self.dx[1:] - pred).max())


@dataclass
class _Static:
    """Penalty-invariant arrays shared by the full and cached solve paths."""

    A: np.ndarray
    B: np.ndarray
    BT: np.ndarray
    b: np.ndarray
    dx0: np.ndarray
    Rinv: np.ndarray      # explicit (R + reg)^-1 per stage
    ST: np.ndarray        # S^T, contiguous
    P_init: np.ndarray    # CVF element matrices, stages only
    A_init: np.ndarray
    C_init: np.ndarray
    QN: np.ndarray


@dataclass
class LqrCache:
    """Everything a linear-terms-only re-solve needs, stamped by generation."""

    generation: int
    static: _Static
    K: np.ndarray          # (N, nu, nx)
    Gamma: np.ndarray      # (N, nu, nu)
    P: np.ndarray          # (N+1, nx, nx)
    Abar: np.ndarray       # (N, nx, nx) closed-loop stage maps
    cvf_aux: list = field(repr=False, default_factory=list)
    cot_aux: list = field(repr=False, default_factory=list)
    scan_layers: int = 0


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (M @ v[..., None])[..., 0]


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def _eye_like(M: np.ndarray) -> np.ndarray:
    n = M.shape[-1]
    return np.broadcast_to(np.eye(n), M.shape)


def spd_inverse(M: np.ndarray, label: str = "matrix") -> np.ndarray:
    """Explicit inverse of a stack of SPD matrices via Cholesky solves.

    A block whose smallest Cholesky pivot falls below CHOL_PIVOT_MIN is
    refactored with a CHOL_REG ridge; a block that still fails raises
    SingularStageError naming the offending stage.
    """
    M = np.asarray(M, dtype=float)
    stack = M.reshape((-1,) + M.shape[-2:])
    try:
        L = np.linalg.cholesky(stack)
        bad = (np.diagonal(L, axis1=-2, axis2=-1) ** 2).min(axis=-1) < CHOL_PIVOT_MIN
    except np.linalg.LinAlgError:
        L = None
        bad = None
    if L is None or (bad is not None and bad.any()):
        L = np.empty_like(stack)
        ridge = CHOL_REG * np.eye(M.shape[-1])
        for i in range(stack.shape[0]):
            Mi = stack[i]
            try:
                Li = np.linalg.cholesky(Mi)
                if (np.diag(Li) ** 2).min() < CHOL_PIVOT_MIN:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                try:
                    Li = np.linalg.cholesky(Mi + ridge)
                except np.linalg.LinAlgError as exc:
                    raise SingularStageError(
                        f"singular {label} at stage {i}"
                    ) from exc
            L[i] = Li
    eye = np.broadcast_to(np.eye(M.shape[-1]), stack.shape)
    Linv = np.linalg.solve(L, _contig(eye))
    inv = _contig(np.swapaxes(Linv, -1, -2)) @ Linv
    return inv.reshape(M.shape)


# ---------------------------------------------------------------------------
# CVF combine kernels (batched; arrays shaped (..., n, n) / (..., n))

def _cvf_matrix_core(Pl, Al, Cl, Pr, Ar, Cr):
    """Matrix half of the CVF combine; also returns the Ups/Psi intermediates."""
    eye = _eye_like(Pl)
    M1 = eye + Pr @ Cl
    rcond = 1.0 / np.linalg.cond(M1)
    if not np.all(rcond > RCOND_COMBINE):
        raise IllConditionedCombineError("ill-conditioned combine")
    M2 = eye + Cl @ Pr
    Ups = _contig(np.swapaxes(np.linalg.solve(_contig(np.swapaxes(M1, -1, -2)), Al), -1, -2))
    Psi = _contig(np.swapaxes(np.linalg.solve(_contig(np.swapaxes(M2, -1, -2)), _contig(np.swapaxes(Ar, -1, -2))), -1, -2))
    P = Ups @ Pr @ Al + Pl
    A = Psi @ Al
    C = Psi @ Cl @ _contig(np.swapaxes(Ar, -1, -2)) + Cr
    return P, A, C, Ups, Psi


def _cvf_affine_core(Ups, Pr_cached, Psi, Cl_cached, pl, bl, pr, br):
    """Vector half of the CVF combine; shared verbatim by full and replay paths."""
    p = _matvec(Ups, pr + _matvec(Pr_cached, bl)) + pl
    b = _matvec(Psi, bl - _matvec(Cl_cached, pr)) + br
    return p, b


def cvf_kernel(left, right):
    Pl, pl, Al, Cl, bl = left
    Pr, pr, Ar, Cr, br = right
    P, A, C, Ups, Psi = _cvf_matrix_core(Pl, Al, Cl, Pr, Ar, Cr)
    p, b = _cvf_affine_core(Ups, Pr, Psi, Cl, pl, bl, pr, br)
    return (P, p, A, C, b), (Ups, Pr, Psi, Cl)


def cvf_replay_kernel(left, right, aux):
    pl, bl = left
    pr, br = right
    Ups, Pr, Psi, Cl = aux
    p, b = _cvf_affine_core(Ups, Pr, Psi, Cl, pl, bl, pr, br)
    return (p, b), ()


def cvf_identity(count: int, nx: int, grid: tuple = ()):
    shape_m = (count,) + grid + (nx, nx)
    shape_v = (count,) + grid + (nx,)
    eye = np.zeros(shape_m)
    eye[...] = np.eye(nx)
    return (np.zeros(shape_m), np.zeros(shape_v), eye, np.zeros(shape_m), np.zeros(shape_v))


def cot_kernel(left, right):
    Al, bl = left
    Ar, br = right
    A = Ar @ Al
    b = _matvec(Ar, bl) + br
    return (A, b), (Ar,)


def cot_replay_kernel(left, right, aux):
    bl, = left
    br, = right
    (Ar,) = aux
    return (_matvec(Ar, bl) + br,), ()


def cot_identity(count: int, nx: int):
    eye = np.zeros((count, nx, nx))
    eye[...] = np.eye(nx)
    return (eye, np.zeros((count, nx)))


# ---------------------------------------------------------------------------
# Solve paths

def init_elements(qp: LtvQpData):
    """CVF scan elements for the augmented problem, plus the static bundle.

    Returns (batch, static) where batch has N+1 positions (stages then the
    terminal element with A = C = 0).
    """
    static = _build_static(qp)
    p_init, b_init = _linear_element_terms(static, qp.q, qp.r)
    N, nx = qp.N, qp.nx
    P = np.concatenate([static.P_init, static.QN[None]], axis=0)
    p = np.concatenate([p_init, qp.qN[None]], axis=0)
    A = np.concatenate([static.A_init, np.zeros((1, nx, nx))], axis=0)
    C = np.concatenate([static.C_init, np.zeros((1, nx, nx))], axis=0)
    b = np.concatenate([b_init, np.zeros((1, nx))], axis=0)
    return (P, p, A, C, b), static


def _build_static(qp: LtvQpData) -> _Static:
    N, nx = qp.N, qp.nx
    if N == 0:
        z = np.zeros((0, nx, nx))
        return _Static(
            A=qp.A, B=qp.B, BT=np.zeros((0, qp.nu, nx)), b=qp.b, dx0=np.asarray(qp.dx0, float),
            Rinv=np.zeros((0, qp.nu, qp.nu)), ST=np.zeros((0, nx, qp.nu)),
            P_init=z, A_init=z, C_init=z, QN=np.asarray(qp.QN, float),
        )
    Rinv = spd_inverse(qp.R, "R")
    ST = _contig(np.swapaxes(qp.S, -1, -2))
    BT = _contig(np.swapaxes(qp.B, -1, -2))
    RS = Rinv @ qp.S
    P_init = _contig(qp.Q - ST @ RS)
    A_init = _contig(qp.A - qp.B @ RS)
    C_init = _contig(qp.B @ Rinv @ BT)
    return _Static(
        A=_contig(np.asarray(qp.A, float)), B=_contig(np.asarray(qp.B, float)), BT=BT,
        b=_contig(np.asarray(qp.b, float)), dx0=np.asarray(qp.dx0, float),
        Rinv=Rinv, ST=ST, P_init=P_init, A_init=A_init, C_init=C_init,
        QN=np.asarray(qp.QN, float),
    )


def _linear_element_terms(static: _Static, q: np.ndarray, r: np.ndarray):
    omega = _matvec(static.Rinv, np.asarray(r, float))
    p_init = np.asarray(q, float) - _matvec(static.ST, omega)
    b_init = static.b - _matvec(static.B, omega)
    return p_init, b_init


def _feedforward(Gamma, BT, P_next, b, p_next, r):
    return -_matvec(Gamma, _matvec(BT, p_next + _matvec(P_next, b)) + np.asarray(r, float))


def _cot_elements(static: _Static, Abar, K, k):
    N, nx = Abar.shape[0], Abar.shape[-1]
    bbar = _matvec(static.B, k) + static.b
    A_el = Abar.copy()
    b_el = bbar.copy()
    A_el[0] = 0.0
    b_el[0] = Abar[0] @ static.dx0 + bbar[0]
    return (_contig(A_el), _contig(b_el))


def _assemble(static: _Static, K, k, scan_out_b, p, P, counter):
    N = K.shape[0]
    dx = np.concatenate([static.dx0[None], scan_out_b], axis=0) if N > 0 else static.dx0[None]
    du = _matvec(K, dx[:-1]) + k if N > 0 else np.zeros((0, 0))
    return LqrSolution(dx=dx, du=du, K=K, k=k, P=P, p=p, scan_layers=counter.layers)


def solve(qp: LtvQpData, executor=None) -> LqrSolution:
    """Solve the equality-constrained LTV-QP by reverse CVF / forward COT scans."""
    sol, _ = _solve_impl(qp, executor, record=False)
    return sol


def build_cache(qp: LtvQpData, executor=None, generation: int = 0):
    """Full solve that also records every penalty-invariant intermediate."""
    sol, cache = _solve_impl(qp, executor, record=True)
    cache.generation = generation
    return sol, cache


def _solve_impl(qp: LtvQpData, executor, record: bool):
    executor = executor or default_executor()
    N, nx, nu = qp.N, qp.nx, qp.nu
    batch, static = init_elements(qp)
    counter = LayerCounter()
    out, cvf_aux = tree_scan(
        batch, cvf_kernel, lambda c: cvf_identity(c, nx),
        direction="reverse", executor=executor, counter=counter, record=record,
    )
    P, p = out[0], out[1]
    if N == 0:
        sol = LqrSolution(
            dx=static.dx0[None], du=np.zeros((0, nu)), K=np.zeros((0, nu, nx)),
            k=np.zeros((0, nu)), P=P, p=p, scan_layers=counter.layers,
        )
        cache = LqrCache(0, static, sol.K, np.zeros((0, nu, nu)), P,
                         np.zeros((0, nx, nx)), [], [], counter.layers) if record else None
        return sol, cache

    P_next, p_next = _contig(P[1:]), _contig(p[1:])
    Gamma = spd_inverse(qp.R + static.BT @ P_next @ static.B, "R + B'PB")
    K = _contig(-(Gamma @ (qp.S + static.BT @ P_next @ static.A)))
    k = _feedforward(Gamma, static.BT, P_next, static.b, p_next, qp.r)
    Abar = _contig(static.A + static.B @ K)

    cot_batch = _cot_elements(static, Abar, K, k)
    cot_out, cot_aux = tree_scan(
        cot_batch, cot_kernel, lambda c: cot_identity(c, nx),
        direction="forward", executor=executor, record=record,
    )
    sol = _assemble(static, K, k, cot_out[1], p, P, counter)
    cache = None
    if record:
        cache = LqrCache(
            generation=0, static=static, K=K, Gamma=Gamma, P=P, Abar=Abar,
            cvf_aux=cvf_aux, cot_aux=cot_aux, scan_layers=counter.layers,
        )
    return sol, cache


def solve_cached(lin: LqrLinearTerms, cache: LqrCache, generation: int, executor=None) -> LqrSolution:
    """Re-solve after a linear-terms-only change, replaying the cached scans.

    Bitwise identical to a full solve on the same data; contains no matrix
    inversion or factorization. Raises CacheInvalidatedError when the caller's
    generation stamp (bumped on every penalty change) disagrees.
    """
    if generation != cache.generation:
        raise CacheInvalidatedError("cache invalidated")
    executor = executor or default_executor()
    static = cache.static
    N = static.A.shape[0]
    nx = static.QN.shape[0]
    p_init, b_init = _linear_element_terms(static, lin.q, lin.r)
    p_el = np.concatenate([p_init, np.asarray(lin.qN, float)[None]], axis=0)
    b_el = np.concatenate([b_init, np.zeros((1, nx))], axis=0)
    counter = LayerCounter()
    out, _ = tree_scan(
        (p_el, b_el), cvf_replay_kernel, lambda c: (np.zeros((c, nx)), np.zeros((c, nx))),
        direction="reverse", executor=executor, counter=counter, replay_aux=cache.cvf_aux,
    )
    p = out[0]
    if N == 0:
        return LqrSolution(
            dx=static.dx0[None], du=np.zeros((0, 0)), K=cache.K, k=np.zeros((0, 0)),
            P=cache.P, p=p, scan_layers=counter.layers,
        )
    p_next = _contig(p[1:])
    P_next = _contig(cache.P[1:])
    k = _feedforward(cache.Gamma, static.BT, P_next, static.b, p_next, lin.r)
    _, b_cot = _cot_elements(static, cache.Abar, cache.K, k)
    cot_out, _ = tree_scan(
        (b_cot,), cot_replay_kernel, lambda c: (np.zeros((c, nx)),),
        direction="forward", executor=executor, replay_aux=cache.cot_aux,
    )
    return _assemble(static, cache.K, k, cot_out[0], p, cache.P, counter)
