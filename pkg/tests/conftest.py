import numpy as np
import pytest

from scanmpc import lqr


def random_ltv_qp(rng, nx, nu, N, nc=0, nf=0, rho_spectral=1.0):
    """Well-scaled random LTV-QP: stable-ish A, SPD costs, roomy constraint offsets."""
    A = rng.standard_normal((N, nx, nx))
    A = A / np.linalg.norm(A, 2, axis=(1, 2), keepdims=True) * rng.uniform(0.5, rho_spectral, (N, 1, 1))
    B = rng.standard_normal((N, nx, nu)) * 0.7
    b = rng.standard_normal((N, nx)) * 0.1
    Qh = rng.standard_normal((N, nx, nx)) * 0.3
    Q = Qh @ Qh.transpose(0, 2, 1) + 0.5 * np.eye(nx)
    Rh = rng.standard_normal((N, nu, nu)) * 0.3
    R = Rh @ Rh.transpose(0, 2, 1) + 0.8 * np.eye(nu)
    S = rng.standard_normal((N, nu, nx)) * 0.05
    QNh = rng.standard_normal((nx, nx)) * 0.3
    QN = QNh @ QNh.T + np.eye(nx)
    C = rng.standard_normal((N, nc, nx))
    D = rng.standard_normal((N, nc, nu))
    f = rng.random((N, nc)) + 0.2
    CN = rng.standard_normal((nf, nx))
    fN = rng.random(nf) + 0.2
    return lqr.LtvQpData(
        A=A, B=B, b=b, Q=Q, R=R, S=S,
        q=rng.standard_normal((N, nx)), r=rng.standard_normal((N, nu)),
        QN=QN, qN=rng.standard_normal(nx),
        C=C, D=D, f=f, CN=CN, fN=fN,
        dx0=rng.standard_normal(nx) * 0.5,
    )


def dense_form(qp):
    """Flatten an LtvQpData into (H, g, A_ineq, b_ineq, A_eq, b_eq)."""
    N, nx, nu = qp.N, qp.nx, qp.nu
    nv = (N + 1) * nx + N * nu
    H = np.zeros((nv, nv))
    g = np.zeros(nv)
    ix = lambda i: slice(i * nx, (i + 1) * nx)              # noqa: E731
    iu = lambda i: slice((N + 1) * nx + i * nu, (N + 1) * nx + (i + 1) * nu)  # noqa: E731
    for i in range(N):
        H[ix(i), ix(i)] += qp.Q[i]
        H[iu(i), iu(i)] += qp.R[i]
        H[iu(i), ix(i)] += qp.S[i]
        H[ix(i), iu(i)] += qp.S[i].T
        g[ix(i)] += qp.q[i]
        g[iu(i)] += qp.r[i]
    H[ix(N), ix(N)] += qp.QN
    g[ix(N)] += qp.qN
    ne = (N + 1) * nx
    Ae = np.zeros((ne, nv))
    be = np.zeros(ne)
    Ae[0:nx, ix(0)] = np.eye(nx)
    be[0:nx] = qp.dx0
    for i in range(N):
        row = slice((i + 1) * nx, (i + 2) * nx)
        Ae[row, ix(i + 1)] = np.eye(nx)
        Ae[row, ix(i)] = -qp.A[i]
        Ae[row, iu(i)] = -qp.B[i]
        be[row] = qp.b[i]
    mi = N * qp.nc + qp.nf
    Ai = np.zeros((mi, nv))
    bi = np.zeros(mi)
    for i in range(N):
        rows = slice(i * qp.nc, (i + 1) * qp.nc)
        Ai[rows, ix(i)] = qp.C[i]
        Ai[rows, iu(i)] = qp.D[i]
        bi[rows] = qp.f[i]
    if qp.nf:
        Ai[N * qp.nc:, ix(N)] = qp.CN
        bi[N * qp.nc:] = qp.fN
    return H, g, Ai, bi, Ae, be


def qp_objective(qp, dx, du):
    J = 0.0
    for i in range(qp.N):
        v = np.concatenate([dx[i], du[i]])
        Hs = np.block([[qp.Q[i], qp.S[i].T], [qp.S[i], qp.R[i]]])
        J += 0.5 * v @ Hs @ v + qp.q[i] @ dx[i] + qp.r[i] @ du[i]
    J += 0.5 * dx[-1] @ qp.QN @ dx[-1] + qp.qN @ dx[-1]
    return float(J)


def scalar_qp(**overrides):
    """The 1-stage scalar x1 = x0 + u0 testbed with unit costs."""
    base = dict(
        A=np.ones((1, 1, 1)), B=np.ones((1, 1, 1)), b=np.zeros((1, 1)),
        Q=np.ones((1, 1, 1)), R=np.ones((1, 1, 1)), S=np.zeros((1, 1, 1)),
        q=np.zeros((1, 1)), r=np.zeros((1, 1)), QN=np.ones((1, 1)), qN=np.zeros(1),
        C=np.zeros((1, 0, 1)), D=np.zeros((1, 0, 1)), f=np.zeros((1, 0)),
        CN=np.zeros((0, 1)), fN=np.zeros(0), dx0=np.ones(1),
    )
    base.update(overrides)
    return lqr.LtvQpData(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
