import numpy as np
import pytest

from relugap.core import generate_dataset

try:
    import cvxpy as cp
except ImportError:  # pragma: no cover
    cp = None


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")


@pytest.fixture
def small_ds():
    return generate_dataset(6, 2, beta=0.1, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


def gated_oracle(ds, masks):
    """Interior-point value of the gated group lasso."""
    masks = np.asarray(masks, dtype=float)
    P, d = masks.shape[0], ds.d
    W = cp.Variable((P, d))
    out = sum(cp.multiply(masks[i], ds.X @ W[i]) for i in range(P))
    obj = 0.5 * cp.sum_squares(out - ds.y) + ds.beta * sum(cp.norm(W[i]) for i in range(P))
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


def cone_oracle(ds, masks):
    """Interior-point value of the cone-constrained relaxation."""
    masks = np.asarray(masks, dtype=bool)
    P, d = masks.shape[0], ds.d
    U = cp.Variable((P, d))
    V = cp.Variable((P, d))
    cons = []
    out = 0
    for i in range(P):
        G = np.where(masks[i], 1.0, -1.0)[:, None] * ds.X
        cons += [G @ U[i] >= 0, G @ V[i] >= 0]
        out = out + cp.multiply(masks[i].astype(float), ds.X @ (U[i] - V[i]))
    reg = sum(cp.norm(U[i]) + cp.norm(V[i]) for i in range(P))
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(out - ds.y) + ds.beta * reg), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


def decomposition_oracle(ds, D, w):
    """Interior-point value of min ||u|| + ||v|| over u - v = w in the pattern cone."""
    G = np.where(np.asarray(D, dtype=bool), 1.0, -1.0)[:, None] * ds.X
    u = cp.Variable(ds.d)
    prob = cp.Problem(cp.Minimize(cp.norm(u) + cp.norm(u - w)), [G @ u >= 0, G @ (u - w) >= 0])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


needs_cvxpy = pytest.mark.skipif(cp is None, reason="cvxpy not installed")
