import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from relugap.polyhedral import ConeProjector, least_distance, nnls, project_cone, signed_rows


def kkt_nnls(A, b, x, tol=1e-9):
    g = A.T @ (A @ x - b)
    scale = np.linalg.norm(A) * (np.linalg.norm(b) + 1)
    return (x >= 0).all() and (g >= -tol * scale).all() and abs(x @ g) <= tol * scale * (1 + np.abs(x).sum())


class TestNNLS:
    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 12), k=st.integers(1, 12), seed=st.integers(0, 10**6))
    def test_kkt_conditions(self, m, k, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((m, k))
        b = rng.standard_normal(m)
        x, _ = nnls(A, b)
        assert kkt_nnls(A, b, x)

    def test_warm_start_gives_same_solution(self, rng):
        A = rng.standard_normal((15, 8))
        b = rng.standard_normal(15)
        x, P = nnls(A, b)
        x2, _ = nnls(A, b, passive=P)
        assert_allclose(x, x2, atol=1e-12)

    def test_rank_deficient(self):
        A = np.array([[1.0, 1.0], [1.0, 1.0]])
        x, _ = nnls(A, np.array([2.0, 2.0]))
        assert_allclose(A @ x, [2.0, 2.0], atol=1e-12)


class TestLeastDistance:
    def test_matches_slsqp(self, rng):
        for _ in range(10):
            G = rng.standard_normal((6, 3))
            h = rng.standard_normal(6)
            x = least_distance(G, h)
            res = minimize(
                lambda z: z @ z,
                np.ones(3),
                jac=lambda z: 2 * z,
                constraints=[{"type": "ineq", "fun": lambda z: G @ z - h, "jac": lambda z: G}],
                method="SLSQP",
                options={"ftol": 1e-14, "maxiter": 500},
            )
            if x is None:
                assert not res.success or (G @ res.x - h).min() < -1e-6
            else:
                assert (G @ x - h).min() >= -1e-9
                assert x @ x <= res.fun + 1e-7

    def test_infeasible(self):
        G = np.array([[1.0], [-1.0]])
        assert least_distance(G, np.array([1.0, 1.0])) is None

    def test_trivially_feasible(self):
        assert_allclose(least_distance(np.ones((2, 3)), -np.ones(2)), 0.0)


class TestProjection:
    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 8), d=st.integers(1, 4), seed=st.integers(0, 10**6))
    def test_moreau_decomposition(self, n, d, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, d))
        G = signed_rows(X, rng.random(n) < 0.5)
        z = rng.standard_normal(d)
        p, _ = project_cone(G, z)
        q = z - p
        tol = 1e-9 * (1 + np.linalg.norm(z))
        assert (G @ p).min() >= -tol
        # the remainder lies in the polar cone and is orthogonal to the projection
        assert abs(p @ q) <= tol
        for _ in range(5):
            u, _ = project_cone(G, rng.standard_normal(d))
            assert u @ q <= tol * (1 + np.linalg.norm(u))

    def test_projector_agrees_with_function(self, rng):
        X = rng.standard_normal((7, 3))
        G = signed_rows(X, np.arange(7) % 2 == 0)
        proj = ConeProjector(G)
        for _ in range(5):
            z = rng.standard_normal(3)
            assert_allclose(proj(z), project_cone(G, z)[0], atol=1e-12)
            assert proj.violation(proj(z)) <= 1e-12

    def test_point_inside_is_fixed(self):
        G = np.eye(2)
        assert_allclose(project_cone(G, np.array([1.0, 2.0]))[0], [1.0, 2.0])

    def test_signed_rows(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert_allclose(signed_rows(X, [True, False]), [[1.0, 2.0], [-3.0, -4.0]])


@pytest.mark.parametrize("n", [1, 3])
def test_projection_of_zero(n):
    G = np.random.default_rng(n).standard_normal((n, 2))
    assert_allclose(project_cone(G, np.zeros(2))[0], 0.0)
