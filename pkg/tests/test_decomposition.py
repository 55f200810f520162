import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from conftest import decomposition_oracle, needs_cvxpy
from relugap.arrangements import chamber_witness, sample_patterns
from relugap.core import PreconditionError, generate_dataset
from relugap.decomposition import (
    chebyshev_feasibility,
    cone_sharpness,
    decompose_min_norm,
    feasibility_decomposition,
    lambda_construction_check,
)
from relugap.polyhedral import signed_rows
from relugap.solvers import cone_objective, solve_gated
from relugap.verification import wedge_dataset, wedge_sharpness


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def in_cone(ds, D, u, tol=1e-9):
    return (signed_rows(ds.X, D) @ u).min() >= -tol * max(1.0, np.linalg.norm(u))


class TestPlanarWedge:
    @pytest.mark.parametrize(
        "phi0,theta,psi",
        [(0.0, 1.0, 2.0), (0.3, 0.5, -1.0), (1.0, 2.5, 4.0), (-2.0, 0.2, 0.0), (0.0, 1.0, 0.5)],
    )
    def test_matches_law_of_sines(self, phi0, theta, psi):
        ds = wedge_dataset(phi0, theta)
        D = np.ones(2, dtype=bool)
        dec = decompose_min_norm(ds, D, unit(psi))
        assert dec.certified
        assert_allclose(dec.sharpness, wedge_sharpness(phi0, theta, psi), rtol=1e-6)

    def test_wedge_contains_expected_rays(self):
        ds = wedge_dataset(0.4, 1.1)
        D = np.ones(2, dtype=bool)
        for t in (0.4, 0.9, 1.5):
            assert in_cone(ds, D, unit(t))
        assert not in_cone(ds, D, unit(2.0))

    @needs_cvxpy
    def test_closed_form_agrees_with_conic_solver(self):
        ds = wedge_dataset(0.2, 0.7)
        for psi in np.linspace(0, 2 * math.pi, 9, endpoint=False):
            value = decomposition_oracle(ds, np.ones(2, dtype=bool), unit(psi))
            assert_allclose(value, wedge_sharpness(0.2, 0.7, psi), rtol=1e-6)


class TestDecomposition:
    @needs_cvxpy
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_conic_solver(self, seed):
        ds = generate_dataset(6, 3, seed=seed)
        D = sample_patterns(ds, 1, seed=seed).masks[0]
        w = np.random.default_rng(seed).standard_normal(3)
        dec = decompose_min_norm(ds, D, w)
        assert dec.certified
        assert_allclose(dec.norm_sum, decomposition_oracle(ds, D, w), rtol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
    def test_feasible_and_scale_invariant(self, seed, scale):
        ds = generate_dataset(5, 3, seed=seed)
        D = sample_patterns(ds, 1, seed=seed).masks[0]
        w = np.random.default_rng(seed).standard_normal(3)
        dec = decompose_min_norm(ds, D, w)
        assert_allclose(dec.u - dec.v, w, atol=1e-9 * np.linalg.norm(w))
        assert in_cone(ds, D, dec.u) and in_cone(ds, D, dec.v)
        assert dec.sharpness >= 1.0
        assert dec.lower_bound <= dec.norm_sum * (1 + 1e-12)
        big = decompose_min_norm(ds, D, scale * w)
        assert_allclose(big.sharpness, dec.sharpness, rtol=1e-5)

    def test_member_of_cone_has_unit_sharpness(self):
        ds = generate_dataset(6, 3, seed=1)
        D = sample_patterns(ds, 1, seed=1).masks[0]
        w = chamber_witness(ds.X, D)
        for z in (w, -w):
            dec = decompose_min_norm(ds, D, z)
            assert_allclose(dec.sharpness, 1.0, atol=1e-9)


class TestChebyshev:
    def test_requires_unit_vector(self):
        ds = generate_dataset(4, 2, seed=0)
        with pytest.raises(PreconditionError):
            chebyshev_feasibility(ds, np.ones(4, dtype=bool), np.array([2.0, 0.0]), 0.1)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_monotone_in_eps(self, seed):
        ds = generate_dataset(6, 3, seed=seed)
        D = sample_patterns(ds, 1, seed=seed).masks[0]
        z = np.random.default_rng(seed).standard_normal(3)
        z /= np.linalg.norm(z)
        norms = [chebyshev_feasibility(ds, D, z, e).norm for e in np.logspace(-4, 0, 9)]
        assert all(b >= a - 1e-12 for a, b in zip(norms, norms[1:]))

    def test_split_bound_and_sharpness_bracket(self):
        ds = generate_dataset(5, 2, seed=3)
        D = sample_patterns(ds, 2, seed=3).masks[1]
        z = unit(0.7)
        rep = cone_sharpness(ds, D, z)
        assert 1.0 <= rep.value <= rep.upper_bound * (1 + 1e-9)
        cheb = chebyshev_feasibility(ds, D, z, rep.eps_star)
        v1, v2 = feasibility_decomposition(cheb.u, z, rep.eps_star)
        assert_allclose(v1 - v2, z, atol=1e-12)
        assert in_cone(ds, D, v1) and in_cone(ds, D, v2)
        assert np.linalg.norm(v1) + np.linalg.norm(v2) <= 1 + 1 / rep.eps_star + 1e-9


class TestLambdaCheck:
    def test_feasible_point_satisfies_constraints(self):
        b = np.random.default_rng(0).standard_normal(30)
        res = lambda_construction_check(30, b, seed=1)
        X = np.random.default_rng(1).standard_normal((30, 30))
        assert res.feasible
        assert (X @ res.lam - b).min() >= -1e-9 * np.linalg.norm(b)

    def test_success_rate_at_admissible_size(self):
        d = 100
        wins = 0
        for s in range(20):
            b = np.random.default_rng(1000 + s).standard_normal(d)
            b *= 2 * math.sqrt(d) / np.linalg.norm(b)
            wins += lambda_construction_check(d, b, seed=s).success
        assert wins >= 18

    def test_length_checked(self):
        with pytest.raises(PreconditionError):
            lambda_construction_check(3, np.ones(2), seed=0)


class TestLambdaExamples:
    @pytest.mark.parametrize("b", [np.zeros(10), -np.ones(10)])
    def test_nonpositive_target_needs_nothing(self, b):
        res = lambda_construction_check(10, b, seed=0)
        assert res.feasible and res.norm == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.slow
    def test_success_rate_many_seeds(self):
        d = 100
        wins = 0
        for s in range(200):
            b = np.random.default_rng(10_000 + s).standard_normal(d)
            b *= 2 * math.sqrt(d) / np.linalg.norm(b)
            wins += lambda_construction_check(d, b, seed=s).success
        assert wins >= 190


class TestDecompositionExamples:
    def test_positive_homogeneity(self):
        ds = generate_dataset(8, 3, seed=4)
        D = sample_patterns(ds, 1, seed=4).masks[0]
        w = np.random.default_rng(1).standard_normal(3)
        a = decompose_min_norm(ds, D, w)
        b = decompose_min_norm(ds, D, 3 * w)
        assert_allclose(b.u, 3 * a.u, atol=1e-6 * np.linalg.norm(b.u))
        assert_allclose(b.v, 3 * a.v, atol=1e-6 * np.linalg.norm(b.v))
        assert_allclose(b.sharpness, a.sharpness, rtol=1e-6)

    def test_zero_margin_is_always_feasible(self):
        ds = generate_dataset(8, 3, seed=5)
        D = sample_patterns(ds, 1, seed=5).masks[0]
        z = np.array([1.0, 0.0, 0.0])
        res = chebyshev_feasibility(ds, D, z, 0.0)
        assert res.feasible and res.norm == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.slow
    def test_sharpness_below_width_constant(self):
        d, n = 50, 50
        limit = 1 + 80 * math.sqrt(math.log(2 * n))
        for s in range(100):
            ds = generate_dataset(n, d, seed=s)
            D = sample_patterns(ds, 1, seed=s).masks[0]
            z = np.random.default_rng(s + 1).standard_normal(d)
            rep = cone_sharpness(ds, D, z / np.linalg.norm(z), grid=[])
            assert rep.value <= limit

    def test_gated_blocks_split_within_sharpness(self):
        ds = generate_dataset(8, 2, 0.1, seed=2)
        ps = sample_patterns(ds, 6, seed=2)
        gated = solve_gated(ds, ps)
        U = np.zeros_like(gated.weights)
        V = np.zeros_like(gated.weights)
        worst = 1.0
        for i, (D, w) in enumerate(zip(ps.masks, gated.weights)):
            if np.linalg.norm(w) == 0:
                continue
            dec = decompose_min_norm(ds, D, w)
            U[i], V[i] = dec.u, dec.v
            worst = max(worst, dec.sharpness)
        assert cone_objective(ds, ps, U, V) <= worst * gated.objective * (1 + 1e-9)
