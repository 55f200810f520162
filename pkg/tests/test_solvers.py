import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from conftest import cp, cone_oracle, gated_oracle, needs_cvxpy
from relugap.arrangements import PatternSet, enumerate_patterns, paired_patterns, sample_patterns
from relugap.core import Dataset, PreconditionError, SolverConfig, generate_dataset
from relugap.polyhedral import signed_rows
from relugap.solvers import (
    SingularityError,
    block_gradients,
    cone_objective,
    exact_fit,
    gated_objective,
    load_solution,
    mask_matrix,
    save_solution,
    solve_cone_constrained,
    solve_gated,
    solve_gated_l2,
    solve_l2_iterative,
    verify_kkt_gated,
)


def instance(n=4, d=2, beta=0.1, seed=0):
    ds = generate_dataset(n, d, beta, seed=seed)
    return ds, enumerate_patterns(ds)


class TestGated:
    @needs_cvxpy
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_interior_point_oracle(self, seed):
        ds, ps = instance(seed=seed)
        sol = solve_gated(ds, ps)
        assert sol.certified
        assert_allclose(sol.objective, gated_oracle(ds, ps.masks), rtol=1e-6)

    def test_certificate_brackets_objective(self):
        ds, ps = instance(n=8, d=3, seed=1)
        sol = solve_gated(ds, ps)
        assert sol.dual_value <= sol.objective
        assert sol.gap <= 1e-6 * sol.objective
        assert_allclose(sol.objective, gated_objective(ds, ps, sol.weights), rtol=1e-12)

    def test_kkt_recomputation(self):
        ds, ps = instance(n=8, d=3, seed=2)
        sol = solve_gated(ds, ps)
        rep = verify_kkt_gated(ds, ps, sol)
        assert rep.max_violation <= 1e-6
        assert (rep.dual_norms[~rep.active] <= ds.beta * (1 + 1e-6)).all()

    def test_large_beta_gives_zero(self):
        ds, ps = instance(seed=3)
        big = ds.replace(beta=10 * np.linalg.norm(block_gradients(ds.X, mask_matrix(ds, ps), ds.y), axis=1).max())
        sol = solve_gated(big, ps)
        assert not sol.weights.any()
        assert_allclose(sol.objective, 0.5 * ds.y @ ds.y)

    def test_zero_labels(self):
        ds, ps = instance(seed=4)
        sol = solve_gated(ds.replace(y=np.zeros(ds.n)), ps)
        assert sol.objective == 0.0 and sol.certified

    def test_zero_beta_interpolates(self):
        ds, ps = instance(n=6, d=3, beta=0.0, seed=5)
        sol = solve_gated(ds, ps)
        assert sol.objective <= 1e-16 * (ds.y @ ds.y)

    def test_more_patterns_never_hurt(self):
        ds = generate_dataset(10, 3, 0.1, seed=6)
        ps = sample_patterns(ds, 30, seed=0)
        values = [solve_gated(ds, ps.prefix(k)).objective for k in (2, 5, 10, 30)]
        assert all(b <= a * (1 + 1e-6) for a, b in zip(values, values[1:]))

    def test_backtracking_agrees_with_fixed_step(self):
        ds, ps = instance(n=8, d=2, seed=7)
        a = solve_gated(ds, ps)
        b = solve_gated(ds, ps, SolverConfig(step_rule="backtracking"))
        assert_allclose(a.objective, b.objective, rtol=1e-6)

    def test_working_set_path(self):
        ds = generate_dataset(30, 4, 0.05, seed=8)
        ps = sample_patterns(ds, 200, seed=1)
        sol = solve_gated(ds, ps)
        assert len(ps) > 32 and sol.certified
        assert verify_kkt_gated(ds, ps, sol).max_violation <= 1e-6

    def test_mask_length_checked(self):
        ds, _ = instance()
        with pytest.raises(PreconditionError):
            solve_gated(ds, PatternSet.from_masks([[1, 0, 1]]))


class TestCone:
    @needs_cvxpy
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_interior_point_oracle(self, seed):
        ds, ps = instance(seed=seed)
        sol = solve_cone_constrained(ds, ps)
        assert sol.certified and sol.cone_feasible
        assert_allclose(sol.objective, cone_oracle(ds, ps.masks), rtol=1e-5)

    def test_solution_is_in_cones(self):
        ds, ps = instance(n=8, d=2, seed=1)
        sol = solve_cone_constrained(ds, ps)
        for m, u, v in zip(ps.masks, sol.U, sol.V):
            G = signed_rows(ds.X, m)
            scale = 1e-8 * max(1.0, np.abs(ds.X @ u).max(), np.abs(ds.X @ v).max())
            assert (G @ u).min() >= -scale and (G @ v).min() >= -scale
        assert_allclose(sol.objective, cone_objective(ds, ps, sol.U, sol.V), rtol=1e-10)

    def test_relaxation_is_no_better_than_gated(self):
        ds, ps = instance(n=8, d=2, seed=2)
        gated = solve_gated(ds, ps)
        cone = solve_cone_constrained(ds, ps)
        assert gated.dual_value <= cone.objective * (1 + 1e-9)

    def test_needs_positive_beta(self):
        ds, ps = instance(beta=0.0)
        with pytest.raises(PreconditionError):
            solve_cone_constrained(ds, ps)


class TestL2:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10**6), beta=st.floats(1e-2, 10.0))
    def test_closed_form_matches_iterative(self, seed, beta):
        ds = generate_dataset(6, 2, beta, seed=seed)
        ps = sample_patterns(ds, 5, seed=seed)
        closed = solve_gated_l2(ds, ps)
        value, W = solve_l2_iterative(ds, ps)
        assert_allclose(closed.value, value, rtol=1e-9)
        assert_allclose(closed.weights, W, atol=1e-6 * (1 + np.abs(W).max()))

    def test_singular_without_regularization(self):
        ds = generate_dataset(6, 1, 0.0, seed=0)
        ps = sample_patterns(ds, 1, seed=0)
        with pytest.raises(SingularityError):
            solve_gated_l2(ds, ps)


class TestExactFit:
    def test_enumerated_set_interpolates_generic_data(self):
        ds, ps = instance(n=6, d=2, seed=1)
        assert exact_fit(ds, ps).fit

    def test_single_pattern_cannot_fit_more_samples_than_features(self):
        ds = generate_dataset(6, 2, seed=2)
        res = exact_fit(ds, sample_patterns(ds, 1, seed=0))
        assert not res.fit and res.weights is None

    def test_zero_labels_fit_trivially(self):
        X = np.eye(2)
        ds = Dataset(X, np.zeros(2))
        assert exact_fit(ds, PatternSet.from_masks([[1, 0]])).fit


def test_solution_round_trip(tmp_path):
    ds, ps = instance(n=6, d=2, seed=3)
    for sol in (solve_gated(ds, ps), solve_cone_constrained(ds, ps)):
        path = tmp_path / "sol.json"
        save_solution(sol, path)
        back = load_solution(path)
        assert type(back) is type(sol)
        assert back.objective == sol.objective
        np.testing.assert_array_equal(back.masks, sol.masks)


def smooth_part(ds, Mf, W):
    r = sum(Mf[i] * (ds.X @ W[i]) for i in range(len(W))) - ds.y
    return 0.5 * float(r @ r)


class TestGatedProperties:
    @needs_cvxpy
    def test_three_patterns_against_oracle(self):
        ds = generate_dataset(4, 2, 0.1, seed=12)
        ps = sample_patterns(ds, 3, seed=0)
        assert len(ps) == 3
        assert_allclose(solve_gated(ds, ps).objective, gated_oracle(ds, ps.masks), rtol=1e-6)

    def test_objective_and_dual_feasibility(self):
        ds, ps = instance(n=7, d=3, seed=9)
        sol = solve_gated(ds, ps)
        W, Mf = sol.weights, mask_matrix(ds, ps)
        recomputed = smooth_part(ds, Mf, W) + ds.beta * np.linalg.norm(W, axis=1).sum()
        assert_allclose(sol.objective, recomputed, rtol=1e-10)
        lam = ds.y - sum(Mf[i] * (ds.X @ W[i]) for i in range(len(W)))
        dual_norms = np.linalg.norm(block_gradients(ds.X, Mf, lam), axis=1)
        assert dual_norms.max() <= ds.beta * (1 + 1e-8)
        # dual value of the residual, rescaled onto the feasible set
        assert sol.objective - sol.dual_value <= 10 * 1e-8 * max(1.0, sol.objective)

    def test_zero_solution_verifies_exactly(self):
        ds, ps = instance(seed=3)
        top = np.linalg.norm(block_gradients(ds.X, mask_matrix(ds, ps), ds.y), axis=1).max()
        big = ds.replace(beta=top)
        sol = solve_gated(big, ps)
        assert verify_kkt_gated(big, ps, sol).max_violation == 0.0

    def test_perturbation_increases_violation(self, rng):
        ds, ps = instance(n=8, d=3, seed=4)
        sol = solve_gated(ds, ps)
        base = verify_kkt_gated(ds, ps, sol).max_violation
        i = sol.support[0]
        step = rng.standard_normal(ds.d)
        sol.weights = sol.weights.copy()
        sol.weights[i] += 1e-2 * step / np.linalg.norm(step)
        assert verify_kkt_gated(ds, ps, sol).max_violation > base

    def test_smooth_gradient_by_finite_differences(self, rng):
        ds, ps = instance(n=6, d=3, seed=5)
        Mf = mask_matrix(ds, ps)
        W = rng.standard_normal((len(ps), 3))
        r = sum(Mf[i] * (ds.X @ W[i]) for i in range(len(W))) - ds.y
        g = block_gradients(ds.X, Mf, r)
        h = 1e-6
        fd = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            E = np.zeros_like(W)
            E[idx] = h
            fd[idx] = (smooth_part(ds, Mf, W + E) - smooth_part(ds, Mf, W - E)) / (2 * h)
        assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_scaling_labels_and_beta_scales_weights(self):
        ds, ps = instance(n=6, d=2, seed=6)
        a = solve_gated(ds, ps)
        b = solve_gated(ds.replace(y=2 * ds.y, beta=2 * ds.beta), ps)
        assert_allclose(b.weights, 2 * a.weights, atol=1e-6 * np.abs(a.weights).max())
        assert_allclose(b.objective, 4 * a.objective, rtol=1e-8)

    @pytest.mark.parametrize("solver", [solve_gated, solve_cone_constrained])
    def test_nested_sets_monotone(self, solver):
        ds = generate_dataset(10, 2, 0.1, seed=7)
        ps = sample_patterns(ds, 12, seed=2)
        sols = [solver(ds, ps.prefix(k)) for k in (1, 3, 6, 12)]
        for small, large in zip(sols, sols[1:]):
            assert large.objective <= small.objective + 2 * max(small.gap, 0.0) + 1e-12


class TestSpecialCases:
    def test_cone_zero_labels(self):
        ds, ps = instance(seed=2)
        sol = solve_cone_constrained(ds.replace(y=np.zeros(ds.n)), ps)
        assert sol.objective == 0.0 and not sol.U.any() and not sol.V.any()

    @needs_cvxpy
    def test_cone_two_patterns_against_oracle(self):
        ds = generate_dataset(4, 2, 0.1, seed=13)
        ps = sample_patterns(ds, 2, seed=1)
        assert_allclose(solve_cone_constrained(ds, ps).objective, cone_oracle(ds, ps.masks), rtol=1e-5)

    def test_l2_zero_labels(self):
        ds, ps = instance(seed=1)
        assert solve_gated_l2(ds.replace(y=np.zeros(ds.n)), ps).value == 0.0

    def test_l2_nested_monotone(self):
        ds = generate_dataset(8, 2, 0.5, seed=3)
        ps = sample_patterns(ds, 10, seed=0)
        values = [solve_gated_l2(ds, ps.prefix(k)).value for k in range(1, len(ps) + 1)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(values, values[1:]))

    @needs_cvxpy
    def test_l2_against_quadratic_program(self):
        ds = generate_dataset(3, 2, 1.0, seed=4)
        ps = sample_patterns(ds, 2, seed=4)
        M = ps.masks.astype(float)
        W = cp.Variable((2, 2))
        out = sum(cp.multiply(M[i], ds.X @ W[i]) for i in range(2))
        prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(out - ds.y) + 0.5 * cp.sum_squares(W)))
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        assert_allclose(solve_gated_l2(ds, ps).value, prob.value, rtol=1e-9)

    def test_paired_patterns_fit_any_labels(self, rng):
        ds = generate_dataset(7, 3, seed=8)
        ps = paired_patterns(ds, seed=1)
        for _ in range(3):
            y = rng.standard_normal(7)
            res = exact_fit(ds.replace(y=y), ps)
            assert res.fit and res.residual <= 1e-8 * np.linalg.norm(y)

    def test_all_ones_pattern_fits_column_space(self, rng):
        X = rng.standard_normal((5, 2))
        ds = Dataset(X, X @ np.array([0.5, -1.0]))
        assert exact_fit(ds, PatternSet.from_masks([[1] * 5])).fit
