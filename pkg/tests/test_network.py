import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from relugap.arrangements import PatternSet, enumerate_patterns
from relugap.core import Dataset, DimensionMismatchError, LoadError, PreconditionError, generate_dataset
from relugap.network import (
    NetworkParams,
    TrainingDivergedError,
    activation_masks,
    convex_to_network,
    init_network,
    load_network,
    min_norm_subgradient,
    network_gradient,
    network_loss,
    network_output,
    network_to_convex_patterns,
    pattern_drift,
    save_network,
    train_gd,
)
from relugap.solvers import solve_cone_constrained


def loop_loss(X, y, beta, U, alpha):
    total = 0.0
    for i in range(len(y)):
        out = sum(max(float(X[i] @ U[j]), 0.0) * alpha[j] for j in range(len(alpha)))
        total += 0.5 * (out - y[i]) ** 2
    return total + 0.5 * beta * (float((U**2).sum()) + float((alpha**2).sum()))


class TestForward:
    def test_one_dimensional_by_hand(self):
        ds = Dataset(np.array([[1.0], [-2.0], [3.0]]), np.array([1.0, 0.0, 2.0]), beta=0.5)
        p = NetworkParams([[1.0], [-1.0]], [2.0, 1.0])
        # outputs: x=1 -> 2; x=-2 -> 2; x=3 -> 6
        assert_allclose(network_output(ds.X, p), [2.0, 2.0, 6.0])
        assert_allclose(network_loss(ds, p), 0.5 * (1 + 4 + 16) + 0.25 * (2 + 5))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), m=st.integers(1, 6))
    def test_loss_matches_loops(self, seed, m):
        ds = generate_dataset(7, 3, 0.2, seed=seed)
        p = init_network(m, 3, seed)
        assert_allclose(network_loss(ds, p), loop_loss(ds.X, ds.y, ds.beta, p.U, p.alpha), rtol=1e-12)

    def test_tie_counts_as_active(self):
        assert_array_equal(activation_masks(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])), [[True]])

    def test_init_scale_and_determinism(self):
        a = init_network(400, 50, 3)
        assert_allclose(a.U.var(), 1 / 400, rtol=0.05)
        assert_array_equal(a.U, init_network(400, 50, 3).U)

    def test_shape_checks(self):
        with pytest.raises(DimensionMismatchError):
            NetworkParams(np.ones((2, 3)), np.ones(3))
        with pytest.raises((DimensionMismatchError, PreconditionError)):
            network_loss(generate_dataset(4, 2, seed=0), init_network(3, 5, 0))


class TestGradient:
    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        ds = generate_dataset(8, 3, 0.3, seed=seed)
        p = init_network(5, 3, seed + 10)
        gU, ga = network_gradient(ds, p)
        h = 1e-6
        for j in range(5):
            for k in range(3):
                up, dn = p.copy(), p.copy()
                up.U[j, k] += h
                dn.U[j, k] -= h
                assert_allclose(gU[j, k], (network_loss(ds, up) - network_loss(ds, dn)) / (2 * h), atol=1e-6)
            up, dn = p.copy(), p.copy()
            up.alpha[j] += h
            dn.alpha[j] -= h
            assert_allclose(ga[j], (network_loss(ds, up) - network_loss(ds, dn)) / (2 * h), atol=1e-6)

    def test_min_norm_equals_gradient_away_from_kinks(self):
        ds = generate_dataset(8, 3, 0.3, seed=1)
        p = init_network(4, 3, 2)
        gU, ga = network_gradient(ds, p)
        mU, ma = min_norm_subgradient(ds, p)
        assert_allclose(mU, gU, atol=1e-14)
        assert_allclose(ma, ga, atol=1e-14)

    def test_min_norm_at_kink_is_not_longer(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        ds = Dataset(X, np.array([1.0, -1.0]), beta=0.1)
        # neuron exactly on the first sample's hyperplane
        p = NetworkParams([[0.0, 1.0]], [1.0])
        gU, _ = network_gradient(ds, p)
        mU, _ = min_norm_subgradient(ds, p)
        assert np.linalg.norm(mU) <= np.linalg.norm(gU) + 1e-15


class TestTraining:
    def test_backtracking_is_monotone(self):
        ds = generate_dataset(20, 3, 0.01, seed=0)
        trace, _ = train_gd(ds, init_network(10, 3, 1), steps=300)
        assert np.all(np.diff(trace.losses) <= 1e-12 * trace.losses[:-1])

    def test_converges_on_small_problem(self):
        ds = generate_dataset(6, 2, 0.1, seed=4)
        trace, p = train_gd(ds, init_network(8, 2, 5), steps=5000)
        assert trace.status == "converged" and trace.converged
        gU, ga = min_norm_subgradient(ds, p)
        assert np.sqrt((gU**2).sum() + (ga**2).sum()) <= 1e-6 * (1 + trace.losses[-1])

    def test_fixed_step(self):
        ds = generate_dataset(20, 3, 0.01, seed=1)
        trace, _ = train_gd(ds, init_network(10, 3, 1), lr=1e-3, steps=200)
        assert trace.losses[-1] < trace.losses[0]
        assert trace.steps == 200 and trace.status in {"max_steps", "converged"}

    def test_divergence_reported_with_trace(self):
        ds = generate_dataset(20, 3, 0.01, seed=2)
        with pytest.raises(TrainingDivergedError) as info:
            train_gd(ds, init_network(10, 3, 1), lr=50.0, steps=500)
        assert info.value.trace.status == "diverged"

    def test_snapshots_and_drift(self):
        ds = generate_dataset(30, 4, 1e-3, seed=5)
        trace, p = train_gd(ds, init_network(12, 4, 6), steps=95, snapshot_every=20, stop_at_stationary=False)
        assert trace.snapshot_steps == [0, 20, 40, 60, 80, 95]
        expected = float((trace.pattern_snapshots[0] != trace.pattern_snapshots[-1]).sum()) / (12 * 30)
        assert_allclose(pattern_drift(trace), expected)
        assert_allclose(trace.drift_fraction, expected)
        assert_allclose(trace.drift[-1], expected)
        assert_array_equal(trace.pattern_snapshots[-1], activation_masks(ds.X, p.U))

    def test_csv(self, tmp_path):
        ds = generate_dataset(6, 2, 0.1, seed=0)
        trace, _ = train_gd(ds, init_network(3, 2, 0), steps=5, stop_at_stationary=False)
        trace.to_csv(tmp_path / "t.csv")
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert rows[0] == "step,loss,drift" and len(rows) == 7

    def test_bad_arguments(self):
        ds = generate_dataset(6, 2, 0.1, seed=0)
        p = init_network(3, 2, 0)
        for kwargs in ({"steps": 0}, {"lr": -1.0}, {"lr": "adam"}):
            with pytest.raises(PreconditionError):
                train_gd(ds, p, **kwargs)


class TestConvexMapping:
    @pytest.mark.parametrize("seed", range(4))
    def test_loss_identity(self, seed):
        ds = generate_dataset(6, 2, 0.1, seed=seed)
        ps = enumerate_patterns(ds)
        sol = solve_cone_constrained(ds, ps)
        net = convex_to_network(sol, ps)
        assert net.m == int((np.linalg.norm(sol.U, axis=1) > 0).sum() + (np.linalg.norm(sol.V, axis=1) > 0).sum())
        assert_allclose(network_loss(ds, net), sol.objective, rtol=1e-9)
        # balanced: each neuron has |alpha| = ||u||
        assert_allclose(np.abs(net.alpha), np.linalg.norm(net.U, axis=1), rtol=1e-12)

    def test_zero_solution_gives_empty_network(self):
        ds = generate_dataset(4, 2, 100.0, seed=0)
        ps = enumerate_patterns(ds)
        net = convex_to_network(solve_cone_constrained(ds, ps))
        assert net.m == 0
        assert_allclose(network_loss(ds, net), 0.5 * ds.y @ ds.y)

    def test_refuses_infeasible_or_mismatched(self):
        ds = generate_dataset(5, 2, 0.1, seed=1)
        ps = enumerate_patterns(ds)
        sol = solve_cone_constrained(ds, ps)
        with pytest.raises(PreconditionError):
            convex_to_network(sol, PatternSet.from_masks(ps.masks[::-1]))
        sol.cone_feasible = False
        with pytest.raises(PreconditionError):
            convex_to_network(sol)

    def test_network_patterns(self):
        ds = generate_dataset(5, 2, seed=2)
        p = NetworkParams(np.vstack([np.eye(2), np.eye(2)]), np.ones(4))
        ps = network_to_convex_patterns(p, ds)
        assert len(ps) == 2 and ps.provenance == "network"


class TestSerialization:
    def test_round_trip(self, tmp_path):
        p = init_network(4, 3, 7)
        save_network(p, tmp_path / "n.csv")
        q = load_network(tmp_path / "n.csv")
        assert_array_equal(q.U, p.U)
        assert_array_equal(q.alpha, p.alpha)

    def test_empty_network(self, tmp_path):
        p = NetworkParams(np.zeros((0, 2)), np.zeros(0))
        save_network(p, tmp_path / "n.csv")
        assert load_network(tmp_path / "n.csv").m == 0

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.csv").write_text("2,2\n1,2\n3,4\n1\n")
        with pytest.raises(DimensionMismatchError):
            load_network(tmp_path / "bad.csv")
        (tmp_path / "bad2.csv").write_text("x\n")
        with pytest.raises(LoadError):
            load_network(tmp_path / "bad2.csv")


class TestNetworkExamples:
    def test_zero_parameters_give_half_label_energy(self):
        ds = generate_dataset(6, 3, 0.2, seed=0)
        p = NetworkParams(np.zeros((4, 3)), np.zeros(4))
        assert network_loss(ds, p) == pytest.approx(0.5 * float(ds.y @ ds.y))

    def test_planted_teacher_fits_exactly(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((10, 3))
        teacher = NetworkParams(rng.standard_normal((2, 3)), np.array([1.0, -0.5]))
        ds = Dataset(X, network_output(X, teacher), beta=0.0)
        assert network_loss(ds, teacher) == pytest.approx(0.0, abs=1e-24)

    def test_zero_labels_shrink_weights(self):
        ds = Dataset(np.random.default_rng(2).standard_normal((5, 2)), np.zeros(5), beta=0.5)
        p = init_network(4, 2, seed=2)
        trace, q = train_gd(ds, p, lr=0.05, steps=200, stop_at_stationary=False)
        assert np.all(np.diff(trace.losses) <= 1e-15)
        assert np.linalg.norm(q.U) < np.linalg.norm(p.U)
        assert np.linalg.norm(q.alpha) < np.linalg.norm(p.alpha)

    def test_single_neuron_stationary_point(self):
        beta = 0.3
        ds = Dataset(np.array([[1.0]]), np.array([1.0]), beta=beta)
        s = np.sqrt(1 - beta)
        p = NetworkParams(np.array([[s]]), np.array([s]))
        gU, ga = network_gradient(ds, p)
        assert_allclose(gU, 0.0, atol=1e-14)
        assert_allclose(ga, 0.0, atol=1e-14)
        assert network_loss(ds, p) == pytest.approx(beta - beta**2 / 2)

    def test_drift_counts_flipped_indicators(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        ds = Dataset(X, np.array([1.0, -1.0, 0.5]), beta=0.1)
        p = NetworkParams(np.array([[0.01, 1.0], [0.02, -1.0]]), np.array([-3.0, -3.0]))
        trace, q = train_gd(ds, p, lr=0.5, steps=1, stop_at_stationary=False)
        first = activation_masks(X, p.U)
        last = activation_masks(X, q.U)
        assert (first != last).sum() > 0
        assert pattern_drift(trace) == pytest.approx((first != last).sum() / 6)

    def test_zero_steps_means_zero_drift(self):
        ds = generate_dataset(6, 2, 0.1, seed=3)
        p = init_network(3, 2, seed=3)
        trace, q = train_gd(ds, p, lr=1e-12, steps=1, stop_at_stationary=False)
        assert pattern_drift(trace) == 0.0

    def test_identical_neurons_share_a_pattern(self):
        ds = generate_dataset(6, 2, seed=4)
        u = np.array([0.4, -1.2])
        ps = network_to_convex_patterns(NetworkParams(np.stack([u, u]), np.ones(2)), ds)
        assert len(ps) == 1

    def test_opposite_neurons_give_complementary_masks(self):
        ds = generate_dataset(6, 2, seed=5)
        u = np.array([0.7, 0.3])
        ps = network_to_convex_patterns(NetworkParams(np.stack([u, -u]), np.ones(2)), ds)
        assert len(ps) == 2
        assert_array_equal(ps.masks[0], ~ps.masks[1])

    def test_convex_solve_on_trained_patterns_matches_or_beats_training(self):
        ds = generate_dataset(8, 2, 0.1, seed=6)
        trace, q = train_gd(ds, init_network(10, 2, seed=6), steps=2000)
        ps = network_to_convex_patterns(q, ds)
        sol = solve_cone_constrained(ds, ps)
        mapped = convex_to_network(sol)
        assert network_loss(ds, mapped) <= trace.losses[-1] * (1 + 1e-6)

    def test_init_variance_within_standard_errors(self):
        m, d = 400, 50
        p = init_network(m, d, seed=7)
        vals = np.concatenate([p.U.ravel(), p.alpha])
        var = vals.var()
        se = np.sqrt(2.0 / vals.size) / m
        assert abs(var - 1.0 / m) <= 5 * se
