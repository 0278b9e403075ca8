"""HMM construction, smoothing, EM, few-shot MLE, traffic graphs."""

import numpy as np
import pytest

from lveval import hmm
from lveval.errors import DegenerateLikelihoodError, FitError, FormatError

from oracles import hmm_enumeration_posterior, random_hmm


class TestCycleTeacher:
    def test_dominant_mass(self):
        m = hmm.make_cycle_teacher(4, 1e-2, emission_seed=0, n_neurons=70)
        np.testing.assert_allclose(np.diag(m.A[:, list(range(1, 4)) + [0]]), 1.01 / 1.04)
        np.testing.assert_allclose(m.pi, 0.25)
        assert m.B.shape == (4, 70)

    def test_large_epsilon_tends_uniform(self):
        m = hmm.make_cycle_teacher(2, 1e6, emission_seed=0, n_neurons=3)
        np.testing.assert_allclose(m.A, 0.5, atol=1e-5)

    @pytest.mark.parametrize("M,eps", [(2, 0.1), (5, 1e-3), (9, 3.7)])
    def test_rows_sum_to_one(self, M, eps):
        m = hmm.make_cycle_teacher(M, eps, emission_seed=1, n_neurons=2)
        np.testing.assert_allclose(m.A.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_invalid(self):
        with pytest.raises(FormatError):
            hmm.make_cycle_teacher(1, 0.1, emission_seed=0, n_neurons=2)
        with pytest.raises(FormatError):
            hmm.make_cycle_teacher(4, 0.0, emission_seed=0, n_neurons=2)


class TestSampleHmm:
    def test_shapes_and_binary(self):
        m = hmm.make_cycle_teacher(4, 1e-2, emission_seed=2, n_neurons=70)
        paths, counts = hmm.sample_hmm(m, S=50, T=10, seed=3)
        assert paths.shape == (50, 10) and counts.shape == (50, 10, 70)
        assert set(np.unique(counts)) <= {0, 1}

    def test_all_zero_emissions(self):
        m = hmm.HmmModel(A=np.eye(2), B=np.zeros((2, 4)), pi=np.array([0.5, 0.5]))
        _, counts = hmm.sample_hmm(m, S=10, T=5, seed=0)
        assert counts.sum() == 0

    def test_deterministic_cycle_path(self):
        M = 4
        A = np.zeros((M, M))
        A[np.arange(M), (np.arange(M) + 1) % M] = 1.0
        pi = np.zeros(M)
        pi[0] = 1.0
        m = hmm.HmmModel(A=A, B=np.full((M, 2), 0.5), pi=pi)
        paths, _ = hmm.sample_hmm(m, S=3, T=9, seed=1)
        expect = np.arange(9) % M
        for row in paths:
            assert np.array_equal(row, expect)

    def test_deterministic_given_seed(self):
        m = hmm.make_cycle_teacher(3, 0.05, emission_seed=1, n_neurons=5)
        a = hmm.sample_hmm(m, S=7, T=4, seed=9)
        b = hmm.sample_hmm(m, S=7, T=4, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestForwardBackward:
    def test_matches_enumeration_small(self):
        rng = np.random.default_rng(0)
        A, B, pi = random_hmm(rng, M=2, N=2)
        model = hmm.HmmModel(A=A, B=B, pi=pi)
        X = rng.integers(0, 2, size=(3, 2))
        xi, ll = hmm.forward_backward(model, X)
        xi_ref, ll_ref = hmm_enumeration_posterior(A, B, pi, X)
        np.testing.assert_allclose(xi, xi_ref, atol=1e-10)
        np.testing.assert_allclose(ll, ll_ref, atol=1e-10)

    def test_matches_enumeration_100_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            M = int(rng.integers(2, 5))
            N = int(rng.integers(1, 4))
            T = int(rng.integers(2, 7))
            A, B, pi = random_hmm(rng, M, N)
            model = hmm.HmmModel(A=A, B=B, pi=pi)
            X = rng.integers(0, 2, size=(T, N))
            xi, ll = hmm.forward_backward(model, X)
            xi_ref, ll_ref = hmm_enumeration_posterior(A, B, pi, X)
            np.testing.assert_allclose(xi, xi_ref, atol=1e-10)
            np.testing.assert_allclose(ll, ll_ref, atol=1e-10)

    def test_identity_dynamics_point_mass(self):
        M = 3
        pi = np.zeros(M)
        pi[1] = 1.0
        rng = np.random.default_rng(1)
        model = hmm.HmmModel(A=np.eye(M), B=rng.uniform(0.2, 0.8, (M, 4)), pi=pi)
        X = rng.integers(0, 2, size=(5, 4))
        xi, _ = hmm.forward_backward(model, X)
        expect = np.zeros((5, M))
        expect[:, 1] = 1.0
        np.testing.assert_allclose(xi, expect, atol=1e-12)

    def test_indistinguishable_states_uniform(self):
        M = 3
        A = np.full((M, M), 1.0 / M)
        B = np.tile(np.array([[0.3, 0.7]]), (M, 1))
        model = hmm.HmmModel(A=A, B=B, pi=np.full(M, 1.0 / M))
        X = np.array([[1, 0], [0, 1], [1, 1]])
        xi, _ = hmm.forward_backward(model, X)
        np.testing.assert_allclose(xi, 1.0 / M, atol=1e-12)

    def test_degenerate_likelihood(self):
        model = hmm.HmmModel(A=np.eye(1), B=np.zeros((1, 1)), pi=np.ones(1))
        with pytest.raises(DegenerateLikelihoodError):
            hmm.forward_backward(model, np.array([[1]]))


class TestFitEm:
    def test_recovers_two_state_teacher(self):
        A = np.array([[0.9, 0.1], [0.2, 0.8]])
        B = np.array([[0.9, 0.9, 0.1, 0.1], [0.1, 0.1, 0.9, 0.9]])
        teacher = hmm.HmmModel(A=A, B=B, pi=np.array([0.5, 0.5]))
        _, counts = hmm.sample_hmm(teacher, S=600, T=20, seed=2)
        student, trace = hmm.fit_em(counts[:500], M=2, n_iters=80, init_seed=3)
        post_t, _ = hmm.posterior_batch(teacher, counts[500:])
        post_s, _ = hmm.posterior_batch(student, counts[500:])
        t, s = post_t.trial_logliks.sum(), post_s.trial_logliks.sum()
        assert abs(s - t) / abs(t) < 0.01

    def test_single_state_collapses_to_means(self):
        rng = np.random.default_rng(4)
        X = rng.integers(0, 2, size=(40, 6, 3)).astype(np.uint32)
        model, trace = hmm.fit_em(X, M=1, n_iters=5, init_seed=0)
        np.testing.assert_allclose(model.A, [[1.0]])
        np.testing.assert_allclose(model.pi, [1.0])
        np.testing.assert_allclose(model.B[0], X.reshape(-1, 3).mean(axis=0), atol=1e-12)
        # closed-form log-likelihood of the iid Bernoulli model
        p = model.B[0]
        expect = float((X.reshape(-1, 3) * np.log(p) + (1 - X.reshape(-1, 3)) * np.log1p(-p)).sum())
        post, _ = hmm.posterior_batch(model, X)
        np.testing.assert_allclose(post.trial_logliks.sum(), expect, rtol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_trace_monotone_on_arbitrary_binary_data(self, seed):
        rng = np.random.default_rng(seed)
        X = (rng.random((30, 8, 5)) < rng.random(5)).astype(np.uint32)
        _, trace = hmm.fit_em(X, M=3, n_iters=40, init_seed=seed)
        assert np.all(np.diff(trace) >= -1e-9)

    def test_empty_train_raises(self):
        with pytest.raises(FitError):
            hmm.fit_em(np.zeros((0, 4, 2), dtype=np.uint32), M=2)

    def test_nonbinary_raises(self):
        with pytest.raises(FitError):
            hmm.fit_em(np.full((3, 2, 2), 2, dtype=np.uint32), M=2)


class TestPredictRates:
    def test_point_mass_posterior(self):
        rng = np.random.default_rng(5)
        B = rng.uniform(0, 1, (3, 4))
        xi = np.zeros((2, 5, 3))
        xi[:, :, 2] = 1.0
        post = hmm.HmmPosterior(xi=xi, trial_logliks=np.zeros(2))
        R = hmm.predict_rates(B, post)
        np.testing.assert_allclose(R, np.broadcast_to(B[2], (2, 5, 4)))

    def test_uniform_two_state(self):
        B = np.array([[0.2], [0.6]])
        xi = np.full((1, 3, 2), 0.5)
        post = hmm.HmmPosterior(xi=xi, trial_logliks=np.zeros(1))
        np.testing.assert_allclose(hmm.predict_rates(B, post), 0.4)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        B = rng.uniform(0, 1, (3, 2))
        xi = rng.dirichlet(np.ones(3), size=(2, 3))
        post = hmm.HmmPosterior(xi=xi, trial_logliks=np.zeros(2))
        R = hmm.predict_rates(B, post)
        for i in range(2):
            for t in range(3):
                for n in range(2):
                    expect = sum(B[m, n] * xi[i, t, m] for m in range(3))
                    assert abs(R[i, t, n] - expect) < 1e-12

    def test_bad_column_raises(self):
        post = hmm.HmmPosterior(xi=np.full((1, 2, 2), 0.5), trial_logliks=np.zeros(1))
        with pytest.raises(IndexError):
            hmm.predict_rates(np.full((2, 3), 0.5), post, columns=np.array([3]))

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(7)
        B = rng.uniform(0, 1, (4, 6))
        xi = rng.dirichlet(np.ones(4), size=(3, 5))
        post = hmm.HmmPosterior(xi=xi, trial_logliks=np.zeros(3))
        R = hmm.predict_rates(B, post)
        assert (R >= B.min(axis=0) - 1e-12).all()
        assert (R <= B.max(axis=0) + 1e-12).all()


class TestFewshotMle:
    def test_hard_assignment_counting(self):
        # states alternate deterministically; estimate is spikes / visits
        xi = np.zeros((2, 4, 2))
        xi[:, 0::2, 0] = 1.0
        xi[:, 1::2, 1] = 1.0
        x = np.zeros((2, 4, 1))
        x[0, 0, 0] = 1.0  # one spike during state 0 (4 visits)
        x[:, 1, 0] = 1.0  # two spikes during state 1 (4 visits)
        B = hmm.fewshot_emission_mle(xi, x)
        np.testing.assert_allclose(B[0, 0], 0.25)
        np.testing.assert_allclose(B[1, 0], 0.5)

    def test_uniform_posterior_pools_counts(self):
        rng = np.random.default_rng(8)
        k, T = 6, 2
        x = rng.integers(0, 2, size=(k, T, 1)).astype(float)
        xi = np.full((k, T, 2), 0.5)
        B = hmm.fewshot_emission_mle(xi, x)
        pooled = x.sum() / (k * T)
        np.testing.assert_allclose(B, pooled)

    def test_switching_posterior_splits_counts(self):
        rng = np.random.default_rng(9)
        k = 5
        x = rng.integers(0, 2, size=(k, 2, 1)).astype(float)
        xi = np.zeros((k, 2, 2))
        xi[:, 0, 0] = 1.0
        xi[:, 1, 1] = 1.0
        B = hmm.fewshot_emission_mle(xi, x)
        c1, c2 = x[:, 0, 0].sum(), x[:, 1, 0].sum()
        np.testing.assert_allclose(B[0, 0], max(c1 / k, 1e-6))
        np.testing.assert_allclose(B[1, 0], max(c2 / k, 1e-6))

    def test_trial_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        xi = rng.dirichlet(np.ones(3), size=(8, 4))
        x = rng.integers(0, 2, size=(8, 4, 5)).astype(float)
        B1 = hmm.fewshot_emission_mle(xi, x)
        perm = rng.permutation(8)
        B2 = hmm.fewshot_emission_mle(xi[perm], x[perm])
        np.testing.assert_allclose(B1, B2, atol=1e-14)

    def test_starved_state_falls_back_to_mean(self):
        xi = np.zeros((2, 3, 2))
        xi[:, :, 0] = 1.0  # state 1 never visited
        x = np.ones((2, 3, 2))
        x[0, 0, 0] = 0.0
        with pytest.warns(RuntimeWarning):
            B = hmm.fewshot_emission_mle(xi, x)
        np.testing.assert_allclose(B[1], x.mean())


class TestTrafficGraph:
    def test_deterministic_cycle_symmetry(self):
        M = 4
        A = np.zeros((M, M))
        A[np.arange(M), (np.arange(M) + 1) % M] = 1.0
        model = hmm.HmmModel(A=A, B=np.full((M, 1), 0.5), pi=np.full(M, 0.25))
        g = hmm.traffic_graph(model, n_trials=2000, T=101, seed=0)
        np.testing.assert_allclose(g.node_weight, 0.25, atol=0.01)
        on_cycle = g.edge_weight[np.arange(M), (np.arange(M) + 1) % M]
        np.testing.assert_allclose(on_cycle, 0.25, atol=0.01)
        assert g.edge_weight.sum() == pytest.approx(1.0)

    def test_noisy_cycle_prunes_off_cycle_edges(self):
        model = hmm.make_cycle_teacher(4, 1e-2, emission_seed=0, n_neurons=3)
        g = hmm.traffic_graph(model, n_trials=3000, T=50, seed=1)
        succ = (np.arange(4) + 1) % 4
        for i in range(4):
            for j in range(4):
                if j == succ[i]:
                    assert not g.pruned[i, j]
                else:
                    assert g.pruned[i, j]

    def test_converges_to_stationary_flow(self):
        rng = np.random.default_rng(11)
        A = rng.dirichlet(np.ones(3) * 2, size=3)
        w, V = np.linalg.eig(A.T)
        stat = np.real(V[:, np.argmax(np.real(w))])
        stat = stat / stat.sum()
        model = hmm.HmmModel(A=A, B=np.full((3, 1), 0.5), pi=stat / stat.sum())
        g = hmm.traffic_graph(model, n_trials=100000, T=11, seed=2)
        np.testing.assert_allclose(g.node_weight, stat, atol=1e-2)
        np.testing.assert_allclose(g.edge_weight, stat[:, None] * A, atol=1e-2)

    def test_dot_export(self):
        model = hmm.make_cycle_teacher(4, 1e-2, emission_seed=0, n_neurons=3)
        g = hmm.traffic_graph(model, n_trials=500, T=20, seed=3)
        dot = g.to_dot()
        assert dot.startswith("digraph")
        assert 'label="0"' in dot and "weight=" in dot
        assert "style=invis" in dot


class TestModelFile:
    def test_round_trip(self, tmp_path):
        model = hmm.make_cycle_teacher(5, 0.02, emission_seed=4, n_neurons=7)
        path = str(tmp_path / "m.json")
        hmm.save_model(model, path)
        back = hmm.load_model(path)
        np.testing.assert_array_equal(back.A, model.A)
        np.testing.assert_array_equal(back.B, model.B)
        np.testing.assert_array_equal(back.pi, model.pi)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{\"M\": 2}")
        with pytest.raises(FormatError):
            hmm.load_model(str(p))
