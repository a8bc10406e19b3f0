import math

import numpy as np
import pytest
from scipy import integrate, stats

from minnbart.bart import (
    EquationForest,
    backfit_sweep,
    count_splits,
    draw_leaf_means,
    leaf_marginal_loglik,
    mh_step_tree,
    partial_residuals,
)
from minnbart.tree import RegressionTree, TreePriorParams, sample_tree_prior

from helpers import batch_means_ess, tree_params


def quad_leaf(r, w, tau2):
    # integrate over mu on a window wide enough to hold all the mass
    def f(mu):
        return math.exp(np.sum(stats.norm.logpdf(r, mu, 1 / np.sqrt(w))) + stats.norm.logpdf(mu, 0, math.sqrt(tau2)))

    post_var = 1 / (1 / tau2 + w.sum())
    center = post_var * np.sum(w * r)
    half = 12 * math.sqrt(post_var)
    val = integrate.quad(f, center - half, center + half, epsabs=0, epsrel=1e-12, limit=200)[0]
    return math.log(val)


def random_forest(X, M, rng, beta=1.0):
    s = np.full(X.shape[1], 1 / X.shape[1])
    trees = [sample_tree_prior(X, s, TreePriorParams(0.95, beta, 0.3), rng) for _ in range(M)]
    return EquationForest(X, M, trees)


class TestLeafMarginal:
    def test_single_zero(self):
        assert leaf_marginal_loglik([0.0], [1.0], 1.0) == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-14)
        assert leaf_marginal_loglik([0.0], [1.0], 1.0) == pytest.approx(-1.2655, abs=5e-5)

    def test_empty(self):
        assert leaf_marginal_loglik([], [], 1.0) == 0.0

    def test_pinned_mean(self):
        r, w = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, 2.0])
        target = np.sum(stats.norm.logpdf(r, 0, 1 / np.sqrt(w)))
        assert leaf_marginal_loglik(r, w, 1e-12) == pytest.approx(target, abs=1e-9)

    def test_quadrature(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(1, 6)
            r = rng.standard_normal(n) * 2
            w = np.exp(rng.uniform(-2, 2, n))
            tau2 = math.exp(rng.uniform(-3, 1))
            assert leaf_marginal_loglik(r, w, tau2) == pytest.approx(quad_leaf(r, w, tau2), abs=1e-8)

    def test_joint_gaussian(self):
        # marginally r ~ N(0, diag(1/w) + tau2 * 11')
        r, w, tau2 = np.array([0.5, -0.2, 1.1, 0.0]), np.array([2.0, 1.0, 0.25, 4.0]), 0.7
        cov = np.diag(1 / w) + tau2
        assert leaf_marginal_loglik(r, w, tau2) == pytest.approx(
            stats.multivariate_normal(np.zeros(4), cov).logpdf(r), abs=1e-12)


class TestLeafMeans:
    def test_conjugate_moments(self):
        tree = RegressionTree()
        rng = np.random.default_rng(1)
        draws = np.empty(20000)
        for i in range(len(draws)):
            draw_leaf_means(tree, np.array([0]), np.array([2.0]), np.array([1.0]), 1.0, rng)
            draws[i] = tree.mu[0]
        se = math.sqrt(0.5 / len(draws))
        assert abs(draws.mean() - 1.0) < 3 * se
        assert draws.var(ddof=1) == pytest.approx(0.5, rel=0.03)

    def test_empty_leaf_prior(self):
        tree = RegressionTree()
        left, right = tree.split(0, 0, 0.0)
        rng = np.random.default_rng(2)
        draws = np.empty(10000)
        for i in range(len(draws)):
            draw_leaf_means(tree, np.array([left, left]), np.array([1.0, 2.0]), np.ones(2), 0.4, rng)
            draws[i] = tree.mu[right]
        assert draws.var(ddof=1) == pytest.approx(0.4, rel=0.05)

    def test_data_dominated(self):
        tree = RegressionTree()
        r, w = np.array([1.0, 3.0]), np.array([1e10, 3e10])
        draw_leaf_means(tree, np.zeros(2, dtype=int), r, w, 1.0, np.random.default_rng(3))
        assert tree.mu[0] == pytest.approx(2.5, abs=1e-4)


class TestCounts:
    def test_stumps(self):
        assert np.all(count_splits([RegressionTree() for _ in range(4)], 3) == 0)

    def test_single(self):
        tree = RegressionTree()
        tree.split(0, 1, 0.0)
        np.testing.assert_array_equal(count_splits([tree], 3), [0, 1, 0])

    def test_brute_force(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((40, 5))
        forest = random_forest(X, 10, rng, beta=0.5)
        expected = np.zeros(5, dtype=int)

        def walk(rec):
            if "leaf" in rec:
                return
            expected[rec["var"]] += 1
            walk(rec["left"])
            walk(rec["right"])

        for t in forest.trees:
            walk(t.to_record())
        np.testing.assert_array_equal(forest.counts(), expected)
        assert expected.sum() == sum(len(t.internal()) for t in forest.trees)


class TestForest:
    def test_partial_residuals_single_tree(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((6, 2))
        forest = random_forest(X, 1, rng)
        y, fp = rng.standard_normal(6), rng.standard_normal(6)
        np.testing.assert_allclose(partial_residuals(y, fp, forest, 0), y - fp, atol=1e-14)

    def test_partial_residuals_direct(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((5, 2))
        forest = random_forest(X, 3, rng)
        for t in forest.trees:
            t.mu = list(rng.standard_normal(len(t.mu)))
        forest = EquationForest(X, 3, forest.trees)
        y, fp = rng.standard_normal(5), rng.standard_normal(5)
        for m in range(3):
            direct = y - fp - sum(forest.trees[j].predict(X) for j in range(3) if j != m)
            np.testing.assert_allclose(partial_residuals(y, fp, forest, m), direct, atol=1e-12)

    def test_zero_state(self):
        X = np.random.default_rng(7).standard_normal((5, 2))
        y = np.arange(5.0)
        forest = EquationForest(X, 4)
        np.testing.assert_array_equal(partial_residuals(y, 0.0, forest, 2), y)

    def test_fit_cache_after_sweeps(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((50, 3))
        y = np.sin(X[:, 0]) + 0.3 * rng.standard_normal(50)
        forest = EquationForest(X, 10)
        params = tree_params(0.05)
        w = np.exp(rng.uniform(-1, 1, 50))
        for _ in range(30):
            backfit_sweep(forest, y, 0.0, w, params, np.full(3, 1 / 3), rng)
            np.testing.assert_allclose(forest.fit, forest.exact_fit(), atol=1e-8)
        np.testing.assert_allclose(forest.fit, forest.predict(X), atol=1e-8)

    def test_learns_signal(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((100, 2))
        y = np.where(X[:, 0] > 0, 1.0, -1.0) + 0.1 * rng.standard_normal(100)
        forest = EquationForest(X, 20)
        for _ in range(100):
            backfit_sweep(forest, y, 0.0, np.full(100, 100.0), tree_params(0.05, beta=2.0), np.full(2, 0.5), rng)
        assert np.mean((forest.fit - y) ** 2) < 0.05

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(10)
            X = rng.standard_normal((30, 2))
            y = X[:, 0] + rng.standard_normal(30)
            forest = EquationForest(X, 5)
            for _ in range(20):
                backfit_sweep(forest, y, 0.0, np.ones(30), tree_params(), np.full(2, 0.5), rng)
            return forest.fit.tobytes()

        assert run() == run()

    def test_null_proposal_keeps_topology(self):
        # one row: no move is possible, so only the leaf value changes
        X = np.array([[0.5]])
        forest = EquationForest(X, 1)
        rng = np.random.default_rng(11)
        for _ in range(20):
            assert mh_step_tree(forest, 0, np.array([1.0]), np.ones(1), tree_params(), np.ones(1), rng) is None
            assert len(forest.trees[0].leaves()) == 1

    def test_zero_data_prior(self):
        # with negligible precision the chain targets the tree prior
        rng = np.random.default_rng(12)
        X = np.array([[0.0], [1.0]])
        params = TreePriorParams(0.6, 0.2, 1.0)
        forest = EquationForest(X, 1)
        split = []
        for _ in range(20000):
            mh_step_tree(forest, 0, np.zeros(2), np.full(2, 1e-12), params, np.ones(1), rng)
            split.append(forest.trees[0].var[0] >= 0)
        split = np.array(split, dtype=float)
        ess = batch_means_ess(split)
        assert abs(split.mean() - 0.6) < 4 * math.sqrt(0.24 / ess)
