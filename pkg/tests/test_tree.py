import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minnbart.tree import (
    NoValidSplit,
    RegressionTree,
    TreePriorParams,
    assign_leaves,
    check_tree,
    leaf_tau2,
    log_tree_structure_prior,
    node_rows,
    propose_change,
    propose_grow,
    propose_move,
    propose_prune,
    sample_split_rule,
    sample_tree_prior,
    split_prob_at_depth,
)


def brute_route(record, x):
    # independent walk over the nested record
    path = []
    while "leaf" not in record:
        go_left = x[record["var"]] <= record["cut"]
        path.append(go_left)
        record = record["left"] if go_left else record["right"]
    return tuple(path)


class TestSplitProb:
    def test_root(self):
        assert split_prob_at_depth(0, TreePriorParams(0.95, 0.2)) == 0.95

    def test_depth_one(self):
        assert split_prob_at_depth(1, TreePriorParams(0.95, 0.2)) == pytest.approx(0.95 * 2 ** -0.2)
        assert split_prob_at_depth(1, TreePriorParams(0.95, 0.2)) == pytest.approx(0.8270, abs=5e-5)

    def test_zero_gamma(self):
        assert split_prob_at_depth(5, TreePriorParams(0.0, 0.2)) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            TreePriorParams(1.0, 0.2)
        with pytest.raises(ValueError):
            TreePriorParams(0.5, 0.2, tau2=0.0)

    def test_leaf_calibration(self):
        # +-2 sd of the sum of M leaves spans the range
        tau2 = leaf_tau2(4.0, 50)
        assert 2 * math.sqrt(tau2 * 50) * 2 == pytest.approx(4.0)


class TestSplitRule:
    def test_one_hot(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((10, 4))
        s = np.array([0.0, 0.0, 1.0, 0.0])
        for _ in range(50):
            q, c = sample_split_rule(s, X, np.arange(10), rng)
            assert q == 2
            assert c in X[:, 2] and c < X[:, 2].max()

    def test_single_row(self):
        X = np.random.default_rng(1).standard_normal((5, 3))
        with pytest.raises(NoValidSplit):
            sample_split_rule(np.full(3, 1 / 3), X, np.array([2]), np.random.default_rng(0))

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((8, 2))
        n = 10000
        hits = sum(sample_split_rule(np.array([0.5, 0.5]), X, np.arange(8), rng)[0] == 0 for _ in range(n))
        assert abs(hits / n - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_cutpoints_uniform_over_distinct_values(self):
        rng = np.random.default_rng(3)
        X = np.array([[1.0], [1.0], [2.0], [3.0], [3.0]])
        n = 6000
        cuts = [sample_split_rule(np.array([1.0]), X, np.arange(5), rng)[1] for _ in range(n)]
        # admissible: 1 and 2 (3 is the maximum)
        assert set(cuts) == {1.0, 2.0}
        assert abs(np.mean(np.array(cuts) == 1.0) - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_skips_constant_predictor(self):
        rng = np.random.default_rng(4)
        X = np.column_stack([np.ones(6), np.arange(6.0)])
        for _ in range(20):
            assert sample_split_rule(np.array([0.9, 0.1]), X, np.arange(6), rng)[0] == 1


class TestAssignLeaves:
    def test_root_only(self):
        X = np.random.default_rng(0).standard_normal((7, 3))
        assert set(assign_leaves(RegressionTree(), X)) == {0}

    def test_single_split(self):
        tree = RegressionTree()
        left, right = tree.split(0, 0, 0.0)
        np.testing.assert_array_equal(assign_leaves(tree, np.array([[-1.0], [1.0]])), [left, right])

    def test_two_levels(self):
        tree = RegressionTree()
        l, r = tree.split(0, 0, 0.0)
        tree.split(l, 1, 0.0)
        tree.split(r, 1, 5.0)
        X = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, 4.0], [1.0, 6.0]])
        leaves = assign_leaves(tree, X)
        assert len(set(leaves)) == 4
        # against a walk of the nested record
        paths = [brute_route(tree.to_record(), x) for x in X]
        assert len(set(paths)) == 4

    def test_ties_go_left(self):
        tree = RegressionTree()
        left, _ = tree.split(0, 0, 1.5)
        assert assign_leaves(tree, np.array([[1.5]]))[0] == left

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_partition_and_routing(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((25, 3))
        tree = sample_tree_prior(X, np.full(3, 1 / 3), TreePriorParams(0.95, 1.0), rng)
        leaves = assign_leaves(tree, X)
        counts = {leaf: int((leaves == leaf).sum()) for leaf in tree.leaves()}
        assert sum(counts.values()) == len(X)
        rec = tree.to_record()
        # identical routes land in identical leaves
        paths = [brute_route(rec, x) for x in X]
        for a in range(len(X)):
            for b in range(len(X)):
                assert (paths[a] == paths[b]) == (leaves[a] == leaves[b])


class TestStructurePrior:
    def test_root_only(self):
        X = np.random.default_rng(0).standard_normal((5, 2))
        lp = log_tree_structure_prior(RegressionTree(), TreePriorParams(0.95, 0.2), np.array([0.5, 0.5]), X)
        assert lp == pytest.approx(math.log(0.05))

    def test_single_split(self):
        # both predictors take two values at the root, so one cutpoint each;
        # each child can still split on the other predictor
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        tree = RegressionTree()
        tree.split(0, 0, 0.0)
        lp = log_tree_structure_prior(tree, TreePriorParams(0.5, 0.0), np.array([0.5, 0.5]), X)
        expected = math.log(0.5) + math.log(0.5) + 0.0 + 2 * math.log(0.5)
        assert lp == pytest.approx(expected, abs=1e-14)

    def test_cutpoint_mass(self):
        X = np.arange(5.0)[:, None]
        tree = RegressionTree()
        tree.split(0, 0, 1.0)
        params = TreePriorParams(0.9, 1.0)
        lp = log_tree_structure_prior(tree, params, np.array([1.0]), X)
        p1 = 0.9 * 2 ** -1.0
        # root has 4 cutpoints; left child rows {0, 1}, right {2, 3, 4}: both splittable
        assert lp == pytest.approx(math.log(0.9) - math.log(4) + 2 * math.log(1 - p1))

    def test_inadmissible_rule(self):
        X = np.arange(4.0)[:, None]
        tree = RegressionTree()
        tree.split(0, 0, 10.0)
        assert log_tree_structure_prior(tree, TreePriorParams(), np.array([1.0]), X) == -math.inf

    @given(depth=st.integers(0, 6), beta=st.floats(0.05, 3.0))
    def test_split_term_decreasing_in_depth(self, depth, beta):
        params = TreePriorParams(0.95, beta)
        assert math.log(split_prob_at_depth(depth + 1, params)) < math.log(split_prob_at_depth(depth, params))

    def test_prior_simulation_root_split(self):
        rng = np.random.default_rng(5)
        X = np.array([[0.0], [1.0]])
        n = 10000
        splits = sum(sample_tree_prior(X, np.array([1.0]), TreePriorParams(0.95, 0.2), rng).var[0] >= 0
                     for _ in range(n))
        assert abs(splits / n - 0.95) < 3 * math.sqrt(0.95 * 0.05 / n)


class TestProposals:
    def setup_method(self):
        self.rng = np.random.default_rng(7)
        self.X = self.rng.standard_normal((30, 3))
        self.s = np.array([0.5, 0.3, 0.2])

    def test_prune_root(self):
        tree = RegressionTree()
        assert propose_prune(tree, self.s, node_rows(tree, self.X), self.X, self.rng) is None
        assert propose_change(tree, self.s, node_rows(tree, self.X), self.X, self.rng) is None

    def test_grow_then_prune(self):
        tree = RegressionTree()
        rows = node_rows(tree, self.X)
        grow = propose_grow(tree, self.s, rows, self.X, self.rng)
        prune = propose_prune(grow.tree, self.s, grow.rows_map, self.X, self.rng, node=grow.node)
        assert prune.tree.structure_equal(tree)
        assert prune.log_ratio == pytest.approx(-grow.log_ratio, abs=1e-12)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_grow_prune_ratios_are_inverse(self, seed):
        rng = np.random.default_rng(seed)
        tree = sample_tree_prior(self.X, self.s, TreePriorParams(0.95, 1.0), rng)
        rows = node_rows(tree, self.X)
        grow = propose_grow(tree, self.s, rows, self.X, rng)
        if grow is None:
            return
        prune = propose_prune(grow.tree, self.s, grow.rows_map, self.X, rng, node=grow.node)
        assert prune.log_ratio == pytest.approx(-grow.log_ratio, abs=1e-10)

    def test_change_ratio_with_uniform_s_and_no_ties(self):
        # same predictor mass and same cutpoint count in both directions
        tree = RegressionTree()
        tree.split(0, 0, float(np.sort(self.X[:, 0])[10]))
        rows = node_rows(tree, self.X)
        prop = propose_change(tree, np.full(3, 1 / 3), rows, self.X, self.rng, node=0)
        assert prop.log_ratio == pytest.approx(0.0, abs=1e-12)

    def test_moves_keep_invariants(self):
        rng = np.random.default_rng(11)
        tree = RegressionTree()
        rows = node_rows(tree, self.X)
        for _ in range(400):
            prop = propose_move(tree, self.s, rows, self.X, rng)
            if prop is None or rng.random() < 0.3:
                continue
            # a CHANGE can empty a descendant; such trees have zero prior mass
            if log_tree_structure_prior(prop.tree, TreePriorParams(), self.s, self.X) == -math.inf:
                continue
            tree, rows = prop.tree, prop.rows_map
            check_tree(tree)
            fresh = node_rows(tree, self.X)
            for i in tree.live():
                np.testing.assert_array_equal(rows[i], fresh[i])
                assert len(fresh[i]) > 0

    def test_record_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            tree = sample_tree_prior(self.X, self.s, TreePriorParams(0.95, 0.5), rng)
            back = RegressionTree.from_record(tree.to_record())
            assert back.structure_equal(tree)
            np.testing.assert_array_equal(back.predict(self.X), tree.predict(self.X))
