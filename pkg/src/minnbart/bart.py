"""
Bayesian backfitting for one equation's sum-of-trees.

Observations carry individual precisions ``w_t`` (``exp(-h_t)`` under
stochastic volatility, ``1/sigma2`` otherwise); a leaf with prior
``mu ~ N(0, tau2)`` is integrated out analytically when scoring a tree
structure.
"""

from __future__ import annotations

import math

import numpy as np

from .tree import (
    RegressionTree,
    as_split_data,
    node_rows,
    propose_move,
    subtree_log_prior,
)

_LOG_2PI = math.log(2.0 * math.pi)


def leaf_marginal_loglik(residuals, precisions, tau2):
    """``log int prod_t N(r_t; mu, 1/w_t) N(mu; 0, tau2) dmu`` for one leaf."""
    r = np.asarray(residuals, dtype=float)
    w = np.asarray(precisions, dtype=float)
    if r.size == 0:
        return 0.0
    sw = float(np.sum(w))
    swr = float(np.sum(w * r))
    prior_prec = 1.0 / tau2
    post_prec = prior_prec + sw
    return (0.5 * math.log(prior_prec / post_prec) + 0.5 * swr * swr / post_prec
            + 0.5 * float(np.sum(np.log(w))) - 0.5 * r.size * _LOG_2PI
            - 0.5 * float(np.sum(w * r * r)))


def _leaf_score(sw, swr, prior_prec):
    # the part of the leaf marginal that depends on how rows are grouped
    post_prec = prior_prec + sw
    return 0.5 * math.log(prior_prec / post_prec) + 0.5 * swr * swr / post_prec


def leaf_index(tree, rows_map, n_rows):
    out = np.empty(n_rows, dtype=np.intp)
    for leaf in tree.leaves():
        out[rows_map[leaf]] = leaf
    return out


def draw_leaf_means(tree, leaf_of_row, residuals, precisions, tau2, rng):
    """Redraw every leaf value from its Gaussian full conditional, in place.

    A leaf holding rows with total precision ``sw`` and weighted residual sum
    ``swr`` gets ``N(swr / (1/tau2 + sw), 1 / (1/tau2 + sw))``; empty leaves
    fall back to the prior.
    """
    size = len(tree.depth)
    sw = np.bincount(leaf_of_row, weights=precisions, minlength=size)
    swr = np.bincount(leaf_of_row, weights=precisions * residuals, minlength=size)
    v = 1.0 / (1.0 / tau2 + sw)
    leaves = tree.leaves()
    z = rng.standard_normal(len(leaves))
    mu = tree.mu
    for leaf, zi in zip(leaves, z):
        mu[leaf] = v[leaf] * swr[leaf] + math.sqrt(v[leaf]) * zi
    return tree


def count_splits(trees, k):
    counts = np.zeros(k, dtype=np.int64)
    for tree in trees:
        for q in tree.var:
            if q >= 0:
                counts[q] += 1
    return counts


class EquationForest:
    """The `M` trees of one equation with their training-row bookkeeping.

    `fit` is the running sum of all tree outputs on the training design and
    `tree_fits[m]` the output of tree `m` alone.
    """

    def __init__(self, X, M, trees=None, fit=None):
        self.data = as_split_data(X)
        self.X = self.data.X
        self.M = M
        T = self.X.shape[0]
        self.trees = [RegressionTree() for _ in range(M)] if trees is None else list(trees)
        if len(self.trees) != M:
            raise ValueError(f"expected {M} trees, got {len(self.trees)}")
        self.rows = [node_rows(t, self.X) for t in self.trees]
        self.leaf_of_row = [leaf_index(t, r, T) for t, r in zip(self.trees, self.rows)]
        self.tree_fits = [np.asarray(t.mu)[lr] for t, lr in zip(self.trees, self.leaf_of_row)]
        self.fit = self.exact_fit() if fit is None else np.array(fit, dtype=float)

    def exact_fit(self):
        out = np.zeros(self.X.shape[0])
        for f in self.tree_fits:
            out += f
        return out

    def refresh(self):
        self.fit = self.exact_fit()

    def counts(self, k=None):
        return count_splits(self.trees, self.X.shape[1] if k is None else k)

    def predict(self, X):
        out = np.zeros(np.atleast_2d(X).shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out


def partial_residuals(y, factor_part, forest, m):
    """Response minus factor contribution minus every tree except tree `m`."""
    return y - factor_part - forest.fit + forest.tree_fits[m]


def mh_step_tree(forest, m, R, precisions, params, s, rng):
    """One Metropolis-Hastings update of tree `m` followed by a leaf redraw.

    Returns the move tag when the proposal was accepted, else None.
    """
    tree, rows_map = forest.trees[m], forest.rows[m]
    data = forest.data
    leaf_of_row = forest.leaf_of_row[m]
    prop = propose_move(tree, s, rows_map, data, rng)
    accepted = None
    if prop is not None:
        log_alpha = _log_acceptance(tree, rows_map, prop, R, precisions, params, s, data)
        if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
            tree, rows_map = prop.tree, prop.rows_map
            forest.trees[m], forest.rows[m] = tree, rows_map
            for i in tree.subtree(prop.node):
                if tree.var[i] < 0:
                    leaf_of_row[rows_map[i]] = i
            accepted = prop.move
    draw_leaf_means(tree, leaf_of_row, R, precisions, params.tau2, rng)
    new_fit = np.asarray(tree.mu)[leaf_of_row]
    forest.fit += new_fit - forest.tree_fits[m]
    forest.tree_fits[m] = new_fit
    return accepted


def _subtree_score(tree, node, rows_map, w, wr, prior_prec):
    total = 0.0
    for i in tree.subtree(node):
        if tree.var[i] < 0:
            rows = rows_map[i]
            total += _leaf_score(w[rows].sum(), wr[rows].sum(), prior_prec)
    return total


def _log_acceptance(tree, rows_map, prop, R, w, params, s, data):
    new_prior = subtree_log_prior(prop.tree, prop.node, prop.rows_map, data, s, params)
    if new_prior == -math.inf:
        return -math.inf
    old_prior = subtree_log_prior(tree, prop.node, rows_map, data, s, params)
    wr = w * R
    prior_prec = 1.0 / params.tau2
    old_ll = _subtree_score(tree, prop.node, rows_map, w, wr, prior_prec)
    new_ll = _subtree_score(prop.tree, prop.node, prop.rows_map, w, wr, prior_prec)
    return (new_ll - old_ll) + (new_prior - old_prior) + prop.log_ratio


def backfit_sweep(forest, y, factor_part, precisions, params, s, rng):
    """Update all `M` trees of the equation in order."""
    moves = []
    for m in range(forest.M):
        R = partial_residuals(y, factor_part, forest, m)
        moves.append(mh_step_tree(forest, m, R, precisions, params, s, rng))
    return moves
