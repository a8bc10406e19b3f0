"""
Single regression trees: structure, prior, split-rule sampling, routing and
grow/prune/change proposals.

Nodes live in parallel per-slot lists. ``var[i] == -1`` marks a leaf and
``depth[i] == -1`` a free slot. Row membership on the training design is
kept outside the tree, in a list aligned with the slots (the "rows map"),
because trees are also evaluated on design rows they were never fit to.

Cutpoints are distinct observed values of the predictor among the node's
rows, excluding the largest one, so both children are always nonempty.
Rows with ``x[q] <= cut`` go left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GROW, PRUNE, CHANGE = "grow", "prune", "change"
MOVE_PROBS = {GROW: 0.4, PRUNE: 0.4, CHANGE: 0.2}
_MOVE_CDF = (0.4, 0.8)


@dataclass(frozen=True)
class TreePriorParams:
    """Tree prior: split probability ``gamma * (1 + d)**-beta``, leaf variance `tau2`."""

    gamma: float = 0.95
    beta: float = 0.2
    tau2: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")


def split_prob_at_depth(d, params):
    return params.gamma * (1.0 + d) ** (-params.beta)


def leaf_tau2(y_range, M):
    """Leaf prior variance so that +-2 sd of a sum of `M` leaves spans `y_range`."""
    sigma_mu = y_range / 4.0
    return sigma_mu ** 2 / M


class RegressionTree:
    __slots__ = ("var", "cut", "left", "right", "parent", "depth", "mu")

    def __init__(self, mu=0.0):
        self.var = [-1]
        self.cut = [0.0]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]
        self.depth = [0]
        self.mu = [float(mu)]

    def copy(self):
        new = RegressionTree.__new__(RegressionTree)
        new.var = self.var[:]
        new.cut = self.cut[:]
        new.left = self.left[:]
        new.right = self.right[:]
        new.parent = self.parent[:]
        new.depth = self.depth[:]
        new.mu = self.mu[:]
        return new

    # -- structure queries -------------------------------------------------

    def live(self):
        return [i for i, d in enumerate(self.depth) if d >= 0]

    def leaves(self):
        return [i for i, d in enumerate(self.depth) if d >= 0 and self.var[i] < 0]

    def internal(self):
        return [i for i, d in enumerate(self.depth) if d >= 0 and self.var[i] >= 0]

    def nog_nodes(self):
        """Internal nodes whose children are both leaves."""
        var, left, right = self.var, self.left, self.right
        return [i for i in self.internal() if var[left[i]] < 0 and var[right[i]] < 0]

    def n_leaves(self):
        return len(self.leaves())

    def subtree(self, node):
        out, stack = [], [node]
        while stack:
            i = stack.pop()
            out.append(i)
            if self.var[i] >= 0:
                stack.append(self.right[i])
                stack.append(self.left[i])
        return out

    def max_depth(self):
        return max(self.depth)

    # -- mutation --------------------------------------------------------------

    def _alloc(self, parent, depth):
        for i, d in enumerate(self.depth):
            if d < 0:
                break
        else:
            i = len(self.depth)
            for lst in (self.var, self.left, self.right, self.parent, self.depth):
                lst.append(-1)
            self.cut.append(0.0)
            self.mu.append(0.0)
        self.var[i] = -1
        self.cut[i] = 0.0
        self.left[i] = self.right[i] = -1
        self.parent[i] = parent
        self.depth[i] = depth
        self.mu[i] = 0.0
        return i

    def split(self, node, q, cut):
        """Turn leaf `node` into an internal node with two fresh leaf children."""
        if self.var[node] >= 0:
            raise ValueError(f"node {node} is not a leaf")
        d = self.depth[node] + 1
        left = self._alloc(node, d)
        right = self._alloc(node, d)
        self.var[node] = int(q)
        self.cut[node] = float(cut)
        self.left[node] = left
        self.right[node] = right
        return left, right

    def collapse(self, node):
        """Remove the two leaf children of `node`, making it a leaf."""
        left, right = self.left[node], self.right[node]
        if self.var[left] >= 0 or self.var[right] >= 0:
            raise ValueError(f"children of node {node} are not both leaves")
        for c in (left, right):
            self.depth[c] = -1
            self.var[c] = -1
            self.parent[c] = -1
        self.var[node] = -1
        self.left[node] = self.right[node] = -1
        self.cut[node] = 0.0
        return left, right

    # -- evaluation ------------------------------------------------------------

    def predict(self, X):
        X = np.atleast_2d(_raw(X))
        out = np.empty(X.shape[0])
        for leaf, rows in route(self, X, np.arange(X.shape[0])):
            out[rows] = self.mu[leaf]
        return out

    def predict_one(self, x):
        i = 0
        var, cut, left, right = self.var, self.cut, self.left, self.right
        while var[i] >= 0:
            i = left[i] if x[var[i]] <= cut[i] else right[i]
        return self.mu[i]

    # -- serialization -----------------------------------------------------------

    def to_record(self, node=0):
        """Nested record: ``{"leaf": mu}`` or ``{"var", "cut", "left", "right"}``."""
        if self.var[node] < 0:
            return {"leaf": self.mu[node]}
        return {
            "var": self.var[node],
            "cut": self.cut[node],
            "left": self.to_record(self.left[node]),
            "right": self.to_record(self.right[node]),
        }

    @classmethod
    def from_record(cls, record):
        tree = cls()
        stack = [(0, record)]
        while stack:
            i, rec = stack.pop()
            if "leaf" in rec:
                tree.mu[i] = float(rec["leaf"])
                continue
            left, right = tree.split(i, int(rec["var"]), float(rec["cut"]))
            stack.append((right, rec["right"]))
            stack.append((left, rec["left"]))
        return tree

    def to_flat(self):
        """Compact arrays (var, cut, left, right, mu) with the root at index 0."""
        order = self.subtree(0)
        pos = {old: new for new, old in enumerate(order)}
        var = np.array([self.var[i] for i in order], dtype=np.int32)
        cut = np.array([self.cut[i] for i in order])
        left = np.array([pos[self.left[i]] if self.var[i] >= 0 else -1 for i in order], dtype=np.int32)
        right = np.array([pos[self.right[i]] if self.var[i] >= 0 else -1 for i in order], dtype=np.int32)
        mu = np.array([self.mu[i] if self.var[i] < 0 else 0.0 for i in order])
        return var, cut, left, right, mu

    def structure_equal(self, other):
        return _strip(self.to_record()) == _strip(other.to_record())

    def __repr__(self):
        return f"RegressionTree({self.to_record()!r})"


def _strip(rec):
    if "leaf" in rec:
        return "leaf"
    return (rec["var"], rec["cut"], _strip(rec["left"]), _strip(rec["right"]))


def check_tree(tree):
    """Assert the proper-binary-tree invariants; returns the number of leaves."""
    live = tree.live()
    n_int = n_leaf = 0
    for i in live:
        if tree.var[i] >= 0:
            n_int += 1
            for c in (tree.left[i], tree.right[i]):
                assert tree.depth[c] == tree.depth[i] + 1, (i, c)
                assert tree.parent[c] == i, (i, c)
        else:
            n_leaf += 1
    assert n_leaf == n_int + 1, (n_leaf, n_int)
    assert sorted(tree.subtree(0)) == sorted(live)
    return n_leaf


# -- routing -----------------------------------------------------------------


def route(tree, X, rows, node=0):
    """Yield ``(leaf, row indices)`` for the subtree rooted at `node`."""
    stack = [(node, rows)]
    var, cut, left, right = tree.var, tree.cut, tree.left, tree.right
    while stack:
        i, r = stack.pop()
        if var[i] < 0:
            yield i, r
            continue
        go_left = X[r, var[i]] <= cut[i]
        stack.append((right[i], r[~go_left]))
        stack.append((left[i], r[go_left]))


def assign_leaves(tree, X):
    """Leaf slot index for every row of `X`."""
    X = _raw(X)
    X = np.atleast_2d(X)
    out = np.empty(X.shape[0], dtype=np.int64)
    for leaf, rows in route(tree, X, np.arange(X.shape[0])):
        out[rows] = leaf
    return out


def node_rows(tree, X):
    """Rows map: training row indices reaching every live node (None for free slots)."""
    X = _raw(X)
    rows_map = [None] * len(tree.depth)
    _fill_rows(tree, X, 0, np.arange(X.shape[0]), rows_map)
    return rows_map


def _fill_rows(tree, X, node, rows, rows_map):
    stack = [(node, rows)]
    while stack:
        i, r = stack.pop()
        rows_map[i] = r
        if tree.var[i] >= 0:
            go_left = X[r, tree.var[i]] <= tree.cut[i]
            stack.append((tree.right[i], r[~go_left]))
            stack.append((tree.left[i], r[go_left]))


# -- split rules ---------------------------------------------------------------


class NoValidSplit(Exception):
    """No predictor has two distinct values among the node's rows."""


class SplitData:
    """Training design as seen by the split machinery.

    When no column of `X` has repeated values (the usual case for lagged
    continuous series) every predictor is splittable at any node with two
    or more rows and has ``len(rows) - 1`` cutpoints there, which avoids
    sorting at every node.
    """

    def __init__(self, X):
        self.X = np.ascontiguousarray(X, dtype=float)
        self.cols = [np.ascontiguousarray(c) for c in self.X.T]
        self.k = self.X.shape[1]
        self.ties = any(len(np.unique(c)) < len(c) for c in self.cols)

    @property
    def shape(self):
        return self.X.shape

    def valid(self, rows):
        if len(rows) < 2:
            return np.zeros(self.k, dtype=bool)
        if not self.ties:
            return np.ones(self.k, dtype=bool)
        Xn = self.X[rows]
        return Xn.min(axis=0) < Xn.max(axis=0)

    def splittable(self, rows):
        if len(rows) < 2:
            return False
        return not self.ties or bool(self.valid(rows).any())

    def n_cuts(self, rows, q):
        if not self.ties:
            return len(rows) - 1
        return len(cutpoints(self.cols[q][rows]))

    def valid_mass(self, s, rows):
        if not self.ties:
            return float(s.sum()) if len(rows) >= 2 else 0.0
        return float(s[self.valid(rows)].sum())

    def draw_cut(self, rows, q, rng):
        vals = self.cols[q][rows]
        if self.ties:
            cuts = cutpoints(vals)
            return float(cuts[rng.integers(len(cuts))])
        top = vals.max()
        while True:
            c = vals[rng.integers(len(vals))]
            if c < top:
                return float(c)

    def admissible(self, rows, q, c):
        """Is `c` a cutpoint of predictor `q` for these rows."""
        vals = self.cols[q][rows]
        if len(vals) < 2 or not c < vals.max():
            return False
        return bool((vals == c).any())


def as_split_data(X):
    return X if isinstance(X, SplitData) else SplitData(X)


def _raw(X):
    return X.X if isinstance(X, SplitData) else np.asarray(X, dtype=float)


def valid_predictors(Xn):
    if Xn.shape[0] < 2:
        return np.zeros(Xn.shape[1], dtype=bool)
    return Xn.min(axis=0) < Xn.max(axis=0)


def cutpoints(column):
    """Admissible cutpoints: distinct values except the largest."""
    return np.unique(column)[:-1]


def sample_split_rule(s, X, rows, rng):
    """Draw ``(q, cut)`` at a node holding `rows`.

    `q` is drawn from `s` restricted to predictors with at least two distinct
    values at the node; the cutpoint uniformly from that predictor's
    admissible values. Raises `NoValidSplit` when nothing can be split.
    """
    data = as_split_data(X)
    s = np.asarray(s, dtype=float)
    valid = data.valid(rows)
    w = np.where(valid, s, 0.0)
    cdf = np.cumsum(w)
    total = cdf[-1]
    if not total > 0:
        raise NoValidSplit
    q = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    q = min(q, len(s) - 1)
    while not w[q] > 0:
        q -= 1
    return q, data.draw_cut(rows, q, rng)


# -- prior ---------------------------------------------------------------------


def node_log_prior(tree, i, rows, X, s, params):
    """Prior contribution of node `i` given the rows reaching it.

    Leaves contribute ``log(1 - p_split(d))`` when they could be split at all
    and 0 otherwise. Internal nodes contribute
    ``log p_split(d) + log(s_q / S) - log(#cutpoints)``, where `S` is the
    split-probability mass of predictors splittable at the node; a rule that
    is not admissible for the rows gives ``-inf``.
    """
    if len(rows) == 0:
        return -math.inf
    data = as_split_data(X)
    d = tree.depth[i]
    if tree.var[i] < 0:
        if not data.splittable(rows):
            return 0.0
        return math.log1p(-split_prob_at_depth(d, params))
    q, c = tree.var[i], tree.cut[i]
    if not data.admissible(rows, q, c):
        return -math.inf
    sq = s[q]
    p = split_prob_at_depth(d, params)
    if not (sq > 0 and p > 0):
        return -math.inf
    return math.log(p) + math.log(sq / data.valid_mass(s, rows)) - math.log(data.n_cuts(rows, q))


def subtree_log_prior(tree, node, rows_map, X, s, params):
    data = as_split_data(X)
    total = 0.0
    for i in tree.subtree(node):
        total += node_log_prior(tree, i, rows_map[i], data, s, params)
        if total == -math.inf:
            break
    return total


def log_tree_structure_prior(tree, params, s, X):
    """Log prior of the tree's shape and split rules given the design `X`."""
    data = as_split_data(X)
    s = np.asarray(s, dtype=float)
    rows_map = node_rows(tree, data)
    return subtree_log_prior(tree, 0, rows_map, data, s, params)


def sample_tree_prior(X, s, params, rng):
    """Exact draw from the tree prior (leaf values from N(0, tau2))."""
    data = as_split_data(X)
    tree = RegressionTree()
    stack = [(0, np.arange(data.shape[0]))]
    while stack:
        i, rows = stack.pop()
        p = split_prob_at_depth(tree.depth[i], params)
        split = False
        if rng.random() < p:
            try:
                q, c = sample_split_rule(s, data, rows, rng)
                split = True
            except NoValidSplit:
                pass
        if not split:
            tree.mu[i] = float(rng.normal(0.0, math.sqrt(params.tau2)))
            continue
        left, right = tree.split(i, q, c)
        go_left = data.cols[q][rows] <= c
        stack.append((right, rows[~go_left]))
        stack.append((left, rows[go_left]))
    return tree


# -- proposals -----------------------------------------------------------------


@dataclass
class Proposal:
    """A proposed tree and the bookkeeping needed to score it.

    `node` roots the only subtree that differs between the current and the
    proposed tree; `rows_map` is the proposed tree's rows map (shared with
    the current one outside that subtree).
    """

    tree: RegressionTree
    rows_map: list
    node: int
    log_ratio: float
    move: str


def _choose(rng, items):
    return items[int(rng.integers(len(items)))]


def _log_rule_mass(s, data, rows, q):
    return math.log(s[q] / data.valid_mass(s, rows)) - math.log(data.n_cuts(rows, q))


def propose_grow(tree, s, rows_map, X, rng, node=None):
    data = as_split_data(X)
    leaves = tree.leaves()
    b = len(leaves)
    if node is None:
        node = _choose(rng, leaves)
    rows = rows_map[node]
    try:
        q, c = sample_split_rule(s, data, rows, rng)
    except NoValidSplit:
        return None
    new = tree.copy()
    left, right = new.split(node, q, c)
    new_map = list(rows_map) + [None] * (len(new.depth) - len(rows_map))
    go_left = data.cols[q][rows] <= c
    new_map[left] = rows[go_left]
    new_map[right] = rows[~go_left]
    forward = math.log(MOVE_PROBS[GROW]) - math.log(b) + _log_rule_mass(s, data, rows, q)
    backward = math.log(MOVE_PROBS[PRUNE]) - math.log(len(new.nog_nodes()))
    return Proposal(new, new_map, node, backward - forward, GROW)


def propose_prune(tree, s, rows_map, X, rng, node=None):
    data = as_split_data(X)
    nogs = tree.nog_nodes()
    if not nogs:
        return None
    if node is None:
        node = _choose(rng, nogs)
    rows = rows_map[node]
    q = tree.var[node]
    new = tree.copy()
    left, right = new.collapse(node)
    new_map = list(rows_map)
    new_map[left] = new_map[right] = None
    forward = math.log(MOVE_PROBS[PRUNE]) - math.log(len(nogs))
    backward = math.log(MOVE_PROBS[GROW]) - math.log(new.n_leaves()) + _log_rule_mass(s, data, rows, q)
    return Proposal(new, new_map, node, backward - forward, PRUNE)


def propose_change(tree, s, rows_map, X, rng, node=None):
    data = as_split_data(X)
    internal = tree.internal()
    if not internal:
        return None
    if node is None:
        node = _choose(rng, internal)
    rows = rows_map[node]
    q_old = tree.var[node]
    q, c = sample_split_rule(s, data, rows, rng)
    new = tree.copy()
    new.var[node] = q
    new.cut[node] = c
    new_map = list(rows_map)
    _fill_rows(new, data.X, node, rows, new_map)
    forward = _log_rule_mass(s, data, rows, q)
    backward = _log_rule_mass(s, data, rows, q_old)
    return Proposal(new, new_map, node, backward - forward, CHANGE)


def propose_move(tree, s, rows_map, X, rng):
    """Draw a GROW (0.4), PRUNE (0.4) or CHANGE (0.2) proposal.

    Returns None when the drawn move is impossible for this tree, which the
    caller treats as a rejection.
    """
    u = rng.random()
    if u < _MOVE_CDF[0]:
        return propose_grow(tree, s, rows_map, X, rng)
    if u < _MOVE_CDF[1]:
        return propose_prune(tree, s, rows_map, X, rng)
    return propose_change(tree, s, rows_map, X, rng)
