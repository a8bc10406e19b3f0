"""Shared simulators and statistics for the test suite."""

from __future__ import annotations

import math

import numpy as np

from minnbart.bart import EquationForest, backfit_sweep
from minnbart.data import TimeSeriesPanel
from minnbart.factor_vol import sample_sigma2_homoskedastic
from minnbart.split_priors import update_split_probs
from minnbart.tree import TreePriorParams, sample_tree_prior


def batch_means_ess(x, n_batches=50):
    """Effective sample size from the batch-means variance estimate."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    x = x[: m * n_batches]
    var = x.var(ddof=1)
    if var == 0:
        return float(len(x))
    bvar = x.reshape(n_batches, m).mean(axis=1).var(ddof=1)
    return float(min(len(x), len(x) * var / (m * bvar)))


def geweke_z(marginal, successive):
    """Difference of means over its standard error, the chain's variance from batch means."""
    a, b = np.asarray(marginal, float), np.asarray(successive, float)
    ess = batch_means_ess(b)
    se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / ess)
    return (a.mean() - b.mean()) / se, ess


class BartGeweke:
    """Joint (trees, s, sigma2, y) simulators for a single homoskedastic equation."""

    def __init__(self, X, M, params, a0, b0, phi=None):
        self.X = np.asarray(X, dtype=float)
        self.M, self.params, self.a0, self.b0 = M, params, a0, b0
        self.k = self.X.shape[1]
        self.phi = None if phi is None else np.asarray(phi, dtype=float)

    def prior(self, rng):
        sigma2 = self.b0 / rng.standard_gamma(self.a0)
        s = np.full(self.k, 1.0 / self.k) if self.phi is None else rng.dirichlet(self.phi)
        trees = [sample_tree_prior(self.X, s, self.params, rng) for _ in range(self.M)]
        return EquationForest(self.X, self.M, trees), s, sigma2

    def data(self, forest, sigma2, rng):
        return forest.fit + math.sqrt(sigma2) * rng.standard_normal(len(forest.fit))

    @staticmethod
    def stats(forest, s, sigma2):
        splits = sum(len(t.internal()) for t in forest.trees)
        return splits, sigma2, float(forest.fit.mean()), float(s[0])

    def marginal_conditional(self, n, rng):
        out = []
        for _ in range(n):
            forest, s, sigma2 = self.prior(rng)
            out.append(self.stats(forest, s, sigma2))
        return np.array(out)

    def successive_conditional(self, n, rng, thin=1):
        forest, s, sigma2 = self.prior(rng)
        out = []
        T = len(forest.fit)
        for it in range(n * thin):
            y = self.data(forest, sigma2, rng)
            backfit_sweep(forest, y, 0.0, np.full(T, 1.0 / sigma2), self.params, s, rng)
            if self.phi is not None:
                s, _ = update_split_probs(self.phi, forest.counts(self.k), rng)
            sigma2 = sample_sigma2_homoskedastic(y - forest.fit, self.a0, self.b0, rng)
            if (it + 1) % thin == 0:
                out.append(self.stats(forest, s, sigma2))
        return np.array(out)


def simulate_var1(A, T, rng, sd=1.0, burn=100):
    """``y_t = A y_{t-1} + sd * e_t`` as a panel with unit transform codes."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    y = np.zeros((T + burn, n))
    for t in range(1, T + burn):
        y[t] = A @ y[t - 1] + sd * rng.standard_normal(n)
    names = [f"y{i + 1}" for i in range(n)]
    return TimeSeriesPanel(names, y[burn:], (1,) * n, [f"t{i}" for i in range(T)])


def tree_params(tau2=0.1, gamma=0.95, beta=0.2):
    return TreePriorParams(gamma, beta, tau2)
