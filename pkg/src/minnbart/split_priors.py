"""
Split-probability priors for one equation's forest.

Three regimes share the Dirichlet machinery:

- ``uniform``: ``s_q = 1/k`` held fixed (standard BART);
- ``sparse``: ``s ~ Dirichlet(lam/k, ..., lam/k)`` with a hyperprior
  ``lam / (lam + k) ~ Beta(0.5, 1)``;
- ``minnesota``: ``s ~ Dirichlet(phi)`` with ``phi`` decaying as ``1/l**2``
  in the lag and scaled down for other variables' lags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

REGIMES = ("uniform", "sparse", "minnesota")

# prior grids for the Minnesota scales
LAMBDA1_GRID = (1.0, 3.0, 5.0, 10.0, 20.0)
LAMBDA2_GRID = (0.5, 1.0, 1.5, 2.5, 5.0, 10.0)

LAMBDA_GRID_SIZE = 1000


class DegenerateVarianceError(ValueError):
    pass


@dataclass
class SplitPriorState:
    regime: str
    s: np.ndarray
    phi: np.ndarray
    log_s: np.ndarray = None
    lam: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    rho: np.ndarray | None = None
    counts: np.ndarray = None
    update_lambda: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown split-prior regime {self.regime!r}")
        self.s = np.asarray(self.s, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.log_s is None:
            with np.errstate(divide="ignore"):
                self.log_s = np.log(self.s)
        if self.counts is None:
            self.counts = np.zeros(len(self.s), dtype=np.int64)

    @property
    def k(self):
        return len(self.s)


def ar_residual_variances(values, p):
    """Residual variance of a least-squares AR(p) with intercept, per column.

    Uses the ``T - p - (p + 1)`` degrees-of-freedom correction.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    T, n = values.shape
    if T <= 2 * p + 1:
        raise ValueError(f"AR({p}) needs more than {2 * p + 1} observations, got {T}")
    out = np.empty(n)
    for i in range(n):
        y = values[:, i]
        if not np.ptp(y) > 0:
            raise DegenerateVarianceError(f"column {i} is constant")
        Z = np.column_stack([np.ones(T - p)] + [y[p - l:T - l] for l in range(1, p + 1)])
        coef, _, rank, _ = np.linalg.lstsq(Z, y[p:], rcond=None)
        if rank < Z.shape[1]:
            raise DegenerateVarianceError(f"AR({p}) regression for column {i} is singular")
        resid = y[p:] - Z @ coef
        out[i] = resid @ resid / (T - p - Z.shape[1])
        if not out[i] > 0:
            raise DegenerateVarianceError(f"column {i} has zero residual variance")
    return out


def minnesota_scales(i, n, p, lambda1, lambda2, sigma2):
    """Dirichlet scales for equation `i` (0-based) over the ``k = n p`` lag columns."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("AR residual variances must be positive")
    q = np.arange(n * p)
    lag = q // n + 1
    var = q % n
    own = var == i
    cross = lambda2 * sigma2[i] / sigma2[var]
    return np.where(own, lambda1, cross) / lag.astype(float) ** 2


def sparse_scales(k, lam):
    if not lam > 0 or k < 1:
        raise ValueError(f"need lam > 0 and k >= 1, got lam={lam}, k={k}")
    return np.full(k, lam / k)


def log_dirichlet(alpha, rng, size=None):
    """Log of Dirichlet draws, stable for very small concentrations.

    Uses ``Gamma(a) = Gamma(a + 1) * U**(1/a)`` so the log of each gamma
    variate never underflows.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0)):
        raise ValueError("Dirichlet parameters must be positive")
    shape = alpha.shape if size is None else (size,) + alpha.shape
    g = rng.standard_gamma(alpha + 1.0, size=shape)
    u = rng.random(shape)
    with np.errstate(divide="ignore"):
        logg = np.log(g) + np.log(u) / alpha
    # plain max-shift: scipy's logsumexp costs more than the draw itself here
    logg -= logg.max(axis=-1, keepdims=True)
    return logg - np.log(np.exp(logg).sum(axis=-1, keepdims=True))


def dirichlet_draws(alpha, m, rng):
    """`m` independent draws on the simplex, shape ``(m, len(alpha))``."""
    s = np.exp(log_dirichlet(alpha, rng, size=m))
    return s / s.sum(axis=1, keepdims=True)


def update_split_probs(phi, counts, rng):
    """Conjugate draw ``s ~ Dirichlet(phi + counts)``; returns ``(s, log_s)``."""
    alpha = np.asarray(phi, dtype=float) + np.asarray(counts, dtype=float)
    log_s = log_dirichlet(alpha, rng)
    s = np.exp(log_s)
    return s / s.sum(), log_s


def _lambda_cells(k):
    edges = np.linspace(0.0, 1.0, LAMBDA_GRID_SIZE + 1)
    # prior mass of Beta(0.5, 1) on each cell: sqrt(b) - sqrt(a)
    root = np.sqrt(edges)
    mass = np.diff(root)
    mid_u = (0.5 * (root[:-1] + root[1:])) ** 2
    lam = k * mid_u / (1.0 - mid_u)
    return root, mass, lam


def lambda_log_likelihood(lam, log_s):
    """Log density of `log_s` under a symmetric Dirichlet(lam/k) for each `lam`."""
    lam = np.asarray(lam, dtype=float)
    k = len(log_s)
    sum_log = float(np.sum(log_s))
    return gammaln(lam) - k * gammaln(lam / k) + (lam / k - 1.0) * sum_log


def lambda_grid_posterior(log_s, k):
    """Cell probabilities of ``lam/(lam+k)`` over the grid, and the cells' lambdas."""
    root, mass, lam = _lambda_cells(k)
    logw = np.log(mass)
    if log_s is not None:
        logw = logw + lambda_log_likelihood(lam, log_s)
    w = np.exp(logw - logw.max())
    return w / w.sum(), lam, root


def update_lambda(log_s, k, rng):
    """Draw ``lam`` given the current split probabilities.

    The full conditional of ``u = lam/(lam+k)`` is discretized on a uniform
    grid of cells; a cell is drawn with weight prior mass times the
    likelihood at its center and `u` is then drawn from the Beta(0.5, 1)
    prior restricted to that cell. With ``log_s=None`` this is an exact
    prior draw.
    """
    w, _, root = lambda_grid_posterior(log_s, k)
    cell = int(np.searchsorted(np.cumsum(w), rng.random() * 1.0, side="right"))
    cell = min(cell, len(w) - 1)
    r = root[cell] + rng.random() * (root[cell + 1] - root[cell])
    u = min(r * r, 1.0 - 1e-12)
    u = max(u, 1e-300)
    return k * u / (1.0 - u)


def expected_active_predictors(lam, B):
    """Poisson mean ``lam * sum_{i<B} 1/(lam + i)`` for the number of predictors used."""
    i = np.arange(int(B))
    return float(lam * np.sum(1.0 / (lam + i)))


def init_split_prior(regime, i, n, p, *, lambda1=1.0, lambda2=0.5, lam=1.0,
                     sigma2=None, update_lambda=True):
    """Prior state for equation `i`, with `s` started at the prior mean."""
    k = n * p
    rho = None
    if regime == "uniform":
        phi = np.full(k, 1.0)
    elif regime == "sparse":
        phi = sparse_scales(k, lam)
    elif regime == "minnesota":
        if sigma2 is None:
            raise ValueError("the Minnesota regime needs AR residual variances")
        sigma2 = np.asarray(sigma2, dtype=float)
        phi = minnesota_scales(i, n, p, lambda1, lambda2, sigma2)
        rho = sigma2[:, None] / sigma2[None, :]
    else:
        raise ValueError(f"unknown split-prior regime {regime!r}")
    s = phi / phi.sum()
    return SplitPriorState(regime, s, phi, lam=lam, lambda1=lambda1, lambda2=lambda2,
                           rho=rho, update_lambda=update_lambda)


def gibbs_update(state, counts, rng):
    """Refresh `s` (and `lam` in the sparse regime) from the forest's split counts."""
    state.counts = np.asarray(counts, dtype=np.int64)
    if state.regime == "uniform":
        return state
    if state.regime == "sparse":
        state.phi = sparse_scales(state.k, state.lam)
    state.s, state.log_s = update_split_probs(state.phi, state.counts, rng)
    if state.regime == "sparse" and state.update_lambda:
        state.lam = update_lambda(state.log_s, state.k, rng)
        state.phi = sparse_scales(state.k, state.lam)
    return state
