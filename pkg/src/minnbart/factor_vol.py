"""
Error covariance block: ``e_t = Lambda f_t + eta_t`` with
``eta_t ~ N(0, diag(exp(h_1..n,t)))`` and ``f_t ~ N(0, diag(exp(h_n+1..n+r,t)))``.

Loadings columns get a horseshoe prior, sampled through the inverse-gamma
auxiliary representation::

    Lambda_ij ~ N(0, lam2_ij * tau2_j)
    lam2_ij | nu_ij ~ IG(1/2, 1/nu_ij),   nu_ij ~ IG(1/2, 1)
    tau2_j  | xi_j  ~ IG(1/2, 1/xi_j),    xi_j  ~ IG(1/2, 1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stochvol import (
    SVParams,
    SVPrior,
    log_squared,
    sample_sv_hyper,
    sample_sv_path,
)


def inv_gamma(shape, scale, rng):
    """IG(shape, scale) draws, broadcasting over the arguments."""
    return np.asarray(scale) / rng.standard_gamma(shape, size=np.broadcast(shape, scale).shape)


@dataclass
class HorseshoeState:
    lam2: np.ndarray
    nu: np.ndarray
    tau2: np.ndarray
    xi: np.ndarray

    @classmethod
    def init(cls, n, r):
        return cls(np.ones((n, r)), np.ones((n, r)), np.ones(r), np.ones(r))

    def prior_variances(self):
        """``W`` entries: prior variance of every loading, shape (n, r)."""
        return self.lam2 * self.tau2[None, :]


# exact-zero columns make the scale conditionals improper near 0; keep them finite
SCALE_BOUNDS = (1e-50, 1e50)


def _clip(x):
    return np.clip(x, *SCALE_BOUNDS)


def sample_horseshoe(Lambda, hs, rng):
    """One sweep of the auxiliary-variable horseshoe updates, all columns at once."""
    Lambda = np.asarray(Lambda, dtype=float)
    if not np.all(np.isfinite(Lambda)):
        raise FloatingPointError("non-finite loadings")
    n = Lambda.shape[0]
    b2 = Lambda * Lambda
    hs.lam2 = _clip(inv_gamma(1.0, 1.0 / hs.nu + b2 / (2.0 * hs.tau2[None, :]), rng))
    hs.nu = _clip(inv_gamma(1.0, 1.0 + 1.0 / hs.lam2, rng))
    hs.tau2 = _clip(inv_gamma(0.5 * (n + 1), 1.0 / hs.xi + np.sum(b2 / hs.lam2, axis=0) / 2.0, rng))
    hs.xi = _clip(inv_gamma(1.0, 1.0 + 1.0 / hs.tau2, rng))
    return hs


def sample_loadings_row(F_tilde, y_tilde, prior_var, rng):
    """``Lambda_i ~ N(Wbar F~' y~, Wbar)`` with ``Wbar = (F~'F~ + W^-1)^-1``.

    `F_tilde` and `y_tilde` are the factors and the mean-adjusted response
    already divided by the observation's idiosyncratic standard deviation.
    """
    F_tilde = np.asarray(F_tilde, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    if not (np.all(np.isfinite(F_tilde)) and np.all(np.isfinite(y_tilde))):
        raise FloatingPointError("non-finite volatility-normalized inputs")
    prec = F_tilde.T @ F_tilde + np.diag(1.0 / np.asarray(prior_var, dtype=float))
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, F_tilde.T @ y_tilde))
    z = rng.standard_normal(len(mean))
    return mean + np.linalg.solve(L.T, z)


def sample_loadings(E, F, h_idio, W, rng):
    """Draw every row of the loadings matrix; `E` is T x n, `h_idio` n x T."""
    n, r = W.shape
    Lambda = np.empty((n, r))
    for i in range(n):
        scale = np.exp(-0.5 * h_idio[i])
        Lambda[i] = sample_loadings_row(F * scale[:, None], E[:, i] * scale, W[i], rng)
    return Lambda


def sample_factors(E, Lambda, h_idio, h_fac, rng):
    """Draw ``f_t`` for all t from ``N(B_t Lambda' Omega_t^-1 e_t, B_t)``.

    ``B_t = (H_t^-1 + Lambda' Omega_t^-1 Lambda)^-1``; `h_idio` is n x T and
    `h_fac` r x T.
    """
    T = E.shape[0]
    r = Lambda.shape[1]
    w = np.exp(-h_idio).T                     # T x n idiosyncratic precisions
    prec = np.einsum("ti,ij,ik->tjk", w, Lambda, Lambda)
    prec[:, np.arange(r), np.arange(r)] += np.exp(-h_fac).T
    rhs = np.einsum("ti,ij->tj", w * E, Lambda)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal((T, r))
    # L^-T z has covariance prec^-1
    noise = np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
    return mean + noise


def sample_factor_t(residual, Lambda, omega, hvar, rng):
    """Single-period version of `sample_factors` with variances given directly."""
    residual = np.asarray(residual, dtype=float)
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    omega = np.asarray(omega, dtype=float)
    prec = np.diag(1.0 / np.asarray(hvar, dtype=float)) + Lambda.T @ (Lambda / omega[:, None])
    B = np.linalg.inv(prec)
    mean = B @ (Lambda.T @ (residual / omega))
    L = np.linalg.cholesky(B)
    return mean + L @ rng.standard_normal(len(mean))


def sample_sigma2_homoskedastic(residuals, a0, b0, rng):
    """Conjugate draw from ``IG(a0 + T/2, b0 + sum(r**2)/2)``."""
    r = np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite residuals")
    return float(b0 + 0.5 * (r @ r)) / rng.standard_gamma(a0 + 0.5 * r.size)


def covariance(Lambda, h_idio, h_fac):
    """``Lambda diag(exp h_fac) Lambda' + diag(exp h_idio)`` (vectorized over leading axes)."""
    Lambda = np.asarray(Lambda, dtype=float)
    hf = np.exp(np.asarray(h_fac, dtype=float))
    out = np.einsum("...ij,...j,...kj->...ik", Lambda, hf, Lambda)
    idx = np.arange(Lambda.shape[-2])
    out[..., idx, idx] += np.exp(np.asarray(h_idio, dtype=float))
    return out


@dataclass
class FactorVolState:
    """Covariance-block state.

    `h` stacks the n idiosyncratic then the r factor log-variance paths
    (shape (n + r) x T). Under homoskedastic errors `h` is held at
    ``log sigma2`` for the idiosyncratic rows and 0 for the factor rows.
    """

    Lambda: np.ndarray
    F: np.ndarray
    h: np.ndarray
    sv: list
    horseshoe: HorseshoeState
    indicators: np.ndarray
    sigma2: np.ndarray | None = None
    sv_prior: SVPrior = field(default_factory=SVPrior)

    @property
    def n(self):
        return self.Lambda.shape[0]

    @property
    def r(self):
        return self.Lambda.shape[1]

    def sv_arrays(self):
        return (np.array([p.mu for p in self.sv]), np.array([p.phi for p in self.sv]),
                np.array([p.sigma2 for p in self.sv]))


def init_factor_vol(E, r, volatility, sv_prior=None, homo_a0=3.0, homo_scale=0.5):
    """Start with zero loadings and factors and log-variances at the residual variance."""
    T, n = E.shape
    var = np.maximum(E.var(axis=0), 1e-8)
    h = np.zeros((n + r, T))
    h[:n] = np.log(var)[:, None]
    sv = [SVParams(float(np.log(var[i])), 0.9, 0.1) for i in range(n)] + \
         [SVParams(0.0, 0.9, 0.1) for _ in range(r)]
    sigma2 = var.copy() if volatility == "homoskedastic" else None
    return FactorVolState(np.zeros((n, r)), np.zeros((T, r)), h, sv, HorseshoeState.init(n, r),
                          np.zeros((n + r, T), dtype=np.int64), sigma2,
                          sv_prior if sv_prior is not None else SVPrior())


def update_factor_vol(state, E, rng, *, volatility="sv", homo_prior=None):
    """Loadings and horseshoe, then factors, then volatilities.

    `E` holds the T x n residuals ``y_t - G(x_t)``. `homo_prior` is an
    ``(a0, b0)`` pair of length-n arrays for the homoskedastic case.
    """
    n, r = state.n, state.r
    if r > 0:
        state.Lambda = sample_loadings(E, state.F, state.h[:n], state.horseshoe.prior_variances(), rng)
        sample_horseshoe(state.Lambda, state.horseshoe, rng)
        state.F = sample_factors(E, state.Lambda, state.h[:n], state.h[n:], rng)
        idio = E - state.F @ state.Lambda.T
    else:
        idio = E
    if volatility == "homoskedastic":
        a0, b0 = homo_prior
        state.sigma2 = np.array([sample_sigma2_homoskedastic(idio[:, i], a0[i], b0[i], rng)
                                 for i in range(n)])
        state.h[:n] = np.log(state.sigma2)[:, None]
        state.h[n:] = 0.0
        return state
    shocks = np.vstack([idio.T, state.F.T]) if r > 0 else idio.T
    for i in range(n + r):
        y_star = log_squared(shocks[i])
        state.h[i], state.indicators[i] = sample_sv_path(None, state.h[i], state.sv[i], rng, y_star=y_star)
        state.sv[i] = sample_sv_hyper(state.h[i], state.sv[i], state.sv_prior, rng, fix_mu=i >= n)
    return state
