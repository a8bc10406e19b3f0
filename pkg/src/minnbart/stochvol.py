"""
Univariate stochastic volatility: ``e_t = exp(h_t / 2) eps_t`` with

    h_t = mu + phi (h_{t-1} - mu) + eta_t,   eta_t ~ N(0, sigma2),
    h_1 ~ N(mu, sigma2 / (1 - phi**2)).

The log-volatility path is drawn by forward filtering, backward sampling on
``log(e_t**2 + c) = h_t + log(eps_t**2)`` with the 10-component normal
mixture approximation of ``log chi2_1``. Hyperparameters are updated
one at a time (sigma2, phi by Metropolis-Hastings; mu exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

# 10-component normal mixture for log(chi2_1)
MIX_PROB = np.array([0.00609, 0.04775, 0.13057, 0.20674, 0.22715,
                     0.18842, 0.12047, 0.05591, 0.01575, 0.00115])
MIX_MEAN = np.array([1.92677, 1.34744, 0.73504, 0.02266, -0.85173,
                     -1.97278, -3.46788, -5.55246, -8.68384, -14.65000])
MIX_VAR = np.array([0.11265, 0.17788, 0.26768, 0.40611, 0.62699,
                    0.98583, 1.57469, 2.54498, 4.16591, 7.33342])
_MIX_LOGW = np.log(MIX_PROB) - 0.5 * np.log(MIX_VAR)

OFFSET = 1e-6


@dataclass(frozen=True)
class SVPrior:
    """``mu ~ N(mu_mean, mu_var)``, ``(phi+1)/2 ~ Beta(phi_a, phi_b)``,
    ``sigma2 ~ sigma2_scale * chi2_1``."""

    mu_mean: float = 0.0
    mu_var: float = 100.0
    phi_a: float = 5.0
    phi_b: float = 1.5
    sigma2_scale: float = 1.0


@dataclass
class SVParams:
    mu: float
    phi: float
    sigma2: float

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise ValueError(f"phi must lie in (-1, 1), got {self.phi}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


def log_squared(shocks, offset=OFFSET):
    shocks = np.asarray(shocks, dtype=float)
    if not np.all(np.isfinite(shocks)):
        raise FloatingPointError("non-finite shocks")
    return np.log(shocks * shocks + offset)


def sample_indicators(y_star, h, rng):
    """Mixture component of each ``log eps_t**2 = y*_t - h_t``."""
    d = (y_star - h)[:, None] - MIX_MEAN[None, :]
    logp = _MIX_LOGW[None, :] - 0.5 * d * d / MIX_VAR[None, :]
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(y_star)) * cdf[:, -1]
    z = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(z, len(MIX_PROB) - 1)


def ffbs(y, obs_mean, obs_var, mu, phi, sigma2, rng):
    """Draw ``h_{1:T}`` given ``y_t = h_t + obs_mean_t + N(0, obs_var_t)``.

    `obs_var` may be infinite, meaning no information at that time.
    """
    T = len(y)
    y = np.asarray(y, dtype=float).tolist()
    om = np.asarray(obs_mean, dtype=float).tolist()
    ov = np.asarray(obs_var, dtype=float).tolist()
    z = rng.standard_normal(T).tolist()
    m = [0.0] * T
    C = [0.0] * T
    a = mu
    P = sigma2 / (1.0 - phi * phi)
    for t in range(T):
        K = P / (P + ov[t])
        m_t = a + K * (y[t] - om[t] - a)
        C_t = P * (1.0 - K)
        m[t] = m_t
        C[t] = C_t
        a = mu + phi * (m_t - mu)
        P = phi * phi * C_t + sigma2
    h = [0.0] * T
    h[-1] = m[-1] + math.sqrt(C[-1]) * z[-1]
    for t in range(T - 2, -1, -1):
        C_t = C[t]
        denom = phi * phi * C_t + sigma2
        gain = C_t * phi / denom
        mean = m[t] + gain * (h[t + 1] - mu - phi * (m[t] - mu))
        var = C_t - gain * phi * C_t
        h[t] = mean + math.sqrt(max(var, 0.0)) * z[t]
    return np.array(h)


def sample_sv_path(shocks, h, params, rng, *, y_star=None):
    """Draw a new log-variance path for one series.

    Returns the path and the mixture indicators used.
    """
    if y_star is None:
        y_star = log_squared(shocks)
    z = sample_indicators(y_star, h, rng)
    h_new = ffbs(y_star, MIX_MEAN[z], MIX_VAR[z], params.mu, params.phi, params.sigma2, rng)
    return h_new, z


def _truncated_normal(mean, sd, lo, hi, rng, tries=50):
    for _ in range(tries):
        x = mean + sd * rng.standard_normal()
        if lo < x < hi:
            return x
    a, b = (lo - mean) / sd, (hi - mean) / sd
    x = float(stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))
    return min(max(x, np.nextafter(lo, hi)), np.nextafter(hi, lo))


def _log_phi_extra(phi, x1, sigma2, prior):
    # prior on phi and the stationary h_1 term, the parts outside the proposal
    return ((prior.phi_a - 1.0) * math.log1p(phi) + (prior.phi_b - 1.0) * math.log1p(-phi)
            + 0.5 * math.log1p(-phi * phi) - 0.5 * (1.0 - phi * phi) * x1 * x1 / sigma2)


def sample_sv_hyper(h, params, prior, rng, *, fix_mu=False):
    """Update ``(sigma2, phi, mu)`` given the path `h`; returns new `SVParams`.

    With `fix_mu` the level stays at its current value (factor log-variances
    are pinned at level 0 to fix the scale of the factors).
    """
    h = np.asarray(h, dtype=float)
    T = len(h)
    if T < 2:
        raise ValueError("need at least two time points")
    mu, phi, sigma2 = params.mu, params.phi, params.sigma2

    # sigma2: independence MH, IG proposal from the likelihood and the x^(-1/2) prior kernel
    x = h - mu
    resid = x[1:] - phi * x[:-1]
    S = float(resid @ resid) + (1.0 - phi * phi) * x[0] * x[0]
    shape = 0.5 * (T - 1)
    prop = 0.5 * S / rng.standard_gamma(shape)
    log_acc = -(prop - sigma2) / (2.0 * prior.sigma2_scale)
    if log_acc >= 0 or math.log(rng.random()) < log_acc:
        sigma2 = prop

    # phi: truncated normal proposal from the t >= 2 regression
    sxx = float(x[:-1] @ x[:-1])
    if sxx > 0:
        phi_hat = float(x[1:] @ x[:-1]) / sxx
        prop = _truncated_normal(phi_hat, math.sqrt(sigma2 / sxx), -1.0, 1.0, rng)
        log_acc = _log_phi_extra(prop, x[0], sigma2, prior) - _log_phi_extra(phi, x[0], sigma2, prior)
        if log_acc >= 0 or math.log(rng.random()) < log_acc:
            phi = prop

    if fix_mu:
        return SVParams(mu, phi, sigma2)

    # mu: Gaussian full conditional
    prec = 1.0 / prior.mu_var + ((1.0 - phi * phi) + (T - 1) * (1.0 - phi) ** 2) / sigma2
    num = (prior.mu_mean / prior.mu_var
           + ((1.0 - phi * phi) * h[0] + (1.0 - phi) * float(np.sum(h[1:] - phi * h[:-1]))) / sigma2)
    mu = num / prec + rng.standard_normal() / math.sqrt(prec)
    return SVParams(mu, phi, sigma2)


def sample_prior_params(prior, rng):
    mu = prior.mu_mean + math.sqrt(prior.mu_var) * rng.standard_normal()
    phi = 2.0 * rng.beta(prior.phi_a, prior.phi_b) - 1.0
    sigma2 = prior.sigma2_scale * rng.chisquare(1)
    return SVParams(mu, phi, sigma2)


def simulate_path(params, T, rng):
    h = np.empty(T)
    h[0] = params.mu + math.sqrt(params.sigma2 / (1 - params.phi ** 2)) * rng.standard_normal()
    eta = math.sqrt(params.sigma2) * rng.standard_normal(T)
    for t in range(1, T):
        h[t] = params.mu + params.phi * (h[t - 1] - params.mu) + eta[t]
    return h


def step_forward(h_last, params, rng):
    """One-step-ahead log-variance draw(s) from the AR(1) transition."""
    h_last = np.asarray(h_last, dtype=float)
    mu, phi, sigma2 = (np.asarray(v, dtype=float) for v in params)
    return mu + phi * (h_last - mu) + np.sqrt(sigma2) * rng.standard_normal(h_last.shape)
