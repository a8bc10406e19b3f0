"""
Predictive simulation and forecast evaluation.

Every saved draw contributes one Gaussian component per horizon: the
forest means at the current lag vector and ``Sigma = Lambda H Lambda' + Omega``
with log-variances stepped forward once per horizon. A path value is drawn
from that component and pushed into the lag vector for the next horizon.
Scores use the one-step-ahead mixture in original units.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import lag_vector, standardize
from .factor_vol import covariance
from .gibbs import run_chain

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class EvaluationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# -- forest evaluation -------------------------------------------------------------


class PackedForests:
    """All saved forests of one chain, evaluated draw-by-draw in bulk."""

    def __init__(self, chain):
        self.trees = chain.trees
        self.n = chain.n

    def predict(self, X):
        """Conditional means for draw ``d`` at row ``X[d]``; returns (D, n)."""
        X = np.asarray(X, dtype=float)
        D = X.shape[0]
        out = np.empty((D, self.n))
        for j, nodes in enumerate(self.trees):
            var, cut, left, right = nodes["var"], nodes["cut"], nodes["left"], nodes["right"]
            idx = nodes["roots"][:D].copy()
            rows = np.broadcast_to(np.arange(D)[:, None], idx.shape)
            while True:
                v = var[idx]
                inner = v >= 0
                if not inner.any():
                    break
                x = X[rows, np.where(inner, v, 0)]
                nxt = np.where(x <= cut[idx], left[idx], right[idx])
                idx = np.where(inner, nxt, idx)
            out[:, j] = nodes["mu"][idx].sum(axis=1)
        return out


@dataclass
class PredictiveDraws:
    """Per-draw predictive components and simulated paths (standardized units).

    `means`, `paths`: (D, h, n); `covs`: (D, h, n, n); `valid`: (D,) mask of
    draws whose covariances were positive definite at every horizon.
    """

    means: np.ndarray
    covs: np.ndarray
    paths: np.ndarray
    valid: np.ndarray
    scaling: np.ndarray | None = None

    @property
    def n_excluded(self):
        return int((~self.valid).sum())

    def original_units(self):
        """Same draws after undoing the standardization."""
        if self.scaling is None:
            return self
        c, s = self.scaling
        return PredictiveDraws(self.means * s + c, self.covs * np.multiply.outer(s, s),
                               self.paths * s + c, self.valid, None)

    def point_forecast(self):
        """Predictive mean per horizon, (h, n)."""
        return self.paths[self.valid].mean(axis=0)


def _batched_cholesky(S):
    """Cholesky factors and a mask of which matrices were positive definite."""
    try:
        return np.linalg.cholesky(S), np.ones(S.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(S)
        ok = np.zeros(S.shape[0], dtype=bool)
        for d in range(S.shape[0]):
            try:
                L[d] = np.linalg.cholesky(S[d])
                ok[d] = True
            except np.linalg.LinAlgError:
                pass
        return L, ok


def simulate_forecast_paths(chain, x_last, h_max, rng):
    """Simulate one predictive path per saved draw out to horizon `h_max`.

    `x_last` is the lag vector ``(y_t', ..., y_{t-p+1}')`` in the chain's
    standardized units.
    """
    if h_max < 1:
        raise ValueError("h_max must be at least 1")
    x_last = np.asarray(x_last, dtype=float)
    D, n = chain.n_draws, chain.n
    if x_last.shape != (chain.k,):
        raise ValueError(f"lag vector has shape {x_last.shape}, expected ({chain.k},)")
    forests = PackedForests(chain)
    X = np.tile(x_last, (D, 1))
    h = chain.h_last.copy()
    sv = chain.volatility == "sv"
    means = np.empty((D, h_max, n))
    covs = np.empty((D, h_max, n, n))
    paths = np.empty((D, h_max, n))
    valid = np.ones(D, dtype=bool)
    for step in range(h_max):
        if sv:
            h = chain.sv_mu + chain.sv_phi * (h - chain.sv_mu) + np.sqrt(chain.sv_sigma2) * rng.standard_normal(h.shape)
            S = covariance(chain.Lambda, h[:, :n], h[:, n:])
        else:
            S = covariance(chain.Lambda, np.log(chain.sigma2), np.zeros(h[:, n:].shape))
        mean = forests.predict(X)
        L, ok = _batched_cholesky(S)
        valid &= ok & np.all(np.isfinite(S), axis=(1, 2))
        z = rng.standard_normal((D, n))
        y = mean + np.einsum("dij,dj->di", L, z)
        means[:, step], covs[:, step], paths[:, step] = mean, S, y
        X = np.concatenate([y, X[:, :-n]], axis=1) if chain.k > n else y.copy()
    if not valid.all():
        log.warning("%d of %d draws had a covariance that is not positive definite", (~valid).sum(), D)
    return PredictiveDraws(means, covs, paths, valid, chain.scaling)


# -- scores ----------------------------------------------------------------------


def gaussian_logpdf(y, means, covs):
    """Log N(y; means[d], covs[d]) for every d; non-PD components give NaN."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covs, dtype=float).reshape(means.shape[0], means.shape[1], means.shape[1])
    L, ok = _batched_cholesky(covs)
    out = np.full(means.shape[0], np.nan)
    if ok.any():
        diff = (np.asarray(y, dtype=float)[None, :] - means)[ok]
        z = np.linalg.solve(L[ok], diff[..., None])[..., 0]
        logdet = 2.0 * np.log(np.diagonal(L[ok], axis1=1, axis2=2)).sum(axis=1)
        out[ok] = -0.5 * (means.shape[1] * _LOG_2PI + logdet + (z * z).sum(axis=1))
    return out


def _log_mean_exp(logp):
    logp = logp[np.isfinite(logp)]
    if logp.size == 0:
        raise EvaluationError("no valid predictive draws")
    return float(logsumexp(logp) - math.log(logp.size))


def lpds_joint(y_obs, means, covs):
    """Log of the average Gaussian density over draws at `y_obs`."""
    return _log_mean_exp(gaussian_logpdf(y_obs, means, covs))


def lpds_marginal(y_obs_i, means_i, vars_i):
    """Univariate version of `lpds_joint` for one variable's margins."""
    m = np.asarray(means_i, dtype=float).ravel()
    v = np.asarray(vars_i, dtype=float).ravel()
    with np.errstate(invalid="ignore", divide="ignore"):
        logp = np.where(v > 0, -0.5 * (_LOG_2PI + np.log(v) + (y_obs_i - m) ** 2 / v), np.nan)
    return _log_mean_exp(logp)


def rmspe_ratio(point_forecasts, actuals, benchmark_forecasts):
    """Model RMSE over benchmark RMSE along the first axis."""
    f = np.asarray(point_forecasts, dtype=float)
    a = np.asarray(actuals, dtype=float)
    b = np.asarray(benchmark_forecasts, dtype=float)
    if f.shape != a.shape or b.shape != a.shape or a.shape[0] == 0:
        raise ValueError("forecasts, actuals and benchmark must be aligned and non-empty")
    model = np.sqrt(np.mean((f - a) ** 2, axis=0))
    bench = np.sqrt(np.mean((b - a) ** 2, axis=0))
    if np.any(bench == 0):
        raise EvaluationError("benchmark RMSE is zero, ratio undefined")
    return model / bench


def pip(chain):
    """Share of saved draws in which each predictor splits at least once, (n, k)."""
    return (np.asarray(chain.counts) >= 1).mean(axis=0)


# -- expanding window --------------------------------------------------------------


def read_benchmark_csv(path):
    """Benchmark point forecasts keyed by ``(origin, horizon, variable)``."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"origin", "horizon", "variable", "mean"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigurationError(f"benchmark file {path} lacks columns {sorted(missing)}")
        for row in reader:
            out[(row["origin"], int(row["horizon"]), row["variable"])] = float(row["mean"])
    return out


def origin_seed(seed, t, purpose):
    """64-bit seed for origin `t`; `purpose` 0 fits, 1 forecasts."""
    state = np.random.SeedSequence(int(seed), spawn_key=(2 + purpose, int(t))).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass
class OriginResult:
    t: int
    origin: str
    lpds_joint: float
    lpds_marginal: np.ndarray
    point: np.ndarray
    actual: np.ndarray
    n_excluded: int
    fit_origin: int


def fit_origin(config, panel, t):
    """Chain fitted on the first `t` observations, standardized on that sample."""
    train = standardize(panel.head(t))
    return run_chain(replace(config, seed=origin_seed(config.seed, t, 0)), train)


def score_origin(chain, panel, t, h_max, seed):
    """Forecast from origin `t` (last training row ``t - 1``) and score what is observed."""
    c, s = chain.scaling
    p = chain.meta["p"]
    n = panel.n
    hist = (panel.values[t - p:t] - c) / s
    rng = np.random.default_rng(origin_seed(seed, t, 1))
    draws = simulate_forecast_paths(chain, lag_vector(hist, p), h_max, rng).original_units()
    v = draws.valid
    y1 = panel.values[t]
    joint = lpds_joint(y1, draws.means[v, 0], draws.covs[v, 0])
    marg = np.array([lpds_marginal(y1[i], draws.means[v, 0, i], draws.covs[v, 0, i, i]) for i in range(n)])
    actual = np.full((h_max, n), np.nan)
    avail = min(h_max, panel.T - t)
    actual[:avail] = panel.values[t:t + avail]
    return OriginResult(t, panel.date_index[t - 1], joint, marg, draws.point_forecast(), actual,
                        draws.n_excluded, -1)


def evaluate_block(config, panel, fit_t, origins, h_max):
    chain = fit_origin(config, panel, fit_t)
    results = []
    for t in origins:
        res = score_origin(chain, panel, t, h_max, config.seed)
        res.fit_origin = fit_t
        results.append(res)
    return results, pip(chain)


@dataclass
class EvaluationReport:
    names: list
    results: list
    h_max: int
    refit_stride: int
    rmspe: np.ndarray | None = None
    pip: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def origins(self):
        return [r.origin for r in self.results]

    @property
    def lpds_joint(self):
        return np.array([r.lpds_joint for r in self.results])

    @property
    def lpds_marginal(self):
        return np.array([r.lpds_marginal for r in self.results])

    def cumulative_lpds(self):
        return np.cumsum(self.lpds_joint)

    def cumulative_marginal_lpds(self):
        return np.cumsum(self.lpds_marginal, axis=0)

    @property
    def point(self):
        return np.array([r.point for r in self.results])

    @property
    def actual(self):
        return np.array([r.actual for r in self.results])

    def to_dict(self):
        return {
            "names": self.names,
            "h_max": self.h_max,
            "refit_stride": self.refit_stride,
            "origins": self.origins,
            "lpds_joint": self.lpds_joint.tolist(),
            "cumulative_lpds_joint": self.cumulative_lpds().tolist(),
            "lpds_marginal": self.lpds_marginal.tolist(),
            "cumulative_lpds_marginal": self.cumulative_marginal_lpds().tolist(),
            "point": np.where(np.isnan(self.point), None, self.point).tolist(),
            "excluded_draws": [r.n_excluded for r in self.results],
            "rmspe_ratio": None if self.rmspe is None else self.rmspe.tolist(),
            "pip": None if self.pip is None else self.pip.tolist(),
            "meta": self.meta,
        }

    def write(self, directory):
        """One JSON report plus CSV tables for the LPDS, point forecasts and RMSPE."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "report.json", d / "lpds.csv", d / "forecasts.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
        with paths[1].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["origin", "lpds_joint", "cumulative_lpds_joint"] + [f"lpds_{nm}" for nm in self.names])
            for r, cum in zip(self.results, self.cumulative_lpds()):
                w.writerow([r.origin, repr(r.lpds_joint), repr(float(cum))] + [repr(float(x)) for x in r.lpds_marginal])
        with paths[2].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["origin", "horizon", "variable", "mean", "actual"])
            for r in self.results:
                for h in range(self.h_max):
                    for i, nm in enumerate(self.names):
                        a = r.actual[h, i]
                        w.writerow([r.origin, h + 1, nm, repr(float(r.point[h, i])), "" if np.isnan(a) else repr(float(a))])
        if self.rmspe is not None:
            paths.append(d / "rmspe.csv")
            with paths[-1].open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["horizon"] + self.names)
                for h, row in enumerate(self.rmspe):
                    w.writerow([h + 1] + [repr(float(x)) for x in row])
        if self.pip is not None:
            paths.append(d / "pip.csv")
            write_pip_csv(self.pip, self.names, paths[-1])
        return paths


def write_pip_csv(table, names, path):
    """PIP table with one row per equation and one column per (variable, lag)."""
    table = np.asarray(table)
    n = len(names)
    cols = [f"{names[q % n]}_lag{q // n + 1}" for q in range(table.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["equation"] + cols)
        for nm, row in zip(names, table):
            w.writerow([nm] + [repr(float(x)) for x in row])
    return path


def _benchmark_rmspe(results, names, bench, h_max):
    point, actual, ref = [], [], []
    for r in results:
        for h in range(h_max):
            if np.isnan(r.actual[h]).any():
                continue
            try:
                b = [bench[(r.origin, h + 1, nm)] for nm in names]
            except KeyError as exc:
                raise ConfigurationError(f"benchmark has no forecast for {exc.args[0]}") from None
            point.append((h, r.point[h]))
            actual.append(r.actual[h])
            ref.append(b)
    out = np.full((h_max, len(names)), np.nan)
    hs = np.array([h for h, _ in point])
    P = np.array([p for _, p in point])
    A, B = np.array(actual), np.array(ref)
    for h in range(h_max):
        sel = hs == h
        if sel.any():
            out[h] = rmspe_ratio(P[sel], A[sel], B[sel])
    return out


def expanding_window(config, panel, t0, h_max, *, refit_stride=1, benchmark=None,
                     rmspe=False, n_jobs=1):
    """Pseudo out-of-sample evaluation over origins ``t = t0, ..., T - 1``.

    At origin `t` the model is trained on the first `t` observations of the
    (transformed, unstandardized) `panel` and forecasts rows ``t, t + 1, ...``.
    With ``refit_stride > 1`` a chain is reused for that many consecutive
    origins, conditioning forecasts on the newest data. Seeds depend only on
    ``(config.seed, t)``, so results do not depend on `n_jobs`.
    """
    T = panel.T
    if not 0 < t0 < T:
        raise ValueError(f"t0 must lie in (0, {T}), got {t0}")
    if refit_stride < 1:
        raise ValueError("refit_stride must be at least 1")
    bench = None
    if rmspe:
        if benchmark is None:
            raise ConfigurationError("RMSPE requested but no benchmark file given")
        bench = benchmark if isinstance(benchmark, dict) else read_benchmark_csv(benchmark)
    origins = list(range(t0, T))
    blocks = [origins[i:i + refit_stride] for i in range(0, len(origins), refit_stride)]
    if n_jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            outs = list(ex.map(evaluate_block, [config] * len(blocks), [panel] * len(blocks),
                               [b[0] for b in blocks], blocks, [h_max] * len(blocks)))
    else:
        outs = [evaluate_block(config, panel, b[0], b, h_max) for b in blocks]
    results = [r for res, _ in outs for r in res]
    report = EvaluationReport(list(panel.names), results, h_max, refit_stride, pip=outs[-1][1],
                              meta={"t0": t0, "T": T, "seed": int(config.seed)})
    if bench is not None:
        report.rmspe = _benchmark_rmspe(results, report.names, bench, h_max)
    return report
