"""
Posterior sampler for the BART-VAR with factor stochastic volatility.

One sweep updates, in this order:

1. for each equation ``j``: the ``M`` trees by Metropolis-Hastings on the
   partial residuals, then the split probabilities ``s_j`` given the split
   counts (and ``lam_j`` in the sparse regime);
2. the loadings rows and the horseshoe scales;
3. the factors, period by period;
4. the log-volatility paths and their parameters (or the homoskedastic
   variances).

Randomness comes from a single integer seed. Each equation owns its own
stream (``SeedSequence(seed, spawn_key=(1, j))``) and the covariance block
uses ``SeedSequence(seed, spawn_key=(0,))``, so running the equations on
worker threads gives exactly the same chain as running them in order.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .bart import EquationForest, backfit_sweep
from .data import DesignPair, TimeSeriesPanel, build_design
from .factor_vol import FactorVolState, HorseshoeState, init_factor_vol, update_factor_vol
from .split_priors import REGIMES, ar_residual_variances, gibbs_update, init_split_prior
from .stochvol import SVParams
from .storage import SCHEMA_VERSION, read_archive, write_archive
from .tree import RegressionTree, SplitData, TreePriorParams, leaf_tau2

log = logging.getLogger(__name__)

VOLATILITIES = ("sv", "homoskedastic")


class NumericalError(RuntimeError):
    """A sweep hit a non-finite or non-positive-definite quantity.

    `state` holds the sampler state at the failure, for checkpointing.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class CheckpointError(RuntimeError):
    """Writing a checkpoint failed; `manifest` describes what was completed."""

    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    `r=None` means ``min(4, n - 1)`` factors and `tau2=None` calibrates the
    leaf variance per equation from the response range.
    """

    seed: int
    M: int = 200
    p: int = 13
    r: int | None = None
    regime: str = "minnesota"
    lambda1: float = 1.0
    lambda2: float = 0.5
    lam: float = 1.0
    update_lambda: bool = True
    volatility: str = "sv"
    n_burn: int = 30000
    n_save: int = 5000
    thin: int = 1
    gamma: float = 0.95
    beta: float = 0.2
    tau2: float | None = None
    homo_shape: float = 3.0
    homo_scale: float = 0.5
    refresh_every: int = 100
    n_jobs: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must lie in [0, 2**64)")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.volatility not in VOLATILITIES:
            raise ValueError(f"volatility must be one of {VOLATILITIES}, got {self.volatility!r}")
        for name in ("M", "p", "n_save", "thin", "refresh_every", "n_jobs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("n_burn", "checkpoint_every"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.r is not None and self.r < 0:
            raise ValueError("r must be nonnegative")
        for name in ("lambda1", "lambda2", "lam", "homo_shape", "homo_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tau2 is not None and not self.tau2 > 0:
            raise ValueError("tau2 must be positive")
        TreePriorParams(self.gamma, self.beta)

    def n_factors(self, n):
        return min(4, n - 1) if self.r is None else int(self.r)

    @property
    def n_sweeps(self):
        return self.n_burn + self.n_save * self.thin

    def to_dict(self):
        return {k: (int(v) if isinstance(v, np.integer) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown sampler settings: {sorted(unknown)}")
        return cls(**d)


class RandomStreams:
    """Named generators derived from one seed."""

    def __init__(self, seed, n):
        self.seed = int(seed)
        self.shared = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(0,))))
        self.equations = [np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(1, j))))
                          for j in range(n)]

    def get_state(self):
        return {"shared": self.shared.bit_generator.state,
                "equations": [g.bit_generator.state for g in self.equations]}

    def set_state(self, state):
        self.shared.bit_generator.state = state["shared"]
        for g, s in zip(self.equations, state["equations"]):
            g.bit_generator.state = s


@dataclass
class SamplerState:
    Y: np.ndarray
    data: SplitData
    forests: list
    priors: list
    tree_params: list
    fv: FactorVolState
    homo_prior: tuple
    sweep: int = 0

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def k(self):
        return self.data.k

    def fits(self):
        return np.column_stack([f.fit for f in self.forests])


def init_state(config, design, ar_variances=None):
    """Stump forests at zero, split probabilities at their prior means."""
    Y = np.asarray(design.Y, dtype=float)
    T, n = Y.shape
    p = design.lag_order
    data = SplitData(design.X)
    if config.regime == "minnesota" and ar_variances is None:
        ar_variances = ar_residual_variances(Y, p)
    tree_params = []
    for j in range(n):
        tau2 = config.tau2
        if tau2 is None:
            tau2 = leaf_tau2(max(float(np.ptp(Y[:, j])), 1e-8), config.M)
        tree_params.append(TreePriorParams(config.gamma, config.beta, tau2))
    priors = [init_split_prior(config.regime, j, n, p, lambda1=config.lambda1, lambda2=config.lambda2,
                               lam=config.lam, sigma2=ar_variances, update_lambda=config.update_lambda)
              for j in range(n)]
    forests = [EquationForest(data, config.M) for _ in range(n)]
    fv = init_factor_vol(Y, config.n_factors(n), config.volatility)
    a0 = np.full(n, config.homo_shape)
    b0 = config.homo_scale * Y.var(axis=0, ddof=1)
    return SamplerState(Y, data, forests, priors, tree_params, fv, (a0, b0))


def _update_equation(state, j, rng):
    forest, prior = state.forests[j], state.priors[j]
    fv = state.fv
    factor_part = fv.F @ fv.Lambda[j]
    precisions = np.exp(-fv.h[j])
    backfit_sweep(forest, state.Y[:, j], factor_part, precisions, state.tree_params[j], prior.s, rng)
    gibbs_update(prior, forest.counts(state.k), rng)


def gibbs_sweep(state, config, streams, executor=None):
    """One full sweep in the documented order; mutates and returns `state`."""
    try:
        with np.errstate(over="raise", invalid="raise", divide="ignore", under="ignore"):
            if executor is None:
                for j in range(state.n):
                    _update_equation(state, j, streams.equations[j])
            else:
                list(executor.map(lambda j: _update_equation(state, j, streams.equations[j]), range(state.n)))
            E = state.Y - state.fits()
            if not np.all(np.isfinite(E)):
                raise FloatingPointError("non-finite conditional means")
            update_factor_vol(state.fv, E, streams.shared, volatility=config.volatility,
                              homo_prior=state.homo_prior)
    except (FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError) as exc:
        raise NumericalError(f"sweep {state.sweep + 1}: {exc}", state) from exc
    state.sweep += 1
    if state.sweep % config.refresh_every == 0:
        for f in state.forests:
            f.refresh()
    return state


# -- stored draws ----------------------------------------------------------------

_TREE_KEYS = ("var", "cut", "left", "right", "mu")


def pack_forest(trees):
    """Flatten `trees` into node arrays; child indices and roots are absolute."""
    parts = {key: [] for key in _TREE_KEYS}
    roots = np.empty(len(trees), dtype=np.int64)
    offset = 0
    for m, tree in enumerate(trees):
        var, cut, left, right, mu = tree.to_flat()
        roots[m] = offset
        parts["var"].append(var)
        parts["cut"].append(cut)
        parts["left"].append(np.where(left >= 0, left + offset, -1))
        parts["right"].append(np.where(right >= 0, right + offset, -1))
        parts["mu"].append(mu)
        offset += len(var)
    out = {key: np.concatenate(v) for key, v in parts.items()}
    for key in ("var", "left", "right"):
        out[key] = out[key].astype(np.int32)
    out["roots"] = roots
    return out


def unpack_tree(nodes, root):
    """Rebuild one `RegressionTree` from packed node arrays."""
    tree = RegressionTree()
    stack = [(0, int(root))]
    while stack:
        i, g = stack.pop()
        if nodes["var"][g] < 0:
            tree.mu[i] = float(nodes["mu"][g])
            continue
        left, right = tree.split(i, int(nodes["var"][g]), float(nodes["cut"][g]))
        stack.append((right, int(nodes["right"][g])))
        stack.append((left, int(nodes["left"][g])))
    return tree


@dataclass
class ChainOutput:
    """Saved draws.

    `trees[j]` packs every saved forest of equation ``j``: node arrays
    ``var, cut, left, right, mu`` and ``roots`` of shape (D, M). The other
    arrays have the draw index first. Under homoskedastic errors `sigma2`
    holds the variances and the SV arrays are unused.
    """

    trees: list
    Lambda: np.ndarray
    sv_mu: np.ndarray
    sv_phi: np.ndarray
    sv_sigma2: np.ndarray
    h_last: np.ndarray
    sigma2: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    counts: np.ndarray
    scaling: np.ndarray | None
    meta: dict

    _ARRAYS = ("Lambda", "sv_mu", "sv_phi", "sv_sigma2", "h_last", "sigma2", "s", "lam", "counts")

    @property
    def n_draws(self):
        return self.s.shape[0]

    @property
    def n(self):
        return self.s.shape[1]

    @property
    def k(self):
        return self.s.shape[2]

    @property
    def volatility(self):
        return self.meta["config"]["volatility"]

    def forest(self, d, j):
        """The `M` trees of equation `j` in draw `d`."""
        nodes = self.trees[j]
        return [unpack_tree(nodes, r) for r in nodes["roots"][d]]

    def check(self):
        if not np.allclose(self.s.sum(axis=2), 1.0, atol=1e-10, rtol=0):
            raise ValueError("stored split probabilities do not sum to one")
        if self.meta.get("complete", True) and self.n_draws != self.meta["config"]["n_save"]:
            raise ValueError(f"{self.n_draws} draws stored, expected {self.meta['config']['n_save']}")
        return True

    def arrays(self):
        out = {name: getattr(self, name) for name in self._ARRAYS}
        for j, nodes in enumerate(self.trees):
            for key, arr in nodes.items():
                out[f"tree{j}_{key}"] = arr
        if self.scaling is not None:
            out["scaling"] = self.scaling
        return out

    def save(self, path):
        meta = dict(self.meta, schema=SCHEMA_VERSION, kind="chain")
        return write_archive(path, meta, self.arrays())

    @classmethod
    def from_arrays(cls, meta, arrays, prefix=""):
        n = int(meta["n"])
        trees = [{key: arrays[f"{prefix}tree{j}_{key}"] for key in _TREE_KEYS + ("roots",)} for j in range(n)]
        kw = {name: arrays[prefix + name] for name in cls._ARRAYS}
        return cls(trees=trees, scaling=arrays.get(prefix + "scaling"), meta=meta, **kw)

    @classmethod
    def load(cls, path):
        meta, arrays = read_archive(path)
        if meta.get("kind") != "chain":
            raise ValueError(f"{path} is not a chain archive")
        if meta.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported chain schema {meta.get('schema')!r}")
        return cls.from_arrays(meta, arrays)


class DrawBuffer:
    """Accumulates saved draws; memory grows with the number of draws only."""

    def __init__(self, n, M):
        self.n, self.M = n, M
        self.forests = [[] for _ in range(n)]
        self.items = {name: [] for name in ChainOutput._ARRAYS}

    def __len__(self):
        return len(self.items["s"])

    def append(self, state):
        fv = state.fv
        for j, f in enumerate(state.forests):
            self.forests[j].append(pack_forest(f.trees))
        mu, phi, sig = fv.sv_arrays()
        sigma2 = fv.sigma2 if fv.sigma2 is not None else np.exp(fv.h[:state.n, -1])
        self.items["Lambda"].append(fv.Lambda.copy())
        self.items["sv_mu"].append(mu)
        self.items["sv_phi"].append(phi)
        self.items["sv_sigma2"].append(sig)
        self.items["h_last"].append(fv.h[:, -1].copy())
        self.items["sigma2"].append(np.array(sigma2, dtype=float))
        self.items["s"].append(np.array([pr.s for pr in state.priors]))
        self.items["lam"].append(np.array([pr.lam for pr in state.priors], dtype=float))
        self.items["counts"].append(np.array([pr.counts for pr in state.priors], dtype=np.int64))

    def _stack_forest(self, draws):
        out = {key: [] for key in _TREE_KEYS}
        roots = np.zeros((len(draws), self.M), dtype=np.int64)
        offset = 0
        for d, nodes in enumerate(draws):
            size = len(nodes["var"])
            roots[d] = nodes["roots"] + offset
            for key in _TREE_KEYS:
                arr = nodes[key]
                if key in ("left", "right"):
                    arr = np.where(arr >= 0, arr + offset, -1).astype(np.int32)
                out[key].append(arr)
            offset += size
        packed = {}
        for key in _TREE_KEYS:
            dtype = np.int32 if key in ("var", "left", "right") else float
            packed[key] = np.concatenate(out[key]).astype(dtype) if draws else np.empty(0, dtype)
        packed["roots"] = roots
        return packed

    def to_output(self, meta, scaling=None):
        trees = [self._stack_forest(f) for f in self.forests]
        kw = {}
        for name, lst in self.items.items():
            kw[name] = np.array(lst) if lst else np.empty((0,))
        return ChainOutput(trees=trees, scaling=scaling, meta=meta, **kw)

    @classmethod
    def from_output(cls, out, M):
        buf = cls(out.n, M)
        D = out.n_draws
        for j, nodes in enumerate(out.trees):
            for d in range(D):
                start = int(nodes["roots"][d, 0])
                stop = int(nodes["roots"][d + 1, 0]) if d + 1 < D else len(nodes["var"])
                part = {key: nodes[key][start:stop].copy() for key in _TREE_KEYS}
                for key in ("left", "right"):
                    part[key] = np.where(part[key] >= 0, part[key] - start, -1).astype(np.int32)
                part["roots"] = nodes["roots"][d] - start
                buf.forests[j].append(part)
        for name in buf.items:
            arr = getattr(out, name)
            buf.items[name] = [arr[d] for d in range(D)]
        return buf


# -- checkpoints -----------------------------------------------------------------


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, state, streams, buffer, config, chain_meta):
    fv = state.fv
    meta = {
        "schema": SCHEMA_VERSION,
        "kind": "checkpoint",
        "config": config.to_dict(),
        "sweep": state.sweep,
        "rng": streams.get_state(),
        "data_digest": _digest(state.Y, state.data.X),
        "trees": [[[t.var, t.cut, t.left, t.right, t.parent, t.depth, t.mu] for t in f.trees]
                  for f in state.forests],
        "lam": [pr.lam for pr in state.priors],
        "sv": [[p.mu, p.phi, p.sigma2] for p in fv.sv],
        "chain": chain_meta,
        "n": state.n,
    }
    arrays = {
        "Lambda": fv.Lambda, "F": fv.F, "h": fv.h, "indicators": fv.indicators,
        "hs_lam2": fv.horseshoe.lam2, "hs_nu": fv.horseshoe.nu,
        "hs_tau2": fv.horseshoe.tau2, "hs_xi": fv.horseshoe.xi,
    }
    if fv.sigma2 is not None:
        arrays["sigma2_state"] = fv.sigma2
    for j, (f, pr) in enumerate(zip(state.forests, state.priors)):
        arrays[f"fit{j}"] = f.fit
        arrays[f"s{j}"] = pr.s
        arrays[f"log_s{j}"] = pr.log_s
        arrays[f"phi{j}"] = pr.phi
        arrays[f"counts{j}"] = pr.counts
    if len(buffer):
        partial = buffer.to_output({"n": state.n})
        for name, arr in partial.arrays().items():
            arrays["draw_" + name] = arr
    meta["n_buffered"] = len(buffer)
    return write_archive(path, meta, arrays)


def load_checkpoint(path, config, design, ar_variances=None):
    """Rebuild ``(state, streams, buffer, chain_meta)`` from a checkpoint."""
    meta, arrays = read_archive(path)
    if meta.get("kind") != "checkpoint" or meta.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path} is not a compatible checkpoint")
    if meta["config"] != config.to_dict():
        raise ValueError("checkpoint was written with a different configuration")
    state = init_state(config, design, ar_variances)
    if meta["data_digest"] != _digest(state.Y, state.data.X):
        raise ValueError("checkpoint was written for different data")
    for j, recs in enumerate(meta["trees"]):
        trees = []
        for var, cut, left, right, parent, depth, mu in recs:
            t = RegressionTree()
            t.var, t.cut, t.left, t.right, t.parent, t.depth, t.mu = var, cut, left, right, parent, depth, mu
            trees.append(t)
        state.forests[j] = EquationForest(state.data, config.M, trees, fit=arrays[f"fit{j}"])
        pr = state.priors[j]
        pr.s, pr.log_s, pr.phi = arrays[f"s{j}"], arrays[f"log_s{j}"], arrays[f"phi{j}"]
        pr.counts = arrays[f"counts{j}"]
        pr.lam = meta["lam"][j]
    fv = state.fv
    fv.Lambda, fv.F, fv.h, fv.indicators = arrays["Lambda"], arrays["F"], arrays["h"], arrays["indicators"]
    fv.horseshoe = HorseshoeState(arrays["hs_lam2"], arrays["hs_nu"], arrays["hs_tau2"], arrays["hs_xi"])
    fv.sigma2 = arrays.get("sigma2_state")
    fv.sv = [SVParams(*p) for p in meta["sv"]]
    state.sweep = int(meta["sweep"])
    streams = RandomStreams(config.seed, state.n)
    streams.set_state(meta["rng"])
    buffer = DrawBuffer(state.n, config.M)
    if meta["n_buffered"]:
        partial = ChainOutput.from_arrays({"n": state.n}, arrays, prefix="draw_")
        buffer = DrawBuffer.from_output(partial, config.M)
    return state, streams, buffer, meta["chain"]


# -- driver ----------------------------------------------------------------------


def prepare_data(config, data):
    """Design, AR residual variances and metadata from a panel or a `DesignPair`."""
    if isinstance(data, TimeSeriesPanel):
        design = build_design(data, config.p)
        ar = ar_residual_variances(data.values, config.p) if config.regime == "minnesota" else None
        return design, ar, data.scaling, list(data.names)
    if isinstance(data, DesignPair):
        if data.lag_order != config.p:
            raise ValueError(f"design has {data.lag_order} lags, config asks for {config.p}")
        ar = ar_residual_variances(data.Y, config.p) if config.regime == "minnesota" else None
        return data, ar, None, [f"y{i + 1}" for i in range(data.n)]
    raise TypeError(f"expected a TimeSeriesPanel or DesignPair, got {type(data).__name__}")


def run_chain(config, data, *, checkpoint_path=None, resume=False, max_sweeps=None):
    """Run ``n_burn`` discarded and ``n_save * thin`` retained sweeps.

    With `checkpoint_path` the state is written there every
    ``config.checkpoint_every`` sweeps and when the chain stops early
    (`max_sweeps` reached, which returns None, or a numerical failure).
    `resume` continues from the checkpoint at that path.
    """
    design, ar, scaling, names = prepare_data(config, data)
    n = design.n
    chain_meta = {
        "config": config.to_dict(),
        "names": names,
        "n": n,
        "k": design.k,
        "p": design.lag_order,
        "r": config.n_factors(n),
        "T": int(design.Y.shape[0]),
    }
    if resume:
        if checkpoint_path is None:
            raise ValueError("resume needs a checkpoint path")
        state, streams, buffer, _ = load_checkpoint(checkpoint_path, config, design, ar)
        log.info("resumed at sweep %d with %d stored draws", state.sweep, len(buffer))
    else:
        state = init_state(config, design, ar)
        streams = RandomStreams(config.seed, n)
        buffer = DrawBuffer(n, config.M)

    def checkpoint():
        try:
            save_checkpoint(checkpoint_path, state, streams, buffer, config, chain_meta)
        except OSError as exc:
            manifest = {"sweeps_completed": state.sweep, "draws_stored": len(buffer),
                        "checkpoint": str(checkpoint_path), "error": str(exc)}
            raise CheckpointError(f"could not write checkpoint {checkpoint_path}: {exc}", manifest) from exc

    total = config.n_sweeps
    stop = total if max_sweeps is None else min(total, int(max_sweeps))
    executor = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 and n > 1 else None
    try:
        while state.sweep < stop:
            try:
                gibbs_sweep(state, config, streams, executor)
            except NumericalError:
                if checkpoint_path is not None:
                    checkpoint()
                raise
            done = state.sweep - config.n_burn
            if done > 0 and done % config.thin == 0:
                buffer.append(state)
            if checkpoint_path is not None and config.checkpoint_every and state.sweep % config.checkpoint_every == 0:
                checkpoint()
            if state.sweep % 1000 == 0:
                log.info("sweep %d / %d", state.sweep, total)
    finally:
        if executor is not None:
            executor.shutdown()
    if state.sweep < total:
        if checkpoint_path is not None:
            checkpoint()
        return None
    out = buffer.to_output(dict(chain_meta, complete=True), scaling)
    out.check()
    return out

