"""MCMC estimation of IVIM parameters.

Two samplers share one likelihood kernel:

* pCN (preconditioned Crank-Nicolson), component-wise over (F, D, Ds) in that
  order each iteration.  The proposal ``m + sqrt(1 - rho^2)(theta - m) + rho
  delta`` with ``delta ~ N(0, C)`` leaves N(m, C) invariant, so the acceptance
  ratio is the likelihood ratio alone and voxels never talk to each other.
* Random-walk Metropolis under a hierarchical Gaussian prior N(mu, Sigma)
  whose hyper-parameters get a Gibbs update over the whole ROI once per
  iteration.

Every voxel owns a random stream keyed by ``(seed, method tag, voxel index)``
and consumes it in a fixed order, so results do not depend on how voxels are
batched or how many worker threads run the batches.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import invwishart

from . import ivim
from .ivim import IvimArrays, IvimParams, TransformedParams, expit
from .volume import BValueSeries, ScalarVolume

PCN_TAG = 1
RW_TAG = 2
GIBBS_TAG = 3

CHUNK = 128        # iterations of random numbers drawn at once per voxel
_HALF_ULP = 2.0 ** -54


@dataclass
class ChainConfig:
    """pCN settings; defaults are the published ones."""

    max_iter: int = 5000
    burn_in: int = 2000
    rho: tuple = (0.002, 0.002, 0.002)
    C: tuple = (0.01, 0.01, 0.05)
    centering: str = "at_init"
    seed: int = 0

    def validate(self, allow_empty: bool = False) -> "ChainConfig":
        rho = np.asarray(self.rho, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if rho.shape != (3,) or C.shape != (3,):
            raise ValueError("rho and C need one value per component")
        if np.any(rho <= 0) or np.any(rho >= 1):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if np.any(C <= 0):
            raise ValueError(f"C must be > 0, got {self.C}")
        if self.centering not in ("at_init", "at_zero"):
            raise ValueError(f"unknown centering {self.centering!r}")
        _check_iters(self.max_iter, self.burn_in, allow_empty)
        return self


@dataclass
class RwConfig:
    """Random-walk settings; 5000 iterations with 2500 of burn-in by default."""

    max_iter: int = 5000
    burn_in: int = 2500
    step: float = 0.05
    adapt: bool = True
    adapt_every: int = 50
    target_acceptance: tuple = (0.2, 0.5)
    gibbs: bool = True
    seed: int = 0
    mu: tuple | None = None
    Sigma: np.ndarray | None = None

    def validate(self, allow_empty: bool = False) -> "RwConfig":
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if not self.gibbs and (self.mu is None or self.Sigma is None):
            raise ValueError("fixed-prior mode needs mu and Sigma")
        _check_iters(self.max_iter, self.burn_in, allow_empty)
        return self


def _check_iters(max_iter, burn_in, allow_empty):
    if max_iter < 0 or burn_in < 0:
        raise ValueError("iteration counts must be >= 0")
    if not allow_empty and burn_in >= max_iter:
        raise ValueError(f"burn_in ({burn_in}) must be < max_iter ({max_iter})")


@dataclass
class ChainResult:
    """Post-burn-in summaries for a batch of voxels (first axis).

    ``mean_t``/``std_t`` live in (F, D, Ds) space, ``mean_nat``/``std_nat`` in
    (f, d, ds) space.  ``point`` is the inverse transform of ``mean_t``.
    """

    mean_t: np.ndarray
    std_t: np.ndarray
    mean_nat: np.ndarray
    std_nat: np.ndarray
    acceptance: np.ndarray
    n_kept: int
    trace: np.ndarray | None = None
    n_nonfinite: int = 0

    @property
    def point(self) -> np.ndarray:
        return np.stack([expit(self.mean_t[:, 0]), np.exp(self.mean_t[:, 1]),
                         np.exp(self.mean_t[:, 2])], axis=-1)

    def posterior_mean(self, i: int = 0) -> TransformedParams:
        return TransformedParams(*map(float, self.mean_t[i]))

    def point_params(self, i: int = 0, y0: float = 1.0) -> IvimParams:
        f, d, ds = self.point[i]
        return IvimParams(float(f), float(d), float(ds), y0)


# ---------------------------------------------------------------------------
# Likelihood targets
# ---------------------------------------------------------------------------

class IvimTarget:
    """Marginal IVIM likelihood for a batch of voxels, caching exponentials.

    A component update only recomputes the factor it touches: nothing for F,
    one exponential per b-value for D or Ds.  Signals are held b-major,
    shape (Nb, n), so every per-b row is contiguous.
    """

    _keys = ("f", "ed", "es")

    def __init__(self, y, bvalues):
        self.yT = np.ascontiguousarray(np.atleast_2d(np.asarray(y, dtype=float)).T)
        self.b = np.asarray(bvalues, dtype=float)[:, None]
        self.yy = _coldot(self.yT, self.yT)
        self.n_b = self.yT.shape[0]

    def _piece(self, j, value):
        if j == 0:
            return expit(value)
        return np.exp(-self.b * np.exp(value)[None, :])

    def _ll(self, f, ed, es):
        g = es - ed
        g *= f
        g += ed
        gg = _coldot(g, g)
        yg = _coldot(self.yT, g)
        resid = self.yy - yg * yg / gg
        resid = np.maximum(resid, ivim.RESIDUAL_FLOOR)
        return -0.5 * np.log(gg) - 0.5 * (self.n_b - 1) * np.log(resid)

    def init(self, theta):
        cache = {k: self._piece(j, theta[:, j]) for j, k in enumerate(self._keys)}
        cache["ll"] = self._ll(cache["f"], cache["ed"], cache["es"])
        return cache

    def propose(self, j, value, theta, cache):
        parts = [cache[k] for k in self._keys]
        parts[j] = self._piece(j, value)
        return self._ll(*parts), parts[j]

    def commit(self, cache, j, piece, ll_prop, acc):
        key = self._keys[j]
        if piece.ndim == 1:
            cache[key] = np.where(acc, piece, cache[key])
        else:
            np.copyto(cache[key], piece, where=acc[None, :])
        cache["ll"] = np.where(acc, ll_prop, cache["ll"])


def _coldot(a, b):
    # fixed-order sum over b-values; per-voxel result independent of batch size
    acc = a[0] * b[0]
    for k in range(1, a.shape[0]):
        acc += a[k] * b[k]
    return acc


class FunctionTarget:
    """Wrap any ``loglik(theta) -> (n,)`` callable as a sampling target."""

    def __init__(self, loglik):
        self.loglik = loglik

    def init(self, theta):
        return {"ll": np.asarray(self.loglik(theta), dtype=float)}

    def propose(self, j, value, theta, cache):
        prop = theta.copy()
        prop[:, j] = value
        return np.asarray(self.loglik(prop), dtype=float), None

    def commit(self, cache, j, piece, ll_prop, acc):
        cache["ll"] = np.where(acc, ll_prop, cache["ll"])


def constant_loglik(theta):
    return np.zeros(theta.shape[0])


# ---------------------------------------------------------------------------
# Primitive steps
# ---------------------------------------------------------------------------

def pcn_propose(theta_j, rho_j, C_j, center, rng):
    """One pCN draw: ``m + sqrt(1 - rho^2)(theta - m) + rho * N(0, C)``."""
    if not 0 <= rho_j <= 1:
        raise ValueError("rho must lie in [0, 1]")
    if C_j <= 0:
        raise ValueError("C must be > 0")
    theta_j = np.asarray(theta_j, dtype=float)
    delta = np.sqrt(C_j) * rng.standard_normal(theta_j.shape)
    out = center + np.sqrt(1.0 - rho_j ** 2) * (theta_j - center) + rho_j * delta
    return float(out) if out.ndim == 0 else out


def accept_logratio(log_ratio, rng) -> bool:
    """Metropolis test on a log acceptance ratio; non-finite ratios reject."""
    if not np.isfinite(log_ratio):
        return False
    if log_ratio >= 0:
        return True
    return bool(np.log(rng.random()) < log_ratio)


def accept(theta_prop: TransformedParams, theta_cur: TransformedParams, y, bvalues, rng) -> bool:
    """Accept with probability ``min(1, L(prop) / L(cur))`` (marginal likelihoods)."""
    lp = ivim.log_marginal_likelihood(y, bvalues, theta_prop)
    lc = ivim.log_marginal_likelihood(y, bvalues, theta_cur)
    return accept_logratio(lp - lc, rng)


# ---------------------------------------------------------------------------
# Chain drivers
# ---------------------------------------------------------------------------

def voxel_rngs(seed: int, tag: int, voxel_ids) -> list:
    return [np.random.default_rng([int(seed), tag, int(v)]) for v in voxel_ids]


def _draws(gens, m):
    # fixed per-voxel consumption order: 3m normals then 3m uniforms per chunk
    z = np.stack([g.standard_normal(3 * m) for g in gens]).reshape(len(gens), m, 3)
    u = np.stack([g.random(3 * m) for g in gens]).reshape(len(gens), m, 3)
    return z, np.log(u + _HALF_ULP)


class _Accumulator:
    def __init__(self, theta0, keep_trace, n_keep):
        self.ref = theta0.copy()
        self.s = np.zeros_like(theta0)
        self.ss = np.zeros_like(theta0)
        self.sn = np.zeros_like(theta0)
        self.ssn = np.zeros_like(theta0)
        self.refn = _natural(theta0)
        self.n = 0
        self.trace = np.empty((theta0.shape[0], n_keep, 3)) if keep_trace else None

    def add(self, theta):
        dt = theta - self.ref
        self.s += dt
        self.ss += dt * dt
        dn = _natural(theta) - self.refn
        self.sn += dn
        self.ssn += dn * dn
        if self.trace is not None:
            self.trace[:, self.n] = theta
        self.n += 1

    def result(self, accepts, n_iter, nonfinite):
        n = max(self.n, 1)
        m = self.s / n
        v = np.maximum(self.ss / n - m * m, 0.0)
        mn = self.sn / n
        vn = np.maximum(self.ssn / n - mn * mn, 0.0)
        acc = accepts / max(n_iter, 1)
        return ChainResult(self.ref + m, np.sqrt(v), self.refn + mn, np.sqrt(vn),
                           acc, self.n, self.trace, nonfinite)


def _natural(theta):
    return np.stack([expit(theta[:, 0]), np.exp(theta[:, 1]), np.exp(theta[:, 2])], axis=-1)


def run_pcn(target, theta0, center, cfg: ChainConfig, gens, keep_trace: bool = False) -> ChainResult:
    """Run component-wise pCN chains for a batch of voxels.

    ``theta0`` and ``center`` are (n, 3); ``gens`` holds one generator per voxel.
    """
    theta = np.array(theta0, dtype=float)
    center = np.broadcast_to(np.asarray(center, dtype=float), theta.shape)
    rho = np.asarray(cfg.rho, dtype=float)
    a = np.sqrt(1.0 - rho ** 2)
    s = rho * np.sqrt(np.asarray(cfg.C, dtype=float))
    cache = target.init(theta)
    accepts = np.zeros_like(theta)
    nonfinite = 0
    acc_stats = _Accumulator(theta, keep_trace, max(cfg.max_iter - cfg.burn_in, 0))
    it = 0
    while it < cfg.max_iter:
        m = min(CHUNK, cfg.max_iter - it)
        z, logu = _draws(gens, m)
        for t in range(m):
            for j in range(3):
                prop = center[:, j] + a[j] * (theta[:, j] - center[:, j]) + s[j] * z[:, t, j]
                ll_prop, piece = target.propose(j, prop, theta, cache)
                ratio = ll_prop - cache["ll"]
                finite = np.isfinite(ratio)
                nonfinite += int(np.count_nonzero(~finite))
                acc = finite & (logu[:, t, j] < ratio)
                theta[:, j] = np.where(acc, prop, theta[:, j])
                target.commit(cache, j, piece, ll_prop, acc)
                accepts[:, j] += acc
            if it + t >= cfg.burn_in:
                acc_stats.add(theta)
        it += m
    return acc_stats.result(accepts, cfg.max_iter, nonfinite)


def pcn_fit_voxel(y, bvalues, init: IvimParams, cfg: ChainConfig, rng,
                  loglik=None, keep_trace: bool = False) -> ChainResult:
    """pCN chain for one voxel started at ``init`` (normally a segmented fit).

    ``loglik`` swaps in another log-likelihood of ``theta`` (shape (n, 3)),
    which is how the sampler is checked against analytic posteriors.
    """
    cfg.validate()
    init.validate()
    theta0 = IvimArrays(np.array([init.f]), np.array([init.d]), np.array([init.ds]),
                        np.array([init.y0]), np.zeros(1, bool)).transformed()
    center = theta0 if cfg.centering == "at_init" else np.zeros_like(theta0)
    target = FunctionTarget(loglik) if loglik is not None else IvimTarget(np.asarray(y)[None, :], bvalues)
    return run_pcn(target, theta0, center, cfg, [rng], keep_trace=keep_trace)


def _chunks(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _blocks(n, threads):
    """One block when single-threaded, else at most ``threads`` equal blocks."""
    if threads <= 1 or n <= 1:
        return [slice(0, n)]
    return _chunks(n, -(-n // threads))


def _concat(results: list[ChainResult]) -> ChainResult:
    cat = lambda name: np.concatenate([getattr(r, name) for r in results])  # noqa: E731
    trace = None
    if all(r.trace is not None for r in results):
        trace = np.concatenate([r.trace for r in results])
    return ChainResult(cat("mean_t"), cat("std_t"), cat("mean_nat"), cat("std_nat"),
                       cat("acceptance"), results[0].n_kept, trace,
                       sum(r.n_nonfinite for r in results))


def pcn_fit_voxels(y, bvalues, init: IvimArrays, cfg: ChainConfig, voxel_ids=None,
                   threads: int = 1) -> ChainResult:
    """Independent pCN chains for many voxels, optionally on worker threads."""
    cfg.validate(allow_empty=True)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    voxel_ids = np.arange(n) if voxel_ids is None else np.asarray(voxel_ids)
    theta0 = init.transformed()
    center = theta0 if cfg.centering == "at_init" else np.zeros_like(theta0)

    def job(sl):
        gens = voxel_rngs(cfg.seed, PCN_TAG, voxel_ids[sl])
        return run_pcn(IvimTarget(y[sl], bvalues), theta0[sl], center[sl], cfg, gens)

    blocks = _blocks(n, threads)
    if len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, blocks))
    else:
        results = [job(sl) for sl in blocks]
    return _concat(results)


# ---------------------------------------------------------------------------
# Random walk with hierarchical prior
# ---------------------------------------------------------------------------

@dataclass
class RwState:
    mu: np.ndarray
    Sigma: np.ndarray
    mu_trace: list = field(default_factory=list)


def gibbs_hyper(theta, Sigma, rng, update_sigma: bool = True):
    """Draw ``mu | theta, Sigma`` then ``Sigma | theta, mu``.

    ``mu`` is Gaussian around the voxel mean with covariance Sigma / n; with
    the ``|Sigma|^(-1/2)`` hyper-prior Sigma is inverse-Wishart with n - 3
    degrees of freedom and the scatter matrix about ``mu`` as scale.
    """
    n, p = theta.shape
    mean = theta.mean(axis=0)
    L = np.linalg.cholesky(Sigma / n) if np.any(Sigma) else np.zeros((p, p))
    mu = mean + L @ rng.standard_normal(p)
    if update_sigma:
        if n - p <= p - 1:
            raise ValueError(f"covariance update needs at least {2 * p} voxels, got {n}")
        r = theta - mu
        S = r.T @ r
        S = 0.5 * (S + S.T) + 1e-12 * np.trace(S) / p * np.eye(p)
        Sigma = np.atleast_2d(invwishart.rvs(df=n - p, scale=S, random_state=rng))
    return mu, Sigma


def _rw_block_update(target, cache, theta, step, z, logu, mu, P, accepts, window):
    r = theta - mu
    for j in range(3):
        delta = step[:, j] * z[:, j]
        prop = theta[:, j] + delta
        # explicit sum instead of r @ P: BLAS kernels may reorder by batch size
        Pr = r[:, 0] * P[0, j] + r[:, 1] * P[1, j] + r[:, 2] * P[2, j]
        dlp = -(delta * Pr) - 0.5 * delta * delta * P[j, j]
        ll_prop, piece = target.propose(j, prop, theta, cache)
        ratio = ll_prop - cache["ll"] + dlp
        acc = np.isfinite(ratio) & (logu[:, j] < ratio)
        theta[:, j] = np.where(acc, prop, theta[:, j])
        r[:, j] = theta[:, j] - mu[j]
        target.commit(cache, j, piece, ll_prop, acc)
        accepts[:, j] += acc
        window[:, j] += acc


def run_rw(targets, theta0, cfg: RwConfig, gens_blocks, blocks, threads: int = 1,
           keep_trace: bool = False, keep_mu: bool = False):
    """Random-walk chains coupled through Gibbs hyper-parameter updates.

    ``targets``/``gens_blocks``/``blocks`` partition the voxels; every
    iteration is one Gibbs step followed by a synchronised sweep of all blocks.
    """
    theta = np.array(theta0, dtype=float)
    n = theta.shape[0]
    if cfg.gibbs:
        if n < 6:
            raise ValueError(f"hierarchical random walk needs >= 6 voxels, got {n}")
        mu = theta.mean(axis=0)
        Sigma = np.cov(theta.T) + 1e-6 * np.eye(3)
    else:
        mu = np.asarray(cfg.mu, dtype=float)
        Sigma = np.asarray(cfg.Sigma, dtype=float)
    gibbs_rng = np.random.default_rng([int(cfg.seed), GIBBS_TAG])
    caches = [t.init(theta[sl]) for t, sl in zip(targets, blocks)]
    step = np.full_like(theta, cfg.step)
    accepts = np.zeros_like(theta)
    window = np.zeros_like(theta)
    stats = _Accumulator(theta, keep_trace, max(cfg.max_iter - cfg.burn_in, 0))
    state = RwState(mu, Sigma)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and len(blocks) > 1 else None
    lo, hi = cfg.target_acceptance
    try:
        it = 0
        while it < cfg.max_iter:
            m = min(CHUNK, cfg.max_iter - it)
            draws = [_draws(g, m) for g in gens_blocks]
            for t in range(m):
                if cfg.gibbs:
                    mu, Sigma = gibbs_hyper(theta, Sigma, gibbs_rng)
                P = np.linalg.inv(Sigma)

                def job(k, t=t, mu=mu, P=P):
                    sl = blocks[k]
                    sub = theta[sl]
                    _rw_block_update(targets[k], caches[k], sub, step[sl], draws[k][0][:, t],
                                     draws[k][1][:, t], mu, P, accepts[sl], window[sl])
                    theta[sl] = sub

                if pool is not None:
                    list(pool.map(job, range(len(blocks))))
                else:
                    for k in range(len(blocks)):
                        job(k)
                g = it + t + 1
                if cfg.adapt and g <= cfg.burn_in and g % cfg.adapt_every == 0:
                    rate = window / cfg.adapt_every
                    step *= np.where(rate < lo, 0.8, np.where(rate > hi, 1.25, 1.0))
                    window[:] = 0
                if g > cfg.burn_in:
                    stats.add(theta)
                if keep_mu:
                    state.mu_trace.append(mu.copy())
            it += m
    finally:
        if pool is not None:
            pool.shutdown()
    state.mu, state.Sigma = mu, Sigma
    return stats.result(accepts, cfg.max_iter, 0), state


def rw_fit_voxels(y, bvalues, init: IvimArrays, cfg: RwConfig, voxel_ids=None,
                  threads: int = 1, loglik=None, keep_trace: bool = False, keep_mu: bool = False):
    """Hierarchical random-walk fit of a set of voxels sharing one prior."""
    cfg.validate(allow_empty=True)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    if cfg.gibbs and n < 6:
        raise ValueError(f"hierarchical random walk needs >= 6 voxels, got {n}")
    voxel_ids = np.arange(n) if voxel_ids is None else np.asarray(voxel_ids)
    theta0 = init.transformed()
    blocks = _blocks(n, threads)
    if loglik is not None:
        targets = [FunctionTarget(loglik) for _ in blocks]
    else:
        targets = [IvimTarget(y[sl], bvalues) for sl in blocks]
    gens = [voxel_rngs(cfg.seed, RW_TAG, voxel_ids[sl]) for sl in blocks]
    return run_rw(targets, theta0, cfg, gens, blocks, threads, keep_trace, keep_mu)


# ---------------------------------------------------------------------------
# Volume dispatcher
# ---------------------------------------------------------------------------

@dataclass
class ParameterMaps:
    f_map: ScalarVolume
    d_map: ScalarVolume
    ds_map: ScalarVolume
    y0_map: ScalarVolume
    mae_map: ScalarVolume
    mask: np.ndarray
    method: str = ""
    meta: dict = field(default_factory=dict)

    def get(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, f"{name}_map").data, dtype=float)


METHODS = ("pcn", "rw", "lsq", "seg")


def masked_signals(series: BValueSeries, mask) -> tuple[np.ndarray, np.ndarray]:
    """Signals of masked voxels (x-fastest linear order) and their indices."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != series.geometry.dims:
        raise ValueError(f"mask shape {mask.shape} does not match series {series.geometry.dims}")
    arr = series.as_array()
    idx = np.flatnonzero(mask.ravel(order="F"))
    y = arr.reshape(-1, arr.shape[-1], order="F")[idx]
    return y, idx


def _scatter(values, idx, geometry):
    out = np.zeros(geometry.n_voxels)
    out[idx] = values
    return ScalarVolume(geometry, out.reshape(geometry.dims, order="F"))


def fit_volume(series: BValueSeries, mask, method: str, cfg=None, threads: int = 1,
               b_threshold: float = 200.0) -> ParameterMaps:
    """Estimate IVIM maps on masked voxels with ``pcn``, ``rw``, ``lsq`` or ``seg``.

    Bayesian methods report the least-squares amplitude at the posterior-mean
    shape as their ``y0``; deterministic methods report their fitted ``y0``.
    """
    from . import metrics

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    geom = series.geometry
    y, idx = masked_signals(series, mask)
    b = series.bvalues
    meta: dict = {"method": method, "n_voxels": int(idx.size)}
    if idx.size == 0:
        zeros = np.zeros(0)
        vals = dict(f=zeros, d=zeros, ds=zeros, y0=zeros)
    else:
        seg = ivim.segmented_fit(y, b, b_threshold=b_threshold, floor=1e-3)
        meta["n_flagged_init"] = int(seg.flag.sum())
        if method == "seg":
            vals = dict(f=seg.f, d=seg.d, ds=seg.ds, y0=seg.y0)
            meta["amplitude"] = "fitted"
        elif method == "lsq":
            res = ivim.lm_fit(y, b, seg)
            p = res.params
            vals = dict(f=p.f, d=p.d, ds=p.ds, y0=p.y0)
            meta["amplitude"] = "fitted"
            meta["n_flagged_fit"] = int(p.flag.sum())
        else:
            if method == "pcn":
                cfg = cfg if cfg is not None else ChainConfig()
                chain = pcn_fit_voxels(y, b, seg, cfg, voxel_ids=idx, threads=threads)
            else:
                cfg = cfg if cfg is not None else RwConfig()
                chain, state = rw_fit_voxels(y, b, seg, cfg, voxel_ids=idx, threads=threads)
                meta["mu"] = state.mu.tolist()
            pt = chain.point
            g = ivim.shape(b[None, :], pt[:, 0:1], pt[:, 1:2], pt[:, 2:3])
            vals = dict(f=pt[:, 0], d=pt[:, 1], ds=pt[:, 2], y0=ivim.ml_amplitude(y, g))
            meta["amplitude"] = "marginal-ml"
            acc = chain.acceptance.mean(axis=0) if chain.acceptance.size else np.zeros(3)
            meta["acceptance"] = acc.tolist()
            meta["posterior_std"] = chain.std_nat.mean(axis=0).tolist()
            meta["n_kept"] = int(chain.n_kept)
            meta["n_nonfinite"] = int(np.sum(chain.n_nonfinite))
    maps = {k: _scatter(v, idx, geom) for k, v in vals.items()}
    mask_arr = np.asarray(mask, dtype=bool)
    mae_vals = metrics.voxel_mae(y, b, vals["f"], vals["d"], vals["ds"], vals["y0"])
    return ParameterMaps(maps["f"], maps["d"], maps["ds"], maps["y0"],
                         _scatter(mae_vals, idx, geom), mask_arr, method, meta)
