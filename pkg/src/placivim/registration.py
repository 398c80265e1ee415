"""Slice-wise deformable registration: LCC similarity, isotropic TV on a
control grid, and an L-BFGS optimiser.

The displacement of each slice is bilinearly interpolated from a regular
control grid.  ``register_pair`` minimises

    DATA_WEIGHT * N_pix * (1 - LCC(fixed, moving o (id + d(k)))) + lambda2 * TV(k)

over the node displacements ``k`` (voxel units).  The similarity is summed
over pixels, as the TV term is summed over nodes, so the balance does not
depend on image size.  With the mean similarity against a node-summed TV the
default weight freezes the grid at zero.

By default the grid is refined coarse to fine (a quarter, half, then full node
count, ``iters`` each); a single fixed grid stalls far from the optimum on
displacements of two voxels or more.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import (
    BValueSeries,
    ControlGrid2D,
    DisplacementField2D,
    GeometryError,
    ScalarVolume,
    densify,
    densify_adjoint,
    resample_cubic,
    warp,
)

TV_EPS = 1e-9
DATA_WEIGHT = 10.0


class RegistrationWarning(RuntimeWarning):
    """Optimiser stopped on a failed line search."""


@dataclass
class RegConfig:
    lambda2: float = 2.5
    grid_dims: tuple = (60, 60)
    iters_interb: int = 100
    iters_coreg: int = 50
    lcc_window: int = 7
    memory: int = 10
    pyramid_levels: int = 3

    def validate(self) -> "RegConfig":
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if min(self.grid_dims) < 2:
            raise ValueError("control grid needs at least 2x2 nodes")
        if self.lcc_window < 3 or self.lcc_window % 2 == 0:
            raise ValueError("lcc_window must be odd and >= 3")
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def _box_sum(x, window):
    # zero-padded window sum: a symmetric operator, so it is its own adjoint
    return uniform_filter(x, size=window, mode="constant", cval=0.0) * float(window) ** 2


def lcc(a, b, window: int = 7, with_grad: bool = True):
    """Mean squared local Pearson correlation between ``a`` and ``b``.

    Windows where both images are constant count as 1, windows where exactly
    one is constant count as 0.  Returns ``(score, d score / d b)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd")
    n = _box_sum(np.ones_like(a), window)
    ma = _box_sum(a, window) / n
    mb = _box_sum(b, window) / n
    va = _box_sum(a * a, window) / n - ma * ma
    vb = _box_sum(b * b, window) / n - mb * mb
    cab = _box_sum(a * b, window) / n - ma * mb
    tol_a = 1e-12 * max(float(np.mean(a * a)), 1e-300)
    tol_b = 1e-12 * max(float(np.mean(b * b)), 1e-300)
    ca = va <= tol_a
    cb = vb <= tol_b
    reg = ~ca & ~cb
    va_s = np.where(reg, va, 1.0)
    vb_s = np.where(reg, vb, 1.0)
    r2 = np.where(reg, cab * cab / (va_s * vb_s), np.where(ca & cb, 1.0, 0.0))
    r2 = np.clip(r2, 0.0, 1.0)
    score = float(r2.mean())
    if not with_grad:
        return score
    N = a.size
    g1 = np.where(reg, 2.0 * cab / (va_s * vb_s), 0.0)
    g2 = np.where(reg, -cab * cab / (va_s * vb_s * vb_s), 0.0)
    grad = (
        a * _box_sum(g1 / n, window)
        + _box_sum((-ma * g1 - 2.0 * mb * g2) / n, window)
        + 2.0 * b * _box_sum(g2 / n, window)
    ) / N
    return score, grad


# ---------------------------------------------------------------------------
# Regulariser
# ---------------------------------------------------------------------------

def grid_array(k) -> np.ndarray:
    return k.coefficients if isinstance(k, ControlGrid2D) else np.asarray(k, dtype=float)


def tv_iso(k, eps: float = TV_EPS):
    """Isotropic TV of node displacements with forward differences.

    ``sum_nodes sqrt(|dx u|^2 + |dy u|^2 + |dx v|^2 + |dy v|^2 + eps^2)``; the
    last difference along each axis is zero.  Returns ``(value, gradient)``.
    """
    k = grid_array(k)
    dx = np.zeros_like(k)
    dy = np.zeros_like(k)
    dx[:, :-1, :] = k[:, 1:, :] - k[:, :-1, :]
    dy[:, :, :-1] = k[:, :, 1:] - k[:, :, :-1]
    q = np.sqrt((dx * dx).sum(axis=0) + (dy * dy).sum(axis=0) + eps * eps)
    wx = dx / q
    wy = dy / q
    grad = np.zeros_like(k)
    grad[:, :-1, :] -= wx[:, :-1, :]
    grad[:, 1:, :] += wx[:, :-1, :]
    grad[:, :, :-1] -= wy[:, :, :-1]
    grad[:, :, 1:] += wy[:, :, :-1]
    return float(q.sum()), grad


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    nit: int
    n_eval: int
    warnflag: bool
    history: list = field(default_factory=list)


def lbfgs_minimize(objective, x0, iters: int = 100, m: int = 10, gtol: float = 1e-10,
                   c1: float = 1e-4, max_backtrack: int = 40) -> LbfgsResult:
    """Limited-memory BFGS with two-loop recursion and Armijo backtracking.

    ``objective(x) -> (value, gradient)``.  The returned iterate never has a
    larger objective than ``x0``; a failed line search stops early and sets
    ``warnflag``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.array(x0, dtype=float)
    shape = x.shape
    x = x.ravel()
    fx, gx = objective(x.reshape(shape))
    gx = np.asarray(gx, dtype=float).ravel()
    n_eval = 1
    history = [float(fx)]
    S, Y, R = [], [], []
    warnflag = False
    nit = 0
    for nit in range(1, iters + 1):
        if np.max(np.abs(gx)) <= gtol:
            nit -= 1
            break
        d = _two_loop(gx, S, Y, R)
        slope = float(gx @ d)
        if not slope < 0:
            S, Y, R = [], [], []
            d = -gx / max(np.linalg.norm(gx), 1e-300)
            slope = float(gx @ d)
        alpha = 1.0
        for _ in range(max_backtrack):
            x_new = x + alpha * d
            f_new, g_new = objective(x_new.reshape(shape))
            n_eval += 1
            if np.isfinite(f_new) and f_new <= fx + c1 * alpha * slope:
                break
            alpha *= 0.5
        else:
            warnflag = True
            break
        g_new = np.asarray(g_new, dtype=float).ravel()
        s = x_new - x
        yv = g_new - gx
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
            R.append(1.0 / sy)
            if len(S) > m:
                S.pop(0)
                Y.pop(0)
                R.pop(0)
        x, fx, gx = x_new, float(f_new), g_new
        history.append(fx)
    return LbfgsResult(x.reshape(shape), float(fx), nit, n_eval, warnflag, history)


def _two_loop(g, S, Y, R):
    if not S:
        return -g / max(np.linalg.norm(g), 1e-300)
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(R)):
        a = r * float(s @ q)
        alphas.append(a)
        q -= a * y
    gamma = float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    q *= gamma
    for (s, y, r), a in zip(zip(S, Y, R), reversed(alphas)):
        bcoef = r * float(y @ q)
        q += (a - bcoef) * s
    return -q


# ---------------------------------------------------------------------------
# Pairwise registration
# ---------------------------------------------------------------------------

@dataclass
class PairResult:
    grid: ControlGrid2D
    field: DisplacementField2D
    objective0: float
    objective: float
    warnflag: bool
    history: list


def registration_objective(moving, fixed, grid_dims, lambda2, window):
    """Objective of the control-node displacements for one slice pair."""
    moving = np.asarray(moving, dtype=float)
    fixed = np.asarray(fixed, dtype=float)
    w = DATA_WEIGHT * moving.size

    def fun(k):
        k = np.asarray(k, dtype=float).reshape(2, *grid_dims)
        fld = densify(ControlGrid2D(k), moving.shape)
        warped, dimg = warp(moving, fld, with_grad=True)
        score, gb = lcc(fixed, warped, window)
        tv, gtv = tv_iso(k)
        value = w * (1.0 - score) + lambda2 * tv
        gfield = -w * gb[None] * dimg
        grad = densify_adjoint(gfield, grid_dims) + lambda2 * gtv
        return value, grad

    return fun


def register_pair(moving, fixed, cfg: RegConfig | None = None, iters: int | None = None) -> PairResult:
    """Deformably align ``moving`` onto ``fixed``; L-BFGS from a zero grid."""
    cfg = (cfg or RegConfig()).validate()
    moving = np.asarray(moving, dtype=float)
    fixed = np.asarray(fixed, dtype=float)
    if moving.shape != fixed.shape or moving.ndim != 2:
        raise ValueError(f"need two 2D images of equal shape, got {moving.shape} and {fixed.shape}")
    iters = cfg.iters_interb if iters is None else iters
    grid_dims = tuple(cfg.grid_dims)
    k = np.zeros((2, *grid_dims))
    history = []
    objective0 = None
    warnflag = False
    for level in reversed(range(cfg.pyramid_levels)):
        gd = tuple(max(2, int(round(g / 2 ** level))) for g in grid_dims)
        if gd != k.shape[1:]:
            k = _regrid(k, gd)
        fun = registration_objective(moving, fixed, gd, cfg.lambda2, cfg.lcc_window)
        if objective0 is None and level == 0:
            objective0 = fun(np.zeros((2, *gd)))[0]
        res = lbfgs_minimize(fun, k, iters=iters, m=cfg.memory)
        k = res.x
        history += res.history
        warnflag |= res.warnflag
    if objective0 is None:
        objective0 = history[0]
    final_fun = registration_objective(moving, fixed, grid_dims, cfg.lambda2, cfg.lcc_window)
    final = final_fun(k)[0]
    if final > objective0:
        # coarse levels can end above the zero-grid objective; fall back
        k = np.zeros_like(k)
        final = objective0
    if warnflag:
        warnings.warn("registration line search failed; returning best iterate",
                      RegistrationWarning, stacklevel=2)
    grid = ControlGrid2D(k)
    return PairResult(grid, densify(grid, moving.shape), float(objective0), float(final),
                      warnflag, history)


def _regrid(k, gd):
    from .volume import linear_weights

    Px = linear_weights(k.shape[1], np.linspace(0, k.shape[1] - 1, gd[0]))
    Py = linear_weights(k.shape[2], np.linspace(0, k.shape[2] - 1, gd[1]))
    return np.stack([Px @ k[c] @ Py.T for c in range(2)])


# ---------------------------------------------------------------------------
# Series-level corrections
# ---------------------------------------------------------------------------

@dataclass
class CorrectionResult:
    series: BValueSeries
    fields: list            # fields[i][z]: DisplacementField2D per b-value and slice
    log: list               # dicts: b_index, slice, objective0, objective, iters, warn


def _map(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _quiet_register(moving, fixed, cfg, iters):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegistrationWarning)
        return register_pair(moving, fixed, cfg, iters)


def interb_correct(series: BValueSeries, cfg: RegConfig | None = None, threads: int = 1) -> CorrectionResult:
    """Register every slice of every b > b0 volume to the same slice of b0."""
    cfg = (cfg or RegConfig()).validate()
    arr = series.as_array()
    nx, ny, nz, nb = arr.shape
    zero = DisplacementField2D.zeros((nx, ny))
    fields = [[zero for _ in range(nz)] for _ in range(nb)]
    if nb < 2:
        return CorrectionResult(series, fields, [])
    jobs = [(i, z) for i in range(1, nb) for z in range(nz)]

    def job(iz):
        i, z = iz
        return _quiet_register(arr[:, :, z, i], arr[:, :, z, 0], cfg, cfg.iters_interb)

    results = _map(job, jobs, threads)
    out = arr.copy()
    log = []
    for (i, z), res in zip(jobs, results):
        fields[i][z] = res.field
        out[:, :, z, i] = warp(arr[:, :, z, i], res.field)
        log.append(_log_row(i, z, res))
    return CorrectionResult(BValueSeries.from_array(series.bvalues, series.geometry, out), fields, log)


def coregister(series: BValueSeries, anat_ref: ScalarVolume, cfg: RegConfig | None = None,
               threads: int = 1) -> CorrectionResult:
    """Register each b0 slice to the anatomy resampled onto the series grid,
    then apply that slice's field to every b-value."""
    cfg = (cfg or RegConfig()).validate()
    geom = series.geometry
    try:
        anat = resample_cubic(anat_ref, geom).data
    except GeometryError:
        raise
    arr = series.as_array()
    nx, ny, nz, nb = arr.shape
    if anat.shape != (nx, ny, nz):
        raise GeometryError("resampled anatomy does not match the series grid")
    jobs = list(range(nz))

    def job(z):
        return _quiet_register(arr[:, :, z, 0], anat[:, :, z], cfg, cfg.iters_coreg)

    results = _map(job, jobs, threads)
    out = np.empty_like(arr)
    fields = []
    log = []
    for z, res in zip(jobs, results):
        fields.append(res.field)
        for i in range(nb):
            out[:, :, z, i] = warp(arr[:, :, z, i], res.field)
        log.append(_log_row(0, z, res))
    return CorrectionResult(BValueSeries.from_array(series.bvalues, geom, out),
                            [fields for _ in range(nb)], log)


def _log_row(i, z, res: PairResult):
    return {"b_index": i, "slice": z, "objective0": res.objective0,
            "objective": res.objective, "iters": len(res.history) - 1, "warn": int(res.warnflag)}
