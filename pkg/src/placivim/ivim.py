"""Bi-exponential IVIM signal model and deterministic estimators.

Parameters live in two spaces.  The natural space holds the perfusion
fraction ``f``, tissue diffusion ``d`` and pseudo-diffusion ``ds`` (both
mm^2/s) plus the amplitude ``y0``.  The transformed space holds
``F = logit(f)``, ``D = log(d)`` and ``Ds = log(ds)`` which are unconstrained
and are what the samplers move in.

Every estimator has a vectorised form working on ``(n_voxels, n_b)`` signal
arrays, so that volume fits need no Python loop over voxels.  Row results
never depend on which other rows share the batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_BVALUES = (0.0, 15.0, 45.0, 80.0, 115.0, 205.0, 245.0, 345.0, 470.0, 700.0, 1000.0)

RESIDUAL_FLOOR = 1e-30
D_FLOOR = 1e-6
DS_CLAMP_FACTOR = 1.1


class IvimDomainError(ValueError):
    """Parameters or signals outside the model's domain."""


class IvimFitWarning(RuntimeWarning):
    """A fit hit a floor, clamp, or iteration limit."""


@dataclass(frozen=True)
class IvimParams:
    f: float
    d: float
    ds: float
    y0: float = 1.0

    def validate(self, strict: bool = False) -> "IvimParams":
        lo_ok = (0.0 < self.f < 1.0) if strict else (0.0 <= self.f <= 1.0)
        if not lo_ok:
            raise IvimDomainError(f"f must lie in [0, 1], got {self.f}")
        if not self.d > 0 or not self.ds > 0:
            raise IvimDomainError(f"d and ds must be > 0, got d={self.d}, ds={self.ds}")
        if self.y0 <= 0:
            raise IvimDomainError(f"y0 must be > 0, got {self.y0}")
        return self


@dataclass(frozen=True)
class TransformedParams:
    F: float
    D: float
    Ds: float

    def as_array(self) -> np.ndarray:
        return np.array([self.F, self.D, self.Ds])


def logit(f):
    f = np.asarray(f, dtype=float)
    return np.log(f) - np.log1p(-f)


def expit(F):
    F = np.asarray(F, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * F))


def to_transformed(p: IvimParams) -> TransformedParams:
    if not (0.0 < p.f < 1.0) or p.d <= 0 or p.ds <= 0:
        raise IvimDomainError(f"transform needs 0<f<1 and d, ds > 0, got {p}")
    return TransformedParams(float(logit(p.f)), float(np.log(p.d)), float(np.log(p.ds)))


def from_transformed(t: TransformedParams, y0: float = 1.0) -> IvimParams:
    vals = np.array([t.F, t.D, t.Ds], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise IvimDomainError(f"transformed parameters must be finite, got {t}")
    return IvimParams(float(expit(t.F)), float(np.exp(t.D)), float(np.exp(t.Ds)), y0)


def shape(b, f, d, ds):
    """Unit-amplitude bi-exponential; broadcasts ``b`` against the parameters."""
    b = np.asarray(b, dtype=float)
    return f * np.exp(-b * ds) + (1.0 - f) * np.exp(-b * d)


def signal(b, p: IvimParams):
    """``y0 * (f exp(-b ds) + (1 - f) exp(-b d))``."""
    p.validate()
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise IvimDomainError("b-values must be >= 0")
    out = p.y0 * shape(b, p.f, p.d, p.ds)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------

def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed-order accumulation: per-row result independent of batch size
    acc = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        acc = acc + a[..., k] * b[..., k]
    return acc


def marginal_loglik_from_shape(y: np.ndarray, g: np.ndarray, yy: np.ndarray | None = None):
    """Vectorised log marginal likelihood given unit-amplitude shapes ``g``.

    Returns ``(loglik, floored)``; amplitude (flat prior) and noise variance
    (Jeffreys prior) are integrated out.
    """
    if yy is None:
        yy = _rowdot(y, y)
    n_b = y.shape[-1]
    gg = _rowdot(g, g)
    yg = _rowdot(y, g)
    resid = yy - yg * yg / gg
    floored = resid <= RESIDUAL_FLOOR
    resid = np.where(floored, RESIDUAL_FLOOR, resid)
    return -0.5 * np.log(gg) - 0.5 * (n_b - 1) * np.log(resid), floored


def log_marginal_likelihood(y, bvalues, t: TransformedParams) -> float:
    """Log-likelihood of one voxel's signals with amplitude and noise marginalised.

    ``-(1/2) log(g'g) - ((N_b - 1)/2) log(y'y - (y'g)^2 / g'g)`` with ``g`` the
    unit-amplitude model at ``t``; the additive constant is dropped.
    """
    y = np.asarray(y, dtype=float)
    b = np.asarray(bvalues, dtype=float)
    if y.ndim != 1 or y.size != b.size:
        raise ValueError("y and bvalues must be 1D of equal length")
    if y.size < 3:
        raise ValueError("need at least 3 b-values")
    if not np.any(y):
        raise ValueError("y must not be all zero")
    g = shape(b, expit(t.F), np.exp(t.D), np.exp(t.Ds))
    val, floored = marginal_loglik_from_shape(y[None, :], g[None, :])
    if floored[0]:
        warnings.warn("residual sum of squares hit the floor", IvimFitWarning, stacklevel=2)
    return float(val[0])


def marginal_loglik_constant(n_b: int) -> float:
    """Additive constant dropped by :func:`log_marginal_likelihood`."""
    from scipy.special import gammaln

    return (
        -0.5 * n_b * np.log(2 * np.pi)
        + 0.5 * np.log(2 * np.pi)
        + gammaln((n_b - 1) / 2)
        + 0.5 * (n_b - 1) * np.log(2.0)
    )


def ml_amplitude(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Least-squares amplitude ``y'g / g'g`` for each row."""
    return _rowdot(y, g) / _rowdot(g, g)


# ---------------------------------------------------------------------------
# Segmented fit
# ---------------------------------------------------------------------------

@dataclass
class IvimArrays:
    """Per-voxel parameter arrays plus a per-voxel warning flag."""

    f: np.ndarray
    d: np.ndarray
    ds: np.ndarray
    y0: np.ndarray
    flag: np.ndarray

    def __len__(self):
        return self.f.size

    def row(self, i: int) -> IvimParams:
        return IvimParams(float(self.f[i]), float(self.d[i]), float(self.ds[i]), float(self.y0[i]))

    def transformed(self) -> np.ndarray:
        """``(n, 3)`` array of (F, D, Ds); f is pulled off the 0/1 bounds first."""
        f = np.clip(self.f, 1e-6, 1 - 1e-6)
        return np.stack([logit(f), np.log(self.d), np.log(self.ds)], axis=-1)


def _check_signals(y, b):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    b = np.asarray(b, dtype=float)
    if y.shape[-1] != b.size:
        raise ValueError(f"signals have {y.shape[-1]} b-values, expected {b.size}")
    return y, b


def segmented_fit(y, bvalues, b_threshold: float = 200.0, floor: float | None = None,
                  n_grid: int = 200, newton_iters: int = 20) -> IvimArrays:
    """Vectorised segmented IVIM fit.

    1. log-linear least squares over ``b >= b_threshold`` gives ``d`` and the
       intercept ``A``;
    2. ``f = clip(1 - A / y(b=0), 0, 1)``;
    3. ``ds`` fits the low-b residual ``y - A exp(-b d)`` with a log-spaced grid
       search refined by safeguarded Newton steps in ``log ds``.

    ``floor`` replaces non-positive signals before taking logs (rows are
    flagged); without it non-positive signals raise.
    """
    y, b = _check_signals(y, bvalues)
    hi = b >= b_threshold
    lo = ~hi
    if hi.sum() < 2 or lo.sum() < 1:
        raise ValueError("need >= 2 b-values above the threshold and >= 1 below")
    zero = np.flatnonzero(b == 0)
    if zero.size == 0:
        raise ValueError("segmented fit needs a b = 0 measurement")
    flag = np.zeros(y.shape[0], dtype=bool)

    y_hi = y[:, hi]
    bad = y_hi <= 0
    if np.any(bad) or np.any(y[:, zero[0]] <= 0):
        if floor is None:
            raise IvimDomainError("non-positive signal: log-linear fit undefined")
        flag |= bad.any(axis=1) | (y[:, zero[0]] <= 0)
        y_hi = np.maximum(y_hi, floor)
    X = np.stack([np.ones(hi.sum()), -b[hi]], axis=1)
    # least squares via the pseudo-inverse: same operator for every row
    coef = np.linalg.pinv(X) @ np.log(y_hi).T
    log_a, d = coef[0], coef[1]
    low_d = d < D_FLOOR
    flag |= low_d
    d = np.maximum(d, D_FLOOR)
    A = np.exp(log_a)

    y0 = y[:, zero[0]]
    if floor is not None:
        y0 = np.maximum(y0, floor)
    f = np.clip(1.0 - A / y0, 0.0, 1.0)

    b_lo = b[lo]
    resid = y[:, lo] - A[:, None] * np.exp(-b_lo[None, :] * d[:, None])
    amp = f * y0
    ds = _fit_ds(resid, b_lo, amp, d, n_grid, newton_iters)
    return IvimArrays(f, d, ds, y0, flag)


def _fit_ds(resid, b_lo, amp, d, n_grid, newton_iters):
    ds_min = DS_CLAMP_FACTOR * d
    # log-spaced grid between the ds clamp and 1 mm^2/s
    u = np.linspace(0.0, 1.0, n_grid)
    log_lo = np.log(ds_min)
    log_hi = np.maximum(np.log(1.0), log_lo + 1e-3)
    grid = log_lo[:, None] + u[None, :] * (log_hi - log_lo)[:, None]
    pred = amp[:, None, None] * np.exp(-b_lo[None, None, :] * np.exp(grid)[:, :, None])
    sse = ((resid[:, None, :] - pred) ** 2).sum(axis=-1)
    s = grid[np.arange(grid.shape[0]), np.argmin(sse, axis=1)]

    def sse_of(s):
        e = np.exp(-b_lo[None, :] * np.exp(s)[:, None])
        return ((resid - amp[:, None] * e) ** 2).sum(axis=-1)

    cur = sse_of(s)
    for _ in range(newton_iters):
        ds = np.exp(s)
        e = np.exp(-b_lo[None, :] * ds[:, None])
        m = amp[:, None] * e
        r = resid - m
        dm = -m * b_lo[None, :] * ds[:, None]          # d m / d s
        d2m = dm * (1.0 - b_lo[None, :] * ds[:, None])  # d^2 m / d s^2
        grad = -2.0 * (r * dm).sum(-1)
        hess = 2.0 * (dm * dm - r * d2m).sum(-1)
        step = np.where(hess > 0, -grad / np.where(hess > 0, hess, 1.0), 0.0)
        step = np.clip(step, -0.5, 0.5)
        trial = np.clip(s + step, log_lo, log_hi)
        new = sse_of(trial)
        better = new < cur
        s = np.where(better, trial, s)
        cur = np.where(better, new, cur)
        if not np.any(better):
            break
    return np.maximum(np.exp(s), ds_min)


def segmented_init(y, bvalues, b_threshold: float = 200.0) -> IvimParams:
    """Segmented fit of a single voxel; warns when a clamp was needed."""
    res = segmented_fit(np.asarray(y, dtype=float)[None, :], bvalues, b_threshold)
    if res.flag[0]:
        warnings.warn("segmented fit clamped d to its floor", IvimFitWarning, stacklevel=2)
    return res.row(0)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

# transformed-coordinate box; keeps exp/expit finite on hopeless voxels
_LM_LOWER = np.array([-12.0, np.log(1e-6), np.log(1e-6), -np.inf])
_LM_UPPER = np.array([12.0, np.log(5.0), np.log(5.0), np.inf])


def model_and_jacobian(b: np.ndarray, q: np.ndarray):
    """Signals and Jacobian wrt ``q = (F, D, Ds, log y0)``.

    ``q`` has shape (n, 4); returns ``(S, J)`` with shapes (n, Nb), (n, Nb, 4).
    """
    F, D, Ds, ly0 = q[:, 0:1], q[:, 1:2], q[:, 2:3], q[:, 3:4]
    f = expit(F)
    d = np.exp(D)
    ds = np.exp(Ds)
    y0 = np.exp(ly0)
    es = np.exp(-b[None, :] * ds)
    ed = np.exp(-b[None, :] * d)
    S = y0 * (f * es + (1 - f) * ed)
    J = np.empty(S.shape + (4,))
    J[..., 0] = y0 * (es - ed) * f * (1 - f)
    J[..., 1] = -y0 * (1 - f) * ed * b[None, :] * d
    J[..., 2] = -y0 * f * es * b[None, :] * ds
    J[..., 3] = S
    return S, J


@dataclass
class LmResult:
    params: IvimArrays
    sse: np.ndarray
    n_iter: np.ndarray
    history: list | None = None


def lm_fit(y, bvalues, init: IvimArrays, max_iter: int = 200, tol: float = 1e-14,
           lam0: float = 1e-3, record: bool = False) -> LmResult:
    """Vectorised Levenberg-Marquardt on the squared signal residual.

    Works in ``(F, D, Ds, log y0)`` with Marquardt diagonal scaling.  A step is
    kept only if it lowers the residual, so the accepted SSE sequence is
    non-increasing.  Rows still moving at ``max_iter`` are flagged.
    """
    y, b = _check_signals(y, bvalues)
    n = y.shape[0]
    f0 = np.clip(init.f, 1e-4, 1 - 1e-4)
    q = np.stack([logit(f0), np.log(init.d), np.log(init.ds), np.log(np.maximum(init.y0, 1e-12))], axis=1)
    q = np.clip(q, _LM_LOWER, _LM_UPPER)
    S, J = model_and_jacobian(b, q)
    r = y - S
    sse = _rowdot(r, r)
    lam = np.full(n, lam0)
    active = np.ones(n, dtype=bool)
    n_iter = np.zeros(n, dtype=int)
    history = [sse.copy()] if record else None
    eye = np.eye(4)
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        Ja, ra = J[idx], r[idx]
        JtJ = np.einsum("nbi,nbj->nij", Ja, Ja)
        Jtr = np.einsum("nbi,nb->ni", Ja, ra)
        diag = np.einsum("nii->ni", JtJ)
        scale = np.maximum(diag, 1e-12 * np.maximum(diag.max(axis=1, keepdims=True), 1e-300))
        A = JtJ + lam[idx, None, None] * scale[:, :, None] * eye
        try:
            step = np.linalg.solve(A, Jtr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Ai, gi, rcond=None)[0] for Ai, gi in zip(A, Jtr)])
        q_new = np.clip(q[idx] + step, _LM_LOWER, _LM_UPPER)
        S_new, J_new = model_and_jacobian(b, q_new)
        r_new = y[idx] - S_new
        sse_new = _rowdot(r_new, r_new)
        good = np.isfinite(sse_new) & (sse_new < sse[idx])
        gi = idx[good]
        rel = (sse[gi] - sse_new[good]) / np.maximum(sse[gi], 1e-300)
        q[gi], S[gi], J[gi], r[gi], sse[gi] = q_new[good], S_new[good], J_new[good], r_new[good], sse_new[good]
        lam[gi] = np.maximum(lam[gi] / 10.0, 1e-12)
        bi = idx[~good]
        lam[bi] = lam[bi] * 10.0
        n_iter[idx] += 1
        done = np.zeros(n, dtype=bool)
        done[gi] = (rel < tol) | (sse[gi] <= 1e-300)
        done[bi] = lam[bi] > 1e12
        active &= ~done
        if record:
            history.append(sse.copy())
    flag = active.copy()
    params = IvimArrays(expit(q[:, 0]), np.exp(q[:, 1]), np.exp(q[:, 2]), np.exp(q[:, 3]), flag)
    return LmResult(params, sse, n_iter, history)


def lsq_fit_lm(y, bvalues, init: IvimParams, max_iter: int = 200) -> IvimParams:
    """Single-voxel Levenberg-Marquardt fit started at ``init``."""
    init.validate()
    arr = IvimArrays(np.array([init.f]), np.array([init.d]), np.array([init.ds]),
                     np.array([init.y0]), np.zeros(1, dtype=bool))
    res = lm_fit(np.asarray(y, dtype=float)[None, :], bvalues, arr, max_iter=max_iter)
    if res.params.flag[0]:
        warnings.warn("Levenberg-Marquardt hit the iteration limit", IvimFitWarning, stacklevel=2)
    return res.params.row(0)
