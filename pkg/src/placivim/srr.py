"""Super-resolution reconstruction of an isotropic volume from orthogonal
thick-slice stacks.

Each stack is modelled as ``y_i = D_i B_i T_i x``: ``T_i`` permutes the
high-resolution axes into the stack frame, ``B_i`` is a separable Gaussian
slice profile and ``D_i`` samples the stack voxel centres by linear
interpolation.  All three are separable, so a stack operator is stored as one
dense matrix per axis plus the permutation.  The reconstruction minimises

    sum_i ||A_i x - y_i||^2 + lambda1 * sum sqrt(1 + beta |grad x|^2)

with a primal-dual iteration that treats the data terms through their duals
and the Beltrami term through its gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .volume import (
    GeometryError,
    ScalarVolume,
    VolumeGeometry,
    apply_along_axis,
    linear_weights,
    resample_cubic,
)

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

# high-resolution axis order seen by each stack: (in-plane, in-plane, slice)
ORIENTATIONS = {
    "axial": (0, 1, 2),
    "coronal": (0, 2, 1),
    "sagittal": (1, 2, 0),
}


class SrrWarning(RuntimeWarning):
    """Solver hit max_iters before the tolerance."""


def gaussian_blur_matrix(n: int, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Row-normalised truncated Gaussian, ``sigma`` in voxels; identity if 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.eye(n)
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    W = np.exp(-0.5 * (diff / sigma) ** 2)
    W[np.abs(diff) > truncate * sigma + 1e-12] = 0.0
    return W / W.sum(axis=1, keepdims=True)


@dataclass
class StackOperator:
    """``D B T`` for one stack: axis permutation and per-axis matrices."""

    perm: tuple
    matrices: tuple      # three (n_lr, n_hr) matrices, stack-axis order
    hr_geometry: VolumeGeometry
    lr_geometry: VolumeGeometry

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.transpose(x, self.perm)
        for axis, M in enumerate(self.matrices):
            out = apply_along_axis(out, M, axis)
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        out = y
        for axis, M in enumerate(self.matrices):
            out = apply_along_axis(out, M.T, axis)
        return np.transpose(out, np.argsort(self.perm))

    def dense(self) -> np.ndarray:
        """Explicit matrix; only sensible for tiny grids."""
        n = self.hr_geometry.n_voxels
        cols = [self.forward(e.reshape(self.hr_geometry.dims)).ravel() for e in np.eye(n)]
        return np.array(cols).T


@dataclass
class SrrOperators:
    stacks: list = field(default_factory=list)

    def __len__(self):
        return len(self.stacks)

    @property
    def hr_geometry(self) -> VolumeGeometry:
        return self.stacks[0].hr_geometry


def stack_operator(hr: VolumeGeometry, lr: VolumeGeometry, orientation="axial",
                   blur: bool = True, inplane_fwhm_vox: float = 1.0) -> StackOperator:
    """Build ``D B T`` for a stack whose geometry is given in its own frame.

    ``lr`` axes follow ``ORIENTATIONS[orientation]`` over the high-resolution
    axes; its origin is in the same physical coordinates.  Blur FWHM is the
    slice thickness through-plane and ``inplane_fwhm_vox`` stack voxels
    in-plane.
    """
    perm = ORIENTATIONS[orientation] if isinstance(orientation, str) else tuple(orientation)
    if sorted(perm) != [0, 1, 2]:
        raise GeometryError(f"bad axis permutation {perm}")
    mats = []
    for axis in range(3):
        src = perm[axis]
        h = hr.effective_spacing[src]
        pos = (lr.axis_coords(axis) - hr.origin[src]) / h
        lo, hi = pos.min(), pos.max()
        if lo < -0.5 - 1e-9 or hi > hr.dims[src] - 0.5 + 1e-9:
            raise GeometryError(f"stack axis {axis} leaves the reconstruction FoV")
        D = linear_weights(hr.dims[src], pos)
        if blur:
            fwhm = lr.spacing[axis] if axis == 2 else inplane_fwhm_vox * lr.spacing[axis]
            B = gaussian_blur_matrix(hr.dims[src], fwhm * FWHM_TO_SIGMA / h)
            D = D @ B
        mats.append(D)
    return StackOperator(perm, tuple(mats), hr, lr)


def build_operators(hr: VolumeGeometry, stack_geoms, orientations, blur: bool = True) -> SrrOperators:
    if len(stack_geoms) != len(orientations):
        raise ValueError("one orientation per stack geometry")
    return SrrOperators([stack_operator(hr, g, o, blur) for g, o in zip(stack_geoms, orientations)])


def apply_forward(ops: SrrOperators, i: int, x: ScalarVolume) -> ScalarVolume:
    """``D_i B_i T_i x``."""
    op = ops.stacks[i]
    if x.geometry.dims != op.hr_geometry.dims:
        raise GeometryError("volume does not match the reconstruction grid")
    return ScalarVolume(op.lr_geometry, op.forward(np.asarray(x.data, dtype=float)))


def apply_adjoint(ops: SrrOperators, i: int, y: ScalarVolume) -> ScalarVolume:
    """``T_i^T B_i^T D_i^T y``."""
    op = ops.stacks[i]
    if y.geometry.dims != op.lr_geometry.dims:
        raise GeometryError("volume does not match the stack grid")
    return ScalarVolume(op.hr_geometry, op.adjoint(np.asarray(y.data, dtype=float)))


# ---------------------------------------------------------------------------
# Beltrami regulariser
# ---------------------------------------------------------------------------

def forward_grad(x: np.ndarray) -> np.ndarray:
    """Forward differences, zero across the far boundary (Neumann)."""
    g = np.zeros((x.ndim,) + x.shape)
    for a in range(x.ndim):
        d = np.diff(x, axis=a)
        sl = [slice(None)] * x.ndim
        sl[a] = slice(0, x.shape[a] - 1)
        g[a][tuple(sl)] = d
    return g


def forward_grad_adjoint(g: np.ndarray) -> np.ndarray:
    out = np.zeros(g.shape[1:])
    nd = out.ndim
    for a in range(nd):
        n = out.shape[a]
        lo = [slice(None)] * nd
        hi = [slice(None)] * nd
        lo[a] = slice(0, n - 1)
        hi[a] = slice(1, n)
        ga = g[a][tuple(lo)]
        out[tuple(lo)] -= ga
        out[tuple(hi)] += ga
    return out


def beltrami(x, beta: float = 1.0):
    """``sum sqrt(1 + beta |grad x|^2)`` and its gradient."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    arr = x.data if isinstance(x, ScalarVolume) else np.asarray(x, dtype=float)
    arr = np.asarray(arr, dtype=float)
    g = forward_grad(arr)
    q = np.sqrt(1.0 + beta * (g * g).sum(axis=0))
    grad = forward_grad_adjoint(beta * g / q)
    if isinstance(x, ScalarVolume):
        return float(q.sum()), ScalarVolume(x.geometry, grad)
    return float(q.sum()), grad


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class SrrConfig:
    lambda1: float = 0.5
    beta: float = 1.0
    tau: float | None = None      # primal step; derived from operator norm if None
    sigma: float | None = None    # dual step
    max_iters: int = 300
    tol: float = 1e-6
    power_iters: int = 30

    def validate(self) -> "SrrConfig":
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        for name in ("tau", "sigma"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        return self


@dataclass
class SrrResult:
    volume: ScalarVolume
    objective: list
    converged: bool
    n_iter: int
    op_norm: float

    @property
    def final_objective(self) -> float:
        return self.objective[-1]


def operator_norm(ops: SrrOperators, iters: int = 30, seed: int = 0) -> float:
    """Power iteration estimate of the norm of the stacked operator."""
    x = np.random.default_rng(seed).standard_normal(ops.hr_geometry.dims)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = sum(op.adjoint(op.forward(x)) for op in ops.stacks)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return float(np.sqrt(lam))


def srr_objective(x: np.ndarray, stacks, ops: SrrOperators, lambda1: float, beta: float) -> float:
    val = sum(float(((op.forward(x) - y) ** 2).sum()) for op, y in zip(ops.stacks, stacks))
    if lambda1 > 0:
        val += lambda1 * beltrami(x, beta)[0]
    return val


def initial_guess(stacks, ops: SrrOperators) -> np.ndarray:
    """Mean of the stacks cubic-resampled onto the reconstruction grid."""
    return np.mean([upsample_stack(s, op) for s, op in zip(stacks, ops.stacks)], axis=0)


def upsample_stack(stack: np.ndarray, op: StackOperator) -> np.ndarray:
    """Cubic resampling of one stack onto the high-resolution grid."""
    lr = op.lr_geometry
    inv = np.argsort(op.perm)
    # express the stack in the physical axis order, then resample
    geom = VolumeGeometry(
        tuple(lr.dims[i] for i in inv),
        tuple(lr.effective_spacing[i] for i in inv),
        tuple(lr.origin[i] for i in inv),
    )
    vol = ScalarVolume(geom, np.transpose(stack, inv))
    return resample_cubic(vol, op.hr_geometry).data


def srr_reconstruct(stacks, ops: SrrOperators, cfg: SrrConfig | None = None, x0=None) -> SrrResult:
    """Primal-dual reconstruction.

    With ``g_i(w) = ||w - y_i||^2`` the dual proximal step is
    ``z <- (v - s y_i) / (1 + s/2)``; the Beltrami term enters the primal step
    through its gradient, whose Lipschitz constant is at most
    ``12 lambda1 beta`` for 3D forward differences.  Steps satisfy
    ``1/tau - sigma ||A||^2 >= L/2``.
    """
    cfg = (cfg or SrrConfig()).validate()
    ys = [np.asarray(s.data if isinstance(s, ScalarVolume) else s, dtype=float) for s in stacks]
    if len(ys) != len(ops):
        raise ValueError("one stack per operator")
    for y, op in zip(ys, ops.stacks):
        if y.shape != op.lr_geometry.dims:
            raise GeometryError("stack shape does not match its operator")
    norm = operator_norm(ops, cfg.power_iters)
    L = 12.0 * cfg.lambda1 * cfg.beta
    sigma = cfg.sigma if cfg.sigma is not None else 1.0 / max(norm, 1e-12)
    tau = cfg.tau if cfg.tau is not None else 0.99 / (sigma * norm ** 2 + L / 2.0)
    if 1.0 / tau - sigma * norm ** 2 < L / 2.0 - 1e-12:
        raise ValueError("step sizes violate the convergence condition")

    x = initial_guess(ys, ops) if x0 is None else np.array(
        x0.data if isinstance(x0, ScalarVolume) else x0, dtype=float)
    z = [np.zeros_like(y) for y in ys]
    hist = [srr_objective(x, ys, ops, cfg.lambda1, cfg.beta)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad = sum(op.adjoint(zi) for op, zi in zip(ops.stacks, z))
        if cfg.lambda1 > 0:
            grad = grad + cfg.lambda1 * beltrami(x, cfg.beta)[1]
        x_new = x - tau * grad
        xbar = 2.0 * x_new - x
        for i, (op, y) in enumerate(zip(ops.stacks, ys)):
            v = z[i] + sigma * op.forward(xbar)
            z[i] = (v - sigma * y) / (1.0 + sigma / 2.0)
        dx = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-300)
        x = x_new
        hist.append(srr_objective(x, ys, ops, cfg.lambda1, cfg.beta))
        if it > 5 and dx < cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"SRR stopped at max_iters={cfg.max_iters}", SrrWarning, stacklevel=2)
    return SrrResult(ScalarVolume(ops.hr_geometry, x), hist, converged, it, norm)


def psnr(x, ref, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; peak defaults to the reference range."""
    x = np.asarray(getattr(x, "data", x), dtype=float)
    ref = np.asarray(getattr(ref, "data", ref), dtype=float)
    mse = float(np.mean((x - ref) ** 2))
    if peak is None:
        peak = float(ref.max() - ref.min())
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def best_single_stack_psnr(stacks, ops: SrrOperators, truth) -> tuple[float, int]:
    """Best PSNR among cubic upsamplings of the individual stacks."""
    ys = [np.asarray(getattr(s, "data", s), dtype=float) for s in stacks]
    vals = [psnr(upsample_stack(y, op), truth) for y, op in zip(ys, ops.stacks)]
    i = int(np.argmax(vals))
    return vals[i], i
