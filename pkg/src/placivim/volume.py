"""Volume geometry, separable resampling, 2D displacement fields and warping.

Volumes are axis-aligned: a voxel ``(i, j, k)`` has its centre at
``origin + (i, j, k) * effective_spacing`` where the through-plane effective
spacing folds the slice gap into the slice thickness.  Arrays are stored in
memory with shape ``(nx, ny, nz)``; on disk the x index runs fastest.

Out-of-range samples are clamped to the nearest edge value for every
interpolator in this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid or mutually incompatible volume geometries."""


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    slice_gap: float = 0.0

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("dims, spacing and origin must be triples")
        if min(dims) < 1:
            raise GeometryError(f"all dims must be >= 1, got {dims}")
        if min(spacing) <= 0 or not np.all(np.isfinite(spacing)):
            raise GeometryError(f"all spacings must be > 0, got {spacing}")
        if self.slice_gap < 0:
            raise GeometryError(f"slice gap must be >= 0, got {self.slice_gap}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "slice_gap", float(self.slice_gap))

    @property
    def effective_spacing(self) -> tuple[float, float, float]:
        """Centre-to-centre distances; slice thickness plus gap through-plane."""
        sx, sy, sz = self.spacing
        return (sx, sy, sz + self.slice_gap)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical centre coordinates (mm) along one axis."""
        return self.origin[axis] + np.arange(self.dims[axis]) * self.effective_spacing[axis]

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "origin_mm": list(self.origin),
            "slice_gap_mm": self.slice_gap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeGeometry":
        return cls(
            dims=tuple(d["dims"]),
            spacing=tuple(d["spacing_mm"]),
            origin=tuple(d.get("origin_mm", (0.0, 0.0, 0.0))),
            slice_gap=d.get("slice_gap_mm", 0.0),
        )


@dataclass
class ScalarVolume:
    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size != self.geometry.n_voxels:
            raise GeometryError(
                f"data has {data.size} values, geometry needs {self.geometry.n_voxels}"
            )
        data = data.reshape(self.geometry.dims)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        self.data = data

    def copy(self) -> "ScalarVolume":
        return ScalarVolume(self.geometry, self.data.copy())


@dataclass
class DisplacementField2D:
    """Per-pixel pull-back displacement ``(u, v)`` in voxel units, shape (2, nx, ny)."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 3 or vectors.shape[0] != 2:
            raise ValueError(f"vectors must have shape (2, nx, ny), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("displacement field must be finite")
        self.vectors = vectors

    @property
    def dims(self) -> tuple[int, int]:
        return self.vectors.shape[1], self.vectors.shape[2]

    @classmethod
    def zeros(cls, dims) -> "DisplacementField2D":
        return cls(np.zeros((2, *dims)))


@dataclass
class ControlGrid2D:
    """Control-node displacements ``(u, v)`` in voxel units, shape (2, gx, gy).

    Nodes are spread evenly so that the first and last nodes sit on the first
    and last pixel centres of whatever image the grid is densified onto.
    """

    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=float)
        if coefficients.ndim != 3 or coefficients.shape[0] != 2:
            raise ValueError(f"coefficients must have shape (2, gx, gy), got {coefficients.shape}")
        if min(coefficients.shape[1:]) < 2:
            raise ValueError("control grid needs at least 2x2 nodes")
        if not np.all(np.isfinite(coefficients)):
            raise ValueError("control grid must be finite")
        self.coefficients = coefficients

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.coefficients.shape[1], self.coefficients.shape[2]

    @classmethod
    def zeros(cls, grid_dims) -> "ControlGrid2D":
        return cls(np.zeros((2, *grid_dims)))


# ---------------------------------------------------------------------------
# 1D interpolation matrices
# ---------------------------------------------------------------------------

def linear_weights(n_src: int, positions: np.ndarray) -> np.ndarray:
    """Dense ``(len(positions), n_src)`` linear-interpolation matrix.

    ``positions`` are continuous source indices; clamp-to-edge outside.
    """
    pos = np.clip(np.asarray(positions, dtype=float), 0.0, n_src - 1)
    W = np.zeros((pos.size, n_src))
    if n_src == 1:
        W[:, 0] = 1.0
        return W
    i0 = np.minimum(np.floor(pos).astype(int), n_src - 2)
    t = pos - i0
    rows = np.arange(pos.size)
    W[rows, i0] = 1.0 - t
    W[rows, i0 + 1] += t
    return W


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Weights for taps at offsets -1, 0, 1, 2 given fractional position t."""
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ],
        axis=-1,
    )


def cubic_weights(n_src: int, positions: np.ndarray) -> np.ndarray:
    """Dense Catmull-Rom interpolation matrix with clamp-to-edge taps."""
    pos = np.clip(np.asarray(positions, dtype=float), 0.0, n_src - 1)
    W = np.zeros((pos.size, n_src))
    i0 = np.floor(pos).astype(int)
    t = pos - i0
    taps = _catmull_rom(t)
    rows = np.arange(pos.size)
    for offset in range(4):
        idx = np.clip(i0 + offset - 1, 0, n_src - 1)
        np.add.at(W, (rows, idx), taps[:, offset])
    return W


def apply_along_axis(data: np.ndarray, W: np.ndarray, axis: int) -> np.ndarray:
    """Contract matrix ``W`` (n_out, n_in) with ``data`` along ``axis``."""
    return np.moveaxis(np.tensordot(W, data, axes=(1, axis)), 0, axis)


def _resample(vol: ScalarVolume, target: VolumeGeometry, weights) -> ScalarVolume:
    if not isinstance(target, VolumeGeometry):
        raise GeometryError("target must be a VolumeGeometry")
    src = vol.geometry
    out = np.asarray(vol.data, dtype=float)
    for axis in range(3):
        pos = (target.axis_coords(axis) - src.origin[axis]) / src.effective_spacing[axis]
        out = apply_along_axis(out, weights(src.dims[axis], pos), axis)
    return ScalarVolume(target, out)


def resample_linear(vol: ScalarVolume, target: VolumeGeometry) -> ScalarVolume:
    """Trilinear resampling of ``vol`` onto the voxel centres of ``target``."""
    return _resample(vol, target, linear_weights)


def resample_cubic(vol: ScalarVolume, target: VolumeGeometry) -> ScalarVolume:
    """Separable Catmull-Rom resampling of ``vol`` onto ``target``."""
    return _resample(vol, target, cubic_weights)


# ---------------------------------------------------------------------------
# Control grids and warping
# ---------------------------------------------------------------------------

def node_positions(n_nodes: int, n_pixels: int) -> np.ndarray:
    """Pixel-index positions of evenly spread control nodes."""
    return np.linspace(0.0, n_pixels - 1, n_nodes)


def densify_matrices(grid_dims, image_dims) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear node-to-pixel matrices ``(Px, Py)``: field = Px @ k @ Py.T."""
    gx, gy = grid_dims
    nx, ny = image_dims
    if nx < 1 or ny < 1:
        raise ValueError(f"image dims must be >= 1, got {image_dims}")
    if gx < 2 or gy < 2:
        raise ValueError("control grid needs at least 2x2 nodes")
    # pixel p sits at continuous node index p * (g - 1) / (n - 1)
    px = np.arange(nx) * (gx - 1) / max(nx - 1, 1)
    py = np.arange(ny) * (gy - 1) / max(ny - 1, 1)
    return linear_weights(gx, px), linear_weights(gy, py)


def densify(grid: ControlGrid2D, image_dims) -> DisplacementField2D:
    """Bilinear (first-order B-spline) interpolation of node displacements."""
    Px, Py = densify_matrices(grid.grid_dims, image_dims)
    k = grid.coefficients
    return DisplacementField2D(np.stack([Px @ k[c] @ Py.T for c in range(2)]))


def densify_adjoint(field_grad: np.ndarray, grid_dims) -> np.ndarray:
    """Adjoint of :func:`densify` applied to a (2, nx, ny) array."""
    Px, Py = densify_matrices(grid_dims, field_grad.shape[1:])
    return np.stack([Px.T @ field_grad[c] @ Py for c in range(2)])


def _bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray, with_grad: bool = False):
    nx, ny = image.shape
    xc = np.clip(x, 0.0, nx - 1)
    yc = np.clip(y, 0.0, ny - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(nx - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(ny - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    tx = xc - x0
    ty = yc - y0
    i00 = image[x0, y0]
    i10 = image[x1, y0]
    i01 = image[x0, y1]
    i11 = image[x1, y1]
    out = (1 - tx) * (1 - ty) * i00 + tx * (1 - ty) * i10 + (1 - tx) * ty * i01 + tx * ty * i11
    if not with_grad:
        return out
    inside_x = (x >= 0) & (x <= nx - 1)
    inside_y = (y >= 0) & (y <= ny - 1)
    gx = ((1 - ty) * (i10 - i00) + ty * (i11 - i01)) * inside_x
    gy = ((1 - tx) * (i01 - i00) + tx * (i11 - i10)) * inside_y
    return out, gx, gy


def warp(image: np.ndarray, field: DisplacementField2D, with_grad: bool = False):
    """Pull back ``image`` through ``field``: ``out(p) = image(p + field(p))``.

    With ``with_grad`` also returns the spatial derivatives of the
    interpolant at the displaced positions, shape (2, nx, ny).
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("warp expects a 2D image")
    if tuple(field.dims) != image.shape:
        raise ValueError(f"field dims {field.dims} do not match image {image.shape}")
    nx, ny = image.shape
    ii, jj = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    x = ii + field.vectors[0]
    y = jj + field.vectors[1]
    if with_grad:
        out, gx, gy = _bilinear(image, x, y, with_grad=True)
        return out, np.stack([gx, gy])
    return _bilinear(image, x, y)


# ---------------------------------------------------------------------------
# Canonical on-disk format: JSON header + raw little-endian float32
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def save_volume(path, vol: ScalarVolume, extra: dict | None = None) -> Path:
    """Write ``<stem>.json`` + ``<stem>.raw``; returns the header path."""
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = vol.geometry.to_dict()
    header["dtype"] = "f32le"
    header["raw"] = raw_path.name
    if extra:
        header.update(extra)
    raw = np.asarray(vol.data, dtype="<f4").ravel(order="F")
    raw_path.write_bytes(raw.tobytes())
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return header_path


def load_header(path) -> dict:
    header_path, _ = _paths(path)
    return json.loads(header_path.read_text())


def load_volume(path) -> ScalarVolume:
    header_path, raw_path = _paths(path)
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    geom = VolumeGeometry.from_dict(header)
    raw = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if raw.size != geom.n_voxels:
        raise GeometryError(f"{raw_path} holds {raw.size} values, header needs {geom.n_voxels}")
    data = raw.reshape(geom.dims, order="F").astype(np.float32)
    return ScalarVolume(geom, data)


@dataclass
class BValueSeries:
    """One volume per b-value, all on the same geometry."""

    bvalues: np.ndarray
    volumes: list = field(default_factory=list)

    def __post_init__(self):
        self.bvalues = np.asarray(self.bvalues, dtype=float)
        if len(self.volumes) != self.bvalues.size:
            raise ValueError("need exactly one volume per b-value")
        if self.volumes:
            g = self.volumes[0].geometry
            if any(v.geometry != g for v in self.volumes):
                raise GeometryError("all b-value volumes must share one geometry")

    @property
    def geometry(self) -> VolumeGeometry:
        return self.volumes[0].geometry

    def as_array(self) -> np.ndarray:
        """Signals stacked on a trailing b-value axis, shape (nx, ny, nz, Nb)."""
        return np.stack([np.asarray(v.data, dtype=float) for v in self.volumes], axis=-1)

    @classmethod
    def from_array(cls, bvalues, geometry: VolumeGeometry, arr: np.ndarray) -> "BValueSeries":
        return cls(bvalues, [ScalarVolume(geometry, arr[..., i]) for i in range(arr.shape[-1])])


def field_stack_to_volume(fields: list[DisplacementField2D], geometry: VolumeGeometry) -> ScalarVolume:
    """Pack per-slice fields as a volume with u, v interleaved along z."""
    nx, ny, nz = geometry.dims
    data = np.zeros((nx, ny, 2 * nz))
    for z, f in enumerate(fields):
        data[:, :, 2 * z] = f.vectors[0]
        data[:, :, 2 * z + 1] = f.vectors[1]
    geom = VolumeGeometry((nx, ny, 2 * nz), geometry.spacing, geometry.origin, geometry.slice_gap)
    return ScalarVolume(geom, data)


def volume_to_field_stack(vol: ScalarVolume) -> list[DisplacementField2D]:
    data = np.asarray(vol.data, dtype=float)
    return [
        DisplacementField2D(np.stack([data[:, :, 2 * z], data[:, :, 2 * z + 1]]))
        for z in range(data.shape[2] // 2)
    ]
