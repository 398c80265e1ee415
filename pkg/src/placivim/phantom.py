"""Synthetic ground truth: an ellipsoidal "placenta" in textured tissue,
thick-slice anatomical stacks, and a motion-corrupted IVIM series.

Random streams are keyed by ``(seed, tag, ...)`` so any slice can be
regenerated on its own and parallel generation is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import ivim, srr
from .volume import (
    BValueSeries,
    DisplacementField2D,
    GeometryError,
    ScalarVolume,
    VolumeGeometry,
    field_stack_to_volume,
    resample_linear,
    save_volume,
    warp,
)

TAG_TEXTURE = 11
TAG_MOTION = 12
TAG_NOISE = 13
TAG_STACK_NOISE = 14
TAG_ZSHIFT = 15
TAG_RADII = 16

HR_GEOMETRY = VolumeGeometry((75, 75, 54), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
IVIM_INPLANE_MM = 1.5625
IVIM_SLICE_MM = 5.0
IVIM_GAP_MM = 1.0
ANAT_INPLANE_MM = 0.89
ANAT_SLICE_MM = 5.0


@dataclass
class PhantomSpec:
    hr_geometry: VolumeGeometry = HR_GEOMETRY
    roi_center: tuple = (37.5, 37.5, 27.0)
    roi_radii: tuple = (26.0, 20.0, 22.0)
    radii_jitter: float = 0.0          # relative, per axis, drawn from the seed
    roi_params: ivim.IvimParams = field(default_factory=lambda: ivim.IvimParams(0.18, 0.0019, 0.068))
    background_params: ivim.IvimParams = field(default_factory=lambda: ivim.IvimParams(0.08, 0.0012, 0.03))
    roi_y0: float = 100.0
    background_y0: float = 70.0
    anat_roi: float = 200.0
    anat_background: float = 120.0
    texture_amplitude: float = 0.2     # relative std of the multiplicative texture
    texture_scale_mm: float = 2.5      # Gaussian correlation length
    noise_sigma: float | None = None   # None: roi_y0 / 20
    anat_noise_sigma: float = 2.0
    motion_amplitude: float = 2.0      # voxels, max vector norm per slice
    motion_smoothness: int = 5         # control nodes per axis of the random warps
    motion_b0: bool = True
    through_plane_mm: float = 0.0      # max random z shift per b-value, 0 = off
    seed: int = 0

    @property
    def sigma(self) -> float:
        return self.roi_y0 / 20.0 if self.noise_sigma is None else float(self.noise_sigma)

    def validate(self) -> "PhantomSpec":
        if min(self.roi_radii) <= 0:
            raise ValueError("ROI radii must be > 0")
        if self.sigma < 0 or self.anat_noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.motion_amplitude < 0 or self.through_plane_mm < 0:
            raise ValueError("motion amplitude must be >= 0")
        if self.motion_smoothness < 2:
            raise ValueError("motion_smoothness must be >= 2")
        if self.texture_amplitude < 0 or self.texture_scale_mm <= 0:
            raise ValueError("bad texture settings")
        for p in (self.roi_params, self.background_params):
            p.validate()
            if not p.ds > p.d:
                raise ivim.IvimDomainError(f"need ds > d, got d={p.d}, ds={p.ds}")
        g = self.hr_geometry
        for a in range(3):
            lo = g.origin[a] - 0.5 * g.spacing[a]
            hi = lo + g.dims[a] * g.effective_spacing[a]
            r = self.roi_radii[a] * (1 + self.radii_jitter)
            if self.roi_center[a] - r < lo or self.roi_center[a] + r > hi:
                raise GeometryError("ROI ellipsoid leaves the field of view")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hr_geometry"] = self.hr_geometry.to_dict()
        d["roi_params"] = asdict(self.roi_params)
        d["background_params"] = asdict(self.background_params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "hr_geometry" in d:
            d["hr_geometry"] = VolumeGeometry.from_dict(d["hr_geometry"])
        for k in ("roi_params", "background_params"):
            if k in d and isinstance(d[k], dict):
                d[k] = ivim.IvimParams(**d[k])
        for k in ("roi_center", "roi_radii"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    geometry: VolumeGeometry
    roi_mask: np.ndarray
    param_maps: dict                 # "f", "d", "ds" -> arrays on geometry
    y0_map: ScalarVolume
    texture: ScalarVolume | None = None
    applied_fields: list = field(default_factory=list)    # [b][z] DisplacementField2D
    z_shifts: list = field(default_factory=list)

    def params_at(self, idx) -> ivim.IvimParams:
        return ivim.IvimParams(*(float(self.param_maps[p][idx]) for p in ("f", "d", "ds")),
                               y0=float(self.y0_map.data[idx]))


def _rng(seed, *keys):
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def roi_radii(spec: PhantomSpec) -> np.ndarray:
    r = np.asarray(spec.roi_radii, dtype=float)
    if spec.radii_jitter > 0:
        r = r * (1 + spec.radii_jitter * _rng(spec.seed, TAG_RADII).uniform(-1, 1, 3))
    return r


def ellipsoid_mask(geometry: VolumeGeometry, center, radii) -> np.ndarray:
    """Voxels whose centres fall inside the ellipsoid."""
    x, y, z = (geometry.axis_coords(a) for a in range(3))
    q = (((x - center[0]) / radii[0]) ** 2)[:, None, None] \
        + (((y - center[1]) / radii[1]) ** 2)[None, :, None] \
        + (((z - center[2]) / radii[2]) ** 2)[None, None, :]
    return q <= 1.0


def make_texture(spec: PhantomSpec) -> ScalarVolume:
    """Unit-variance smooth random field on the high-resolution grid."""
    g = spec.hr_geometry
    noise = _rng(spec.seed, TAG_TEXTURE).standard_normal(g.dims)
    t = gaussian_filter(noise, [spec.texture_scale_mm / s for s in g.effective_spacing], mode="reflect")
    t = (t - t.mean()) / max(t.std(), 1e-300)
    return ScalarVolume(g, t)


def _maps(mask, spec: PhantomSpec):
    out = {}
    for p in ("f", "d", "ds"):
        out[p] = np.where(mask, getattr(spec.roi_params, p), getattr(spec.background_params, p))
    return out


def make_anatomy(spec: PhantomSpec) -> tuple[ScalarVolume, GroundTruth]:
    """High-resolution anatomical volume and its ground truth."""
    spec.validate()
    g = spec.hr_geometry
    mask = ellipsoid_mask(g, spec.roi_center, roi_radii(spec))
    tex = make_texture(spec)
    mod = 1.0 + spec.texture_amplitude * tex.data
    anat = np.where(mask, spec.anat_roi, spec.anat_background) * mod
    y0 = np.where(mask, spec.roi_y0, spec.background_y0) * mod
    gt = GroundTruth(g, mask, _maps(mask, spec), ScalarVolume(g, y0), tex)
    return ScalarVolume(g, anat), gt


def default_stack_geometries(hr: VolumeGeometry = HR_GEOMETRY,
                             inplane=ANAT_INPLANE_MM, thickness=ANAT_SLICE_MM):
    """Axial, coronal and sagittal stacks centred on the high-resolution FoV."""
    lo = [hr.origin[a] - 0.5 * hr.spacing[a] for a in range(3)]
    ext = [hr.dims[a] * hr.effective_spacing[a] for a in range(3)]
    centre = [lo[a] + ext[a] / 2 for a in range(3)]
    geoms, names = [], []
    for name, perm in srr.ORIENTATIONS.items():
        dims, spacing, origin = [], [], []
        for axis, src in enumerate(perm):
            s = thickness if axis == 2 else inplane
            n = max(1, int(np.floor(ext[src] / s + 1e-9)))
            dims.append(n)
            spacing.append(s)
            origin.append(centre[src] - (n - 1) * s / 2)
        geoms.append(VolumeGeometry(tuple(dims), tuple(spacing), tuple(origin)))
        names.append(name)
    return geoms, names


def make_lr_stacks(hr: ScalarVolume, stack_geoms, orientations, noise_sigma: float = 0.0,
                   seed: int = 0, blur: bool = True):
    """Simulate stacks with the reconstruction's own forward operators."""
    ops = srr.build_operators(hr.geometry, stack_geoms, orientations, blur=blur)
    stacks = []
    for i in range(len(ops)):
        s = srr.apply_forward(ops, i, hr)
        if noise_sigma > 0:
            n = _rng(seed, TAG_STACK_NOISE, i).standard_normal(s.geometry.dims)
            s = ScalarVolume(s.geometry, s.data + noise_sigma * n)
        stacks.append(s)
    return stacks, ops


def default_ivim_geometry(hr: VolumeGeometry = HR_GEOMETRY) -> VolumeGeometry:
    """1.5625 mm in-plane, 5 mm slices with 1 mm gaps, covering the FoV."""
    lo = [hr.origin[a] - 0.5 * hr.spacing[a] for a in range(3)]
    ext = [hr.dims[a] * hr.effective_spacing[a] for a in range(3)]
    nx = int(np.floor(ext[0] / IVIM_INPLANE_MM + 1e-9))
    ny = int(np.floor(ext[1] / IVIM_INPLANE_MM + 1e-9))
    step = IVIM_SLICE_MM + IVIM_GAP_MM
    nz = int(np.floor((ext[2] + IVIM_GAP_MM) / step + 1e-9))
    return VolumeGeometry(
        (nx, ny, nz), (IVIM_INPLANE_MM, IVIM_INPLANE_MM, IVIM_SLICE_MM),
        (lo[0] + IVIM_INPLANE_MM / 2, lo[1] + IVIM_INPLANE_MM / 2, lo[2] + IVIM_SLICE_MM / 2),
        IVIM_GAP_MM,
    )


def random_field(dims, amplitude: float, nodes: int, rng) -> DisplacementField2D:
    """Smooth random warp: cubic-spline upsampled node noise, max norm = amplitude."""
    if amplitude == 0:
        return DisplacementField2D.zeros(dims)
    coarse = rng.standard_normal((2, nodes, nodes))
    gx = np.linspace(0, nodes - 1, dims[0])
    gy = np.linspace(0, nodes - 1, dims[1])
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    vec = np.stack([map_coordinates(coarse[c], [X, Y], order=3, mode="nearest") for c in range(2)])
    peak = float(np.sqrt((vec ** 2).sum(axis=0)).max())
    return DisplacementField2D(vec * (amplitude / max(peak, 1e-300)))


def _ivim_truth(gt_hr: GroundTruth, geometry: VolumeGeometry, spec: PhantomSpec, z_shift: float = 0.0):
    g = geometry
    if z_shift:
        g = VolumeGeometry(g.dims, g.spacing, (g.origin[0], g.origin[1], g.origin[2] + z_shift), g.slice_gap)
    mask = ellipsoid_mask(g, spec.roi_center, roi_radii(spec))
    tex = resample_linear(gt_hr.texture, g).data
    y0 = np.where(mask, spec.roi_y0, spec.background_y0) * (1.0 + spec.texture_amplitude * tex)
    return mask, _maps(mask, spec), y0


def clean_signal(bvalue, maps, y0):
    return y0 * ivim.shape(float(bvalue), maps["f"], maps["d"], maps["ds"])


def make_ivim_series(gt_hr: GroundTruth, bvalues=ivim.DEFAULT_BVALUES, geometry: VolumeGeometry | None = None,
                     spec: PhantomSpec | None = None) -> tuple[BValueSeries, GroundTruth]:
    """Noisy, moving IVIM series and its ground truth on ``geometry``.

    Motion is a per-b-value, per-slice smooth in-plane warp applied to the
    clean slice (pull-back), then Gaussian noise is added.
    """
    spec = (spec or PhantomSpec()).validate()
    geometry = geometry or default_ivim_geometry(spec.hr_geometry)
    b = np.asarray(bvalues, dtype=float)
    if b.ndim != 1 or b.size < 1 or b[0] != 0 or np.any(np.diff(b) <= 0):
        raise ValueError("b-values must be strictly ascending and start at 0")
    mask, maps, y0 = _ivim_truth(gt_hr, geometry, spec)
    nx, ny, nz = geometry.dims
    vols, fields, shifts = [], [], []
    for i, bv in enumerate(b):
        shift = 0.0
        if spec.through_plane_mm > 0:
            shift = float(_rng(spec.seed, TAG_ZSHIFT, i).uniform(-1, 1) * spec.through_plane_mm)
        if shift:
            _, m_s, y0_s = _ivim_truth(gt_hr, geometry, spec, shift)
            clean = clean_signal(bv, m_s, y0_s)
        else:
            clean = clean_signal(bv, maps, y0)
        out = np.empty_like(clean)
        row = []
        for z in range(nz):
            amp = spec.motion_amplitude if (i > 0 or spec.motion_b0) else 0.0
            fld = random_field((nx, ny), amp, spec.motion_smoothness, _rng(spec.seed, TAG_MOTION, i, z))
            sl = warp(clean[:, :, z], fld) if amp > 0 else clean[:, :, z]
            if spec.sigma > 0:
                sl = sl + spec.sigma * _rng(spec.seed, TAG_NOISE, i, z).standard_normal((nx, ny))
            out[:, :, z] = sl
            row.append(fld)
        vols.append(ScalarVolume(geometry, out))
        fields.append(row)
        shifts.append(shift)
    gt = GroundTruth(geometry, mask, maps, ScalarVolume(geometry, y0), None, fields, shifts)
    return BValueSeries(tuple(float(v) for v in b), vols), gt


# ---------------------------------------------------------------------------
# Reference fields for registration checks
# ---------------------------------------------------------------------------

def _resample_field(field_vec, x, y):
    from .volume import _bilinear

    return np.stack([_bilinear(field_vec[c], x, y) for c in range(2)])


def _fixed_point(target, d, iters=50):
    """Solve ``r(p) = target(p) - d(p + r(p))`` by fixed-point iteration."""
    nx, ny = d.shape[1:]
    X, Y = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    r = target.copy()
    for _ in range(iters):
        r = target - _resample_field(d, X + r[0], Y + r[1])
    return r


def interb_field_truth(gt: GroundTruth, i: int, z: int) -> np.ndarray:
    """Field that maps the moved b_i slice back onto the moved b0 slice."""
    d_i = gt.applied_fields[i][z].vectors
    d_0 = gt.applied_fields[0][z].vectors
    return _fixed_point(d_0, d_i)


def coreg_field_truth(gt: GroundTruth, z: int) -> np.ndarray:
    """Field that undoes the b0 motion of slice ``z``."""
    d_0 = gt.applied_fields[0][z].vectors
    return _fixed_point(np.zeros_like(d_0), d_0)


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    spec: PhantomSpec
    anatomy: ScalarVolume
    gt_hr: GroundTruth
    stacks: list
    ops: srr.SrrOperators
    orientations: list
    series: BValueSeries
    gt: GroundTruth


def make_dataset(spec: PhantomSpec | None = None, bvalues=ivim.DEFAULT_BVALUES) -> Dataset:
    spec = (spec or PhantomSpec()).validate()
    anat, gt_hr = make_anatomy(spec)
    geoms, names = default_stack_geometries(spec.hr_geometry)
    stacks, ops = make_lr_stacks(anat, geoms, names, spec.anat_noise_sigma, spec.seed)
    series, gt = make_ivim_series(gt_hr, bvalues, default_ivim_geometry(spec.hr_geometry), spec)
    return Dataset(spec, anat, gt_hr, stacks, ops, names, series, gt)


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write every volume plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"anatomy_hr": save_volume(out / "anatomy_hr", ds.anatomy).name}
    files["stacks"] = []
    for name, s in zip(ds.orientations, ds.stacks):
        files["stacks"].append(save_volume(out / f"stack_{name}", s, {"orientation": name}).name)
    files["series"] = [save_volume(out / f"ivim_b{int(b):04d}", v, {"bvalue": b}).name
                       for b, v in zip(ds.series.bvalues, ds.series.volumes)]
    g = ds.gt.geometry
    files["roi_mask"] = save_volume(out / "gt_roi_mask", ScalarVolume(g, ds.gt.roi_mask.astype(float))).name
    files["gt_maps"] = {p: save_volume(out / f"gt_{p}", ScalarVolume(g, ds.gt.param_maps[p])).name
                        for p in ("f", "d", "ds")}
    files["gt_y0"] = save_volume(out / "gt_y0", ds.gt.y0_map).name
    files["gt_fields"] = [save_volume(out / f"gt_field_b{i:02d}", field_stack_to_volume(row, g)).name
                          for i, row in enumerate(ds.gt.applied_fields)]
    manifest = {
        "bvalues": list(ds.series.bvalues),
        "ivim_geometry": g.to_dict(),
        "hr_geometry": ds.anatomy.geometry.to_dict(),
        "stack_geometries": [s.geometry.to_dict() for s in ds.stacks],
        "orientations": list(ds.orientations),
        "z_shifts_mm": list(ds.gt.z_shifts),
        "spec": ds.spec.to_dict(),
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
