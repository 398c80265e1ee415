"""Evaluation: signal MAE, ROI statistics and ground-truth map comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ivim
from .volume import ScalarVolume

PARAMS = ("f", "d", "ds")

# Leading report columns, in order; extra keys follow.
REPORT_COLUMNS = (
    "subject", "method", "correction",
    "mean_f", "mean_d", "mean_ds",
    "std_f", "std_d", "std_ds",
    "mae",
)


def voxel_mae(y, bvalues, f, d, ds, y0) -> np.ndarray:
    """Mean over b-values of ``|y - y0 * shape(b)|`` for each row of ``y``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 0:
        return np.zeros(0)
    b = np.asarray(bvalues, dtype=float)
    pred = np.asarray(y0)[:, None] * ivim.shape(b[None, :], np.asarray(f)[:, None],
                                                 np.asarray(d)[:, None], np.asarray(ds)[:, None])
    return np.abs(y - pred).mean(axis=1)


def mae(series, maps, mask) -> tuple[ScalarVolume, float]:
    """Per-voxel MAE volume and its mean over ``mask``.

    The amplitude used for each voxel is whatever ``maps.y0_map`` holds.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("MAE over an empty mask is undefined")
    if mask.shape != series.geometry.dims:
        raise ValueError("mask and series geometry differ")
    arr = series.as_array()[mask]
    vals = voxel_mae(arr, series.bvalues, maps.get("f")[mask], maps.get("d")[mask],
                     maps.get("ds")[mask], maps.get("y0")[mask])
    out = np.zeros(series.geometry.dims)
    out[mask] = vals
    return ScalarVolume(series.geometry, out), float(vals.mean())


@dataclass
class RoiReport:
    mean: dict
    std: dict
    median: dict
    mae_mean: float
    mae_median: float
    slices: list
    flags: list = field(default_factory=list)

    def row(self) -> dict:
        out = {f"mean_{p}": self.mean[p] for p in PARAMS}
        out.update({f"std_{p}": self.std[p] for p in PARAMS})
        out["mae"] = self.mae_mean
        out["mae_median"] = self.mae_median
        out.update({f"median_{p}": self.median[p] for p in PARAMS})
        return out


def select_slices(mask, half_width: int = 3) -> tuple[list, list]:
    """Centre-of-mass ROI slice and ``half_width`` neighbours holding ROI voxels."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=(0, 1))
    if counts.sum() == 0:
        raise ValueError("mask is empty")
    z = np.arange(mask.shape[2])
    centre = int(np.floor((counts * z).sum() / counts.sum() + 0.5))
    picked = [k for k in range(centre - half_width, centre + half_width + 1)
              if 0 <= k < mask.shape[2] and counts[k] > 0]
    flags = []
    if len(picked) < 2 * half_width + 1:
        flags.append(f"only {len(picked)} ROI slices available")
    return picked, flags


def roi_report(maps, mask, half_width: int = 3) -> RoiReport:
    """ROI statistics over the central slices.

    Means and standard deviations pool every ROI voxel of the selected slices;
    medians are per-slice medians aggregated by a median over slices.
    """
    mask = np.asarray(mask, dtype=bool)
    slices, flags = select_slices(mask, half_width)
    sel = np.zeros_like(mask)
    sel[:, :, slices] = mask[:, :, slices]
    mae_map = maps.get("mae")
    mean, std, median = {}, {}, {}
    for p in PARAMS:
        m = maps.get(p)
        mean[p] = float(m[sel].mean())
        std[p] = float(m[sel].std())
        median[p] = float(np.median([np.median(m[:, :, z][mask[:, :, z]]) for z in slices]))
    mae_median = float(np.median([np.median(mae_map[:, :, z][mask[:, :, z]]) for z in slices]))
    return RoiReport(mean, std, median, float(mae_map[sel].mean()), mae_median, slices, flags)


def compare_maps(est, gt) -> dict:
    """RMSE, bias and mean relative error of each parameter, in and out of the ROI.

    ``gt`` is a :class:`~placivim.phantom.GroundTruth` sampled on the same grid.
    Outside-ROI statistics only use voxels the estimate covers.
    """
    roi = np.asarray(gt.roi_mask, dtype=bool)
    if roi.shape != est.mask.shape:
        raise ValueError("estimate and ground truth grids differ")
    out = {}
    for p in PARAMS:
        e = est.get(p)
        t = np.asarray(gt.param_maps[p], dtype=float)
        regions = {"roi": roi & est.mask, "outside": (~roi) & est.mask}
        out[p] = {}
        for name, sel in regions.items():
            if not sel.any():
                out[p][name] = {"rmse": float("nan"), "bias": float("nan"), "rel_error": float("nan")}
                continue
            err = e[sel] - t[sel]
            out[p][name] = {
                "rmse": float(np.sqrt(np.mean(err ** 2))),
                "bias": float(np.mean(err)),
                "rel_error": float(np.mean(np.abs(err) / np.abs(t[sel]))),
            }
    return out


def write_report_csv(path, rows: list[dict]) -> Path:
    """One row per subject x method x correction state; the fixed columns come first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = []
    for r in rows:
        extra += [k for k in r if k not in REPORT_COLUMNS and k not in extra]
    cols = list(REPORT_COLUMNS) + extra
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
