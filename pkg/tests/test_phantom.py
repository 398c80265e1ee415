import numpy as np
import pytest

from placivim import ivim, phantom, srr
from placivim.ivim import IvimDomainError, IvimParams
from placivim.phantom import PhantomSpec, make_anatomy, make_ivim_series, make_lr_stacks
from placivim.volume import GeometryError, ScalarVolume, VolumeGeometry

# 0.18 exp(-68) + 0.82 exp(-1.9), evaluated with 40-digit decimal arithmetic
ROI_SHAPE_B1000 = 0.1226462677625607431656298966655913630973

SMALL_HR = VolumeGeometry((30, 30, 24), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))


def _small(**kw):
    base = dict(hr_geometry=SMALL_HR, roi_center=(15.0, 15.0, 12.0), roi_radii=(9.0, 7.0, 8.0))
    base.update(kw)
    return PhantomSpec(**base)


def test_untextured_anatomy_has_two_levels():
    anat, gt = make_anatomy(_small(texture_amplitude=0.0))
    assert set(np.unique(anat.data)) == {120.0, 200.0}
    np.testing.assert_array_equal(anat.data == 200.0, gt.roi_mask)


def test_anatomy_deterministic():
    a1, _ = make_anatomy(_small(seed=5))
    a2, _ = make_anatomy(_small(seed=5))
    a3, _ = make_anatomy(_small(seed=6))
    np.testing.assert_array_equal(a1.data, a2.data)
    assert not np.array_equal(a1.data, a3.data)


def test_roi_volume_matches_ellipsoid():
    spec = PhantomSpec()
    _, gt = make_anatomy(spec)
    analytic = 4.0 / 3.0 * np.pi * np.prod(spec.roi_radii)
    assert abs(gt.roi_mask.sum() - analytic) / analytic < 0.02


def test_roi_outside_fov_rejected():
    with pytest.raises(GeometryError):
        make_anatomy(_small(roi_center=(3.0, 15.0, 12.0)))


@pytest.mark.parametrize("bad", [dict(roi_radii=(0.0, 5.0, 5.0)), dict(noise_sigma=-1.0),
                                 dict(motion_amplitude=-0.5)])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        _small(**bad).validate()


def test_physical_ordering_enforced():
    with pytest.raises(IvimDomainError):
        _small(roi_params=IvimParams(0.2, 0.01, 0.005)).validate()
    with pytest.raises(IvimDomainError):
        _small(roi_params=IvimParams(1.3, 0.001, 0.05)).validate()


def test_spec_dict_round_trip():
    spec = _small(seed=9, noise_sigma=2.5)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"not_a_field": 1})


# ---------------------------------------------------------------------------
# Stacks
# ---------------------------------------------------------------------------

def test_identity_stack_equals_hr():
    anat, _ = make_anatomy(_small())
    stacks, _ = make_lr_stacks(anat, [SMALL_HR], ["axial"], blur=False)
    np.testing.assert_allclose(stacks[0].data, anat.data, atol=1e-12)


def test_constant_hr_gives_constant_stacks():
    hr = ScalarVolume(SMALL_HR, np.full(SMALL_HR.dims, 42.0))
    geoms, names = phantom.default_stack_geometries(SMALL_HR)
    stacks, _ = make_lr_stacks(hr, geoms, names)
    for s in stacks:
        np.testing.assert_allclose(s.data, 42.0, atol=1e-11)


def test_stacks_identical_to_srr_forward():
    anat, _ = make_anatomy(_small())
    geoms, names = phantom.default_stack_geometries(SMALL_HR)
    stacks, ops = make_lr_stacks(anat, geoms, names)
    for i, s in enumerate(stacks):
        np.testing.assert_array_equal(s.data, srr.apply_forward(ops, i, anat).data)


def test_default_stack_geometry():
    geoms, names = phantom.default_stack_geometries()
    assert names == ["axial", "coronal", "sagittal"]
    assert geoms[0].dims == (84, 84, 10)
    for g in geoms:
        assert g.spacing == (0.89, 0.89, 5.0)


# ---------------------------------------------------------------------------
# IVIM series
# ---------------------------------------------------------------------------

def _clean_series(**kw):
    spec = _small(noise_sigma=0.0, motion_amplitude=0.0, **kw)
    _, gt_hr = make_anatomy(spec)
    return make_ivim_series(gt_hr, spec=spec)


def test_b0_equals_y0_map():
    series, gt = _clean_series()
    np.testing.assert_allclose(series.volumes[0].data, gt.y0_map.data, rtol=1e-15)


def test_zero_f_gives_mono_exponential():
    series, gt = _clean_series(roi_params=IvimParams(0.0, 0.0019, 0.068),
                               background_params=IvimParams(0.0, 0.0012, 0.03))
    for b, v in zip(series.bvalues, series.volumes):
        np.testing.assert_allclose(v.data, gt.y0_map.data * np.exp(-b * gt.param_maps["d"]), rtol=1e-13)


def test_roi_signal_at_b1000():
    series, gt = _clean_series(texture_amplitude=0.0)
    i = list(series.bvalues).index(1000.0)
    roi = gt.roi_mask
    np.testing.assert_allclose(series.volumes[i].data[roi], 100.0 * ROI_SHAPE_B1000, rtol=1e-14)


def test_default_ivim_geometry():
    g = phantom.default_ivim_geometry()
    assert g.dims == (48, 48, 9)
    assert g.spacing == (1.5625, 1.5625, 5.0)
    assert g.slice_gap == 1.0


def test_default_snr_is_twenty():
    spec = PhantomSpec()
    assert spec.roi_y0 / spec.sigma == pytest.approx(20.0)


def test_series_deterministic_and_fields_recorded(default_dataset):
    spec = default_dataset.spec
    _, gt_hr = make_anatomy(spec)
    again, gt = make_ivim_series(gt_hr, spec=spec)
    np.testing.assert_array_equal(again.as_array(), default_dataset.series.as_array())
    nb = len(ivim.DEFAULT_BVALUES)
    assert len(gt.applied_fields) == nb
    for row in gt.applied_fields:
        assert len(row) == gt.geometry.dims[2]
        peak = max(np.sqrt((f.vectors ** 2).sum(axis=0)).max() for f in row)
        assert peak == pytest.approx(spec.motion_amplitude)


def test_bad_bvalues_rejected():
    spec = _small()
    _, gt_hr = make_anatomy(spec)
    with pytest.raises(ValueError):
        make_ivim_series(gt_hr, [10.0, 0.0], spec=spec)
    with pytest.raises(ValueError):
        make_ivim_series(gt_hr, [5.0, 10.0], spec=spec)


def test_random_field_amplitude_and_zero():
    rng = np.random.default_rng(0)
    f = phantom.random_field((20, 16), 2.0, 5, rng)
    assert np.sqrt((f.vectors ** 2).sum(axis=0)).max() == pytest.approx(2.0)
    assert np.all(phantom.random_field((4, 4), 0.0, 5, rng).vectors == 0)


def test_reference_fields_compose_with_applied_motion():
    # pulling back through r then the applied warp d_i must land where d_0 lands
    spec = _small(noise_sigma=0.0, motion_amplitude=1.5)
    _, gt_hr = make_anatomy(spec)
    _, gt = make_ivim_series(gt_hr, spec=spec)
    from placivim.volume import _bilinear

    nx, ny, _ = gt.geometry.dims
    X, Y = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    z = gt.geometry.dims[2] // 2
    d0 = gt.applied_fields[0][z].vectors
    for i in (1, 5):
        r = phantom.interb_field_truth(gt, i, z)
        di = gt.applied_fields[i][z].vectors
        lands = r + np.stack([_bilinear(di[c], X + r[0], Y + r[1]) for c in range(2)])
        np.testing.assert_allclose(lands, d0, atol=1e-10)
    r = phantom.coreg_field_truth(gt, z)
    lands = r + np.stack([_bilinear(d0[c], X + r[0], Y + r[1]) for c in range(2)])
    np.testing.assert_allclose(lands, 0.0, atol=1e-10)


def test_save_dataset_manifest(tmp_path):
    spec = _small()
    ds = phantom.make_dataset(spec)
    path = phantom.save_dataset(ds, tmp_path)
    import json

    m = json.loads(path.read_text())
    assert m["bvalues"] == list(ivim.DEFAULT_BVALUES)
    for name in m["files"]["series"] + m["files"]["stacks"]:
        assert (tmp_path / name).exists()
