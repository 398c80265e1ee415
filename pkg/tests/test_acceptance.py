"""End-to-end acceptance checks.

Each test records one PASS/FAIL line through ``record``; the lines are
printed together in the terminal summary (see conftest.py).  Thresholds are
the stated ones; nothing here is tuned to make a check pass.
"""
import json
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from placivim import cli, ivim, phantom, pipeline, registration, sampler, srr
from placivim.ivim import DEFAULT_BVALUES, TransformedParams
from placivim.registration import RegConfig, register_pair, registration_objective
from placivim.volume import warp

from conftest import record, smooth_texture
from test_ivim import quadrature_log_evidence
from test_registration import _fd_check
from test_sampler import _check_moments, _ensemble

B = np.array(DEFAULT_BVALUES)
SEEDS = (0, 1, 2, 3, 4)
ARTIFACTS = Path(os.environ.get("PLACIVIM_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts"))


def check(n, ok, detail):
    record(n, bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _threads():
    return max(1, min(4, os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# Shared default-phantom pipeline runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs, seconds = {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in SEEDS:
            t0 = time.perf_counter()
            cfg = pipeline.PipelineConfig(out_dir=str(root / f"seed{seed}"), seed=seed, threads=_threads(),
                                          methods=["pcn"])
            runs[seed] = pipeline.run_pipeline(cfg)["rows"]
            seconds[seed] = time.perf_counter() - t0
    return root, runs, seconds


def _row(rows, method, state):
    return next(r for r in rows if r["method"] == method and r["correction"] == f"{state} registration")


def test_criterion_01_motion_correction_benefit(pipeline_runs):
    _, runs, seconds = pipeline_runs
    before = np.mean([_row(runs[s], "pcn", "without")["mae"] for s in SEEDS])
    after = np.mean([_row(runs[s], "pcn", "with")["mae"] for s in SEEDS])
    reduction = 100 * (before - after) / before
    total = sum(seconds.values())
    check(1, reduction >= 15 and total < 600,
          f"pCN ROI MAE {before:.3f} -> {after:.3f} ({reduction:.1f}% lower, need >= 15%), "
          f"5 seeds in {total:.0f} s (need < 600 s)")


def test_criterion_02_pcn_matches_rw(pipeline_runs):
    root, _, _ = pipeline_runs
    cfg = pipeline.PipelineConfig(out_dir=str(root / "seed0"), seed=0, threads=_threads(), methods=["pcn", "rw"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = pipeline.run_pipeline(cfg)["rows"]
    pcn, rw = _row(rows, "pcn", "with"), _row(rows, "rw", "with")
    truth = phantom.PhantomSpec().roi_params
    parts, ok = [], True
    for p in ("f", "d", "ds"):
        a, b, t = pcn[f"median_{p}"], rw[f"median_{p}"], getattr(truth, p)
        agree = abs(a - b) / abs(b)
        ea, eb = abs(a - t) / t, abs(b - t) / t
        ok &= agree <= 0.05 and ea <= 0.10 and eb <= 0.10
        parts.append(f"{p}: pcn {a:.4g} rw {b:.4g} truth {t:.4g} (gap {100 * agree:.1f}%, "
                     f"errors {100 * ea:.1f}% / {100 * eb:.1f}%)")
    check(2, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# Benchmark and estimator ordering
# ---------------------------------------------------------------------------

def test_criterion_03_speedup():
    out = ARTIFACTS / "bench"
    rc = cli.main(["bench", "--voxels", "10000", "--iters", "5000", "--seed", "0", "--threads", "1",
                   "--out", str(out)])
    assert rc == 0
    row = json.loads((out / "bench.json").read_text())["rows"][0]
    red = row["reduction_percent"]
    check(3, red is not None and red >= 20 and (out / "bench.csv").exists(),
          f"rw {row['rw_seconds']:.1f} s, pCN {row['pcn_seconds']:.1f} s, reduction "
          f"{pipeline.format_reduction(red)} (need >= 20%), archived at {out}")


def test_criterion_04_lsq_noisier_than_pcn():
    stds = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in SEEDS:
            spec = phantom.PhantomSpec(motion_amplitude=0.0, seed=seed)
            _, gt_hr = phantom.make_anatomy(spec)
            series, gt = phantom.make_ivim_series(gt_hr, spec=spec)
            roi = gt.roi_mask
            lsq = sampler.fit_volume(series, roi, "lsq", sampler.ChainConfig(seed=seed), threads=_threads())
            pcn = sampler.fit_volume(series, roi, "pcn", sampler.ChainConfig(seed=seed), threads=_threads())
            stds.append((lsq.get("f")[roi].std(), pcn.get("f")[roi].std()))
    ok = all(a > b for a, b in stds)
    check(4, ok, "std f in ROI, lsq vs pcn per seed: " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in stds))


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def test_criterion_05_likelihood_quadrature():
    worst = 0.0
    cases = 0
    for n_b in (5, 11):
        rng = np.random.default_rng(500 + n_b)
        b = np.sort(rng.uniform(0, 1000, n_b)) if n_b != 11 else B.copy()
        b[0] = 0.0
        for _ in range(50):
            t = TransformedParams(rng.uniform(-3, 1), np.log(rng.uniform(5e-4, 3e-3)),
                                  np.log(rng.uniform(0.01, 0.2)))
            y = rng.uniform(20, 150) * ivim.shape(b, rng.uniform(0.05, 0.4), rng.uniform(5e-4, 3e-3),
                                                  rng.uniform(0.01, 0.2)) + rng.normal(0, 3, n_b)
            closed = ivim.log_marginal_likelihood(y, b, t) + ivim.marginal_loglik_constant(n_b)
            oracle = quadrature_log_evidence(y, b, t)
            worst = max(worst, abs(closed - oracle) / abs(oracle))
            cases += 1
    check(5, cases == 100 and worst < 1e-6, f"{cases} cases, worst relative gap {worst:.2e} (need < 1e-6)")


def test_criterion_06_sampler_oracle():
    m = np.array([-1.5, -6.3, -2.7])
    C = np.array([0.01, 0.01, 0.05])
    prior = _ensemble(sampler.constant_loglik, m, C, 0.5, seed=60, start=m + 0.3)
    prior_ok = True
    try:
        _check_moments(prior, m, C, 4)
    except AssertionError:
        prior_ok = False

    mc, Cc = np.array([0.0, 1.0, -2.0]), np.array([1.0, 0.5, 2.0])
    target, s2 = np.array([1.5, -0.5, 0.0]), np.array([0.5, 0.25, 1.0])
    post_var = 1.0 / (1.0 / Cc + 1.0 / s2)
    post_mean = post_var * (mc / Cc + target / s2)
    post = _ensemble(lambda th: -0.5 * np.sum((th - target) ** 2 / s2, axis=1), mc, Cc, 0.5, seed=61, start=mc)
    post_ok = True
    try:
        _check_moments(post, post_mean, post_var, 3)
    except AssertionError:
        post_ok = False
    draws = prior.mean_t.shape[0] * 2000
    check(6, prior_ok and post_ok,
          f"{draws} draws; reference Gaussian within 4 SE: {prior_ok}; conjugate posterior within 3 SE: {post_ok}")


def test_criterion_07_registration_oracle():
    n = 48
    rng = np.random.default_rng(70)
    errs, never_above = [], True
    for case, amp in enumerate((1.0, 2.0, 3.0, 2.5, 1.5)):
        img = smooth_texture((n, n), 1.5, 700 + case)
        true = phantom.random_field((n, n), amp, 4, rng)
        fixed = warp(img, true)
        res = register_pair(img, fixed, RegConfig(), iters=100)
        inside = np.zeros((n, n), bool)
        inside[6:-6, 6:-6] = True          # textured interior away from the clamped border
        err = res.field.vectors - true.vectors
        errs.append(float(np.sqrt((err ** 2).sum(axis=0)[inside].mean())))
        zero = registration_objective(img, fixed, RegConfig().grid_dims, RegConfig().lambda2,
                                      RegConfig().lcc_window)(np.zeros((2, *RegConfig().grid_dims)))[0]
        never_above &= res.objective <= zero
    check(7, max(errs) < 0.5 and never_above,
          "dense-field RMS per case " + ", ".join(f"{e:.3f}" for e in errs)
          + f" (need < 0.5); objective <= zero-grid value: {never_above}")


def test_criterion_08_srr_oracle(default_dataset):
    ds = default_dataset
    rng = np.random.default_rng(80)
    worst = 0.0
    for op in ds.ops.stacks:
        x = rng.standard_normal(op.hr_geometry.dims)
        y = rng.standard_normal(op.lr_geometry.dims)
        lhs = float((op.forward(x) * y).sum())
        rhs = float((x * op.adjoint(y)).sum())
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", srr.SrrWarning)
        res = srr.srr_reconstruct(ds.stacks, ds.ops, srr.SrrConfig())
    best, idx = srr.best_single_stack_psnr(ds.stacks, ds.ops, ds.anatomy)
    gain = srr.psnr(res.volume, ds.anatomy) - best
    obj = np.array(res.objective[5:])
    monotone = bool(np.all(np.diff(obj) <= 1e-12 * np.abs(obj[:-1])))
    check(8, worst < 1e-10 and gain >= 3.0 and monotone,
          f"dot-test gap {worst:.1e}; PSNR gain {gain:.2f} dB over stack {idx} (need >= 3); "
          f"monotone after 5 iterations: {monotone}")


def test_criterion_09_gradient_suite():
    rng = np.random.default_rng(90)
    worst = {}

    w = 0.0
    for _ in range(50):
        a = rng.standard_normal((10, 10))
        b = a + rng.standard_normal((10, 10))
        _, g = registration.lcc(a, b, window=5)
        w = max(w, _fd_check(lambda x: registration.lcc(a, x, window=5, with_grad=False), b, g, rng))
    worst["LCC"] = w

    w = 0.0
    for _ in range(50):
        k = rng.standard_normal((2, 5, 5))
        _, g = registration.tv_iso(k)
        w = max(w, _fd_check(lambda x: registration.tv_iso(x)[0], k, g, rng))
    worst["TV"] = w

    w = 0.0
    for _ in range(50):
        x = rng.standard_normal((5, 5, 5))
        beta = rng.uniform(0.1, 3.0)
        _, g = srr.beltrami(x, beta)
        w = max(w, _fd_check(lambda v: srr.beltrami(v, beta)[0], x, g, rng, n_dirs=20))
    worst["Beltrami"] = w

    w = 0.0
    for _ in range(50):
        q = np.array([[rng.uniform(-3, 2), np.log(rng.uniform(5e-4, 3e-3)),
                       np.log(rng.uniform(0.01, 0.3)), np.log(rng.uniform(10, 200))]])
        _, J = ivim.model_and_jacobian(B, q)
        for k in range(4):
            h = 1e-6 * max(1.0, abs(q[0, k]))
            e = np.zeros_like(q)
            e[0, k] = h
            fd = (ivim.model_and_jacobian(B, q + e)[0] - ivim.model_and_jacobian(B, q - e)[0]) / (2 * h)
            w = max(w, np.abs(fd[0] - J[0, :, k]).max() / np.abs(J[0, :, k]).max())
    worst["LM Jacobian"] = w

    check(9, max(worst.values()) < 1e-5,
          "worst relative FD error over 50 trials: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------

def test_criterion_10_thread_count_determinism(tmp_path):
    from test_pipeline import FAST, SMALL_PHANTOM

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**FAST, "phantom": SMALL_PHANTOM, "methods": ["lsq", "seg", "pcn", "rw"]}))
    for t in (1, 2):
        assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / f"t{t}"), "--seed", "7",
                         "--threads", str(t)]) == 0
    a, b = tmp_path / "t1", tmp_path / "t2"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".raw", ".csv"))
    maps = [f for f in files if f.parts[0] == "fit" and f.name.startswith("map_")]
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    ok = len({f.parts[1] for f in maps}) == 8 and len(same) == len(files)
    differing = sorted(set(map(str, files)) - set(map(str, same)))
    check(10, ok, f"{len(same)}/{len(files)} map, field and report files bit-identical between "
                  f"--threads 1 and 2" + (f"; differing: {differing[:5]}" if differing else ""))
