import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from placivim import ivim
from placivim.ivim import (
    DEFAULT_BVALUES,
    IvimArrays,
    IvimDomainError,
    IvimParams,
    TransformedParams,
    from_transformed,
    log_marginal_likelihood,
    marginal_loglik_constant,
    segmented_fit,
    segmented_init,
    signal,
    to_transformed,
)

B = np.array(DEFAULT_BVALUES)
ROI = IvimParams(0.18, 0.0019, 0.068, 100.0)

# Values computed once with 40-digit decimal arithmetic.
MONO_B1000 = 13.53352832366126918939994949724844034076     # 100 exp(-2)
LOGIT_01789 = -1.523817914200069607666497904736394920768   # log(0.1789 / 0.8211)


def test_signal_at_zero_b_is_amplitude():
    assert signal(0.0, ROI) == 100.0


def test_signal_mono_exponential_value():
    assert signal(1000.0, IvimParams(0.0, 0.002, 0.02, 100.0)) == pytest.approx(MONO_B1000, rel=1e-14)


def test_signal_f_one_limit():
    p = IvimParams(1.0, 0.002, 0.05, 3.0)
    np.testing.assert_allclose(signal(B, p), 3.0 * np.exp(-B * 0.05), rtol=1e-14)


def test_signal_rejects_invalid_params():
    with pytest.raises(IvimDomainError):
        signal(10.0, IvimParams(1.2, 0.001, 0.01))
    with pytest.raises(IvimDomainError):
        signal(10.0, IvimParams(0.2, -0.001, 0.01))


def test_transform_special_points():
    t = to_transformed(IvimParams(0.5, 1.0, 0.05))
    assert t.F == 0.0 and t.D == 0.0
    assert to_transformed(IvimParams(0.1789, 0.0019, 0.068)).F == pytest.approx(LOGIT_01789, abs=1e-14)


def test_transform_rejects_boundary():
    with pytest.raises(IvimDomainError):
        to_transformed(IvimParams(0.0, 0.001, 0.01))
    with pytest.raises(IvimDomainError):
        to_transformed(IvimParams(1.0, 0.001, 0.01))


@given(st.floats(1e-4, 1 - 1e-4), st.floats(1e-5, 0.5), st.floats(1e-5, 2.0))
@settings(max_examples=100, deadline=None)
def test_transform_round_trip(f, d, ds):
    back = from_transformed(to_transformed(IvimParams(f, d, ds)))
    assert back.f == pytest.approx(f, rel=1e-12, abs=1e-15)
    assert back.d == pytest.approx(d, rel=1e-12)
    assert back.ds == pytest.approx(ds, rel=1e-12)


@given(st.floats(0, 1), st.floats(1e-5, 0.01), st.floats(0.011, 0.5))
@settings(max_examples=100, deadline=None)
def test_signal_non_increasing_in_b(f, d, ds):
    s = signal(np.linspace(0, 1000, 50), IvimParams(f, d, ds, 1.0))
    assert np.all(np.diff(s) <= 1e-15)


# ---------------------------------------------------------------------------
# Marginal likelihood against a brute-force double integral
# ---------------------------------------------------------------------------

def quadrature_log_evidence(y, b, t: TransformedParams) -> float:
    """log of the integral over S0 (flat) and sigma^2 (Jeffreys) of the
    Gaussian likelihood, by nested adaptive quadrature in S0 and u = log sigma^2."""
    g = ivim.shape(b, ivim.expit(t.F), np.exp(t.D), np.exp(t.Ds))
    n = y.size
    gg = g @ g
    s_hat = (y @ g) / gg
    rss = max(y @ y - (y @ g) ** 2 / gg, 1e-300)
    u_peak = np.log(rss / n)
    # reference log value keeps the integrand O(1)
    ref = -0.5 * n * np.log(2 * np.pi) - 0.5 * n * u_peak - 0.5 * n

    def log_integrand(s0, u):
        r = y - s0 * g
        return -0.5 * n * np.log(2 * np.pi) - 0.5 * n * u - (r @ r) / (2 * np.exp(u)) - ref

    def inner(u):
        w = 14.0 * np.sqrt(np.exp(u) / gg)
        val, _ = integrate.quad(lambda s0: np.exp(log_integrand(s0, u)), s_hat - w, s_hat + w,
                                epsabs=0, epsrel=1e-12, limit=200)
        return val

    total, _ = integrate.quad(inner, u_peak - 12, u_peak + 80, epsabs=0, epsrel=1e-11, limit=400)
    return np.log(total) + ref


@pytest.mark.parametrize("n_b", [5, 11])
def test_marginal_likelihood_matches_quadrature(n_b):
    rng = np.random.default_rng(100 + n_b)
    b = np.sort(rng.uniform(0, 1000, n_b))
    b[0] = 0.0
    worst = 0.0
    for _ in range(10):
        t = TransformedParams(rng.uniform(-3, 1), np.log(rng.uniform(5e-4, 3e-3)), np.log(rng.uniform(0.01, 0.2)))
        y = rng.uniform(20, 150) * ivim.shape(b, rng.uniform(0.05, 0.4), rng.uniform(5e-4, 3e-3),
                                              rng.uniform(0.01, 0.2)) + rng.normal(0, 3, n_b)
        closed = log_marginal_likelihood(y, b, t) + marginal_loglik_constant(n_b)
        oracle = quadrature_log_evidence(y, b, t)
        worst = max(worst, abs(closed - oracle) / abs(oracle))
    assert worst < 1e-6


def test_scaling_y_shifts_likelihood_by_constant():
    rng = np.random.default_rng(3)
    y = 100 * ivim.shape(B, 0.2, 0.002, 0.05) + rng.normal(0, 4, B.size)
    shifts = []
    for _ in range(10):
        t = TransformedParams(rng.uniform(-3, 0), np.log(rng.uniform(1e-3, 3e-3)), np.log(rng.uniform(0.02, 0.2)))
        shifts.append(log_marginal_likelihood(3.7 * y, B, t) - log_marginal_likelihood(y, B, t))
    assert np.ptp(shifts) < 1e-10


def test_argmax_over_grid_invariant_to_scale():
    rng = np.random.default_rng(4)
    y = 80 * ivim.shape(B, 0.15, 0.0018, 0.06) + rng.normal(0, 3, B.size)
    grid = [TransformedParams(F, np.log(d), np.log(ds))
            for F in np.linspace(-3, 0, 7) for d in (1e-3, 2e-3, 3e-3) for ds in (0.02, 0.06, 0.15)]
    a = np.argmax([log_marginal_likelihood(y, B, t) for t in grid])
    c = np.argmax([log_marginal_likelihood(0.01 * y, B, t) for t in grid])
    assert a == c


def test_proportional_signal_hits_floor_and_is_maximal():
    t = to_transformed(IvimParams(0.2, 0.002, 0.05))
    y = 90 * ivim.shape(B, 0.2, 0.002, 0.05)
    with pytest.warns(ivim.IvimFitWarning):
        top = log_marginal_likelihood(y, B, t)
    rng = np.random.default_rng(5)
    for _ in range(10):
        other = TransformedParams(t.F + rng.normal(0, 0.3), t.D + rng.normal(0, 0.3), t.Ds + rng.normal(0, 0.3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ivim.IvimFitWarning)
            assert log_marginal_likelihood(y, B, other) < top


def test_likelihood_preconditions():
    t = TransformedParams(0.0, -6.0, -3.0)
    with pytest.raises(ValueError):
        log_marginal_likelihood(np.ones(2), [0, 10], t)
    with pytest.raises(ValueError):
        log_marginal_likelihood(np.zeros(5), [0, 10, 20, 30, 40], t)


# ---------------------------------------------------------------------------
# Segmented fit
# ---------------------------------------------------------------------------

def test_segmented_mono_exponential_exact():
    y = 100 * np.exp(-B * 0.0021)
    p = segmented_init(y, B)
    assert p.d == pytest.approx(0.0021, abs=1e-10)
    assert p.f <= 1e-10


def test_segmented_recovers_roi_params_noiseless():
    p = segmented_init(signal(B, ROI), B, b_threshold=200)
    for name in ("f", "d", "ds"):
        assert getattr(p, name) == pytest.approx(getattr(ROI, name), rel=0.05)


def test_segmented_constant_signal_clamps_d():
    with pytest.warns(ivim.IvimFitWarning):
        p = segmented_init(np.full(B.size, 50.0), B)
    assert p.d == ivim.D_FLOOR
    assert p.ds >= ivim.DS_CLAMP_FACTOR * p.d


def test_segmented_rejects_non_positive():
    y = signal(B, ROI)
    y[-1] = -1.0
    with pytest.raises(IvimDomainError):
        segmented_init(y, B)
    res = segmented_fit(y[None, :], B, floor=1e-3)
    assert res.flag[0]


def test_segmented_ds_clamp_under_noise():
    rng = np.random.default_rng(6)
    y = signal(B, ROI)[None, :] + rng.normal(0, 5, (500, B.size))
    res = segmented_fit(np.maximum(y, 1e-3), B)
    assert np.all(res.ds >= ivim.DS_CLAMP_FACTOR * res.d * (1 - 1e-12))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

def _arrays(p: IvimParams) -> IvimArrays:
    return IvimArrays(np.array([p.f]), np.array([p.d]), np.array([p.ds]), np.array([p.y0]), np.zeros(1, bool))


def test_lm_fixed_point_at_truth():
    y = signal(B, ROI)
    res = ivim.lm_fit(y[None, :], B, _arrays(ROI))
    assert res.sse[0] < 1e-12
    assert res.params.f[0] == pytest.approx(ROI.f, rel=1e-10)


def test_lm_from_segmented_recovers_truth():
    y = signal(B, ROI)
    p = ivim.lsq_fit_lm(y, B, segmented_init(y, B))
    for name in ("f", "d", "ds", "y0"):
        assert getattr(p, name) == pytest.approx(getattr(ROI, name), rel=1e-6)


def test_lm_exactly_determined_four_points():
    b = np.array([0.0, 50.0, 300.0, 800.0])
    truth = IvimParams(0.25, 0.0015, 0.04, 70.0)
    y = signal(b, truth)
    init = IvimParams(0.2, 0.0012, 0.05, 60.0)
    res = ivim.lm_fit(y[None, :], b, _arrays(init), max_iter=500)
    assert res.sse[0] < 1e-12 * (y @ y)


def test_lm_residual_never_increases():
    rng = np.random.default_rng(7)
    y = signal(B, ROI)[None, :] + rng.normal(0, 5, (200, B.size))
    init = segmented_fit(np.maximum(y, 1e-3), B)
    res = ivim.lm_fit(y, B, init, record=True)
    hist = np.array(res.history)
    assert np.all(np.diff(hist, axis=0) <= 1e-12 * hist[:-1])


def test_lm_iteration_limit_flags():
    rng = np.random.default_rng(8)
    y = signal(B, ROI) + rng.normal(0, 5, B.size)
    with pytest.warns(ivim.IvimFitWarning):
        ivim.lsq_fit_lm(y, B, IvimParams(0.9, 0.0005, 0.9, 10.0), max_iter=1)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        q = np.array([[rng.uniform(-3, 2), np.log(rng.uniform(5e-4, 3e-3)),
                       np.log(rng.uniform(0.01, 0.3)), np.log(rng.uniform(10, 200))]])
        _, J = ivim.model_and_jacobian(B, q)
        for k in range(4):
            h = 1e-6 * max(1.0, abs(q[0, k]))
            e = np.zeros_like(q)
            e[0, k] = h
            fd = (ivim.model_and_jacobian(B, q + e)[0] - ivim.model_and_jacobian(B, q - e)[0]) / (2 * h)
            scale = np.abs(J[0, :, k]).max()
            worst = max(worst, np.abs(fd[0] - J[0, :, k]).max() / scale)
    assert worst < 1e-5
