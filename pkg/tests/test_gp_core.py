import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from layerjoule.gp_core import (GpError, GpSurface, KernelFamily, KernelSpec, OutOfBoundsError,
                                SingularCovarianceError, cholesky_with_jitter, fit, gram,
                                kernel_eval, log_marginal_likelihood, matern52)

FAMILIES = [KernelSpec(KernelFamily.Matern25, 0.7, 1.3), KernelSpec(KernelFamily.Rbf, 0.4, 2.0),
            KernelSpec(KernelFamily.DotProduct, sigma0_sq=0.5)]


def matern_bessel(r, ls, sv=1.0):
    """General Matern form through the modified Bessel function, at high precision."""
    mpmath.mp.dps = 40
    if r == 0:
        return mpmath.mpf(sv)
    nu = mpmath.mpf(5) / 2
    z = mpmath.sqrt(2 * nu) * mpmath.mpf(r) / mpmath.mpf(ls)
    return sv * 2 ** (1 - nu) / mpmath.gamma(nu) * z ** nu * mpmath.besselk(nu, z)


def test_matern_closed_form_vs_bessel():
    rng = np.random.default_rng(11)
    r = rng.uniform(0.0, 5.0, 20)
    ls = rng.uniform(0.05, 3.0, 20)
    for ri, li in zip(r, ls):
        ref = float(matern_bessel(ri, li))
        got = kernel_eval(KernelSpec(KernelFamily.Matern25, li, 1.0), [0.0], [ri])
        assert abs(got - ref) <= 1e-12 * abs(ref)


def test_matern_point_values():
    spec = KernelSpec(KernelFamily.Matern25, 1.0, 1.0)
    assert kernel_eval(spec, [3.0], [3.0]) == 1.0
    assert kernel_eval(spec, [0.0], [1.0]) == pytest.approx(0.52400, abs=5e-5)
    expected = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
    assert kernel_eval(spec, [0.0], [1.0]) == pytest.approx(expected, rel=1e-14)
    assert matern52(1.0) == pytest.approx(expected, rel=1e-14)


def test_rbf_and_dot_values():
    assert kernel_eval(KernelSpec(KernelFamily.Rbf, 2.0, 3.0), [0.0], [2.0]) == pytest.approx(3 * math.exp(-0.5))
    assert kernel_eval(KernelSpec(KernelFamily.DotProduct, sigma0_sq=0.0), [1, 2], [3, 4]) == 11.0


def test_dimension_mismatch():
    with pytest.raises(GpError):
        kernel_eval(KernelSpec(), [1.0], [1.0, 2.0])


def test_kernel_spec_validation():
    with pytest.raises(GpError):
        KernelSpec(KernelFamily.Matern25, length_scale=0.0)
    with pytest.raises(GpError):
        KernelSpec(signal_variance=-1.0)


points2 = arrays(np.float64, st.tuples(st.integers(1, 64), st.just(2)),
                 elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(points2, st.sampled_from(FAMILIES))
def test_symmetry_and_psd(x, spec):
    K = gram(spec, x)
    assert np.allclose(K, K.T, rtol=0, atol=1e-14 * max(1.0, np.abs(K).max()))
    for i in range(min(3, len(x))):
        j = len(x) - 1 - i
        assert kernel_eval(spec, x[i], x[j]) == kernel_eval(spec, x[j], x[i])
    # PSD: factorization succeeds with 1e-8 jitter
    np.linalg.cholesky(K + 1e-8 * max(1.0, np.abs(K).max()) * np.eye(len(x)))
    assert np.linalg.eigvalsh(K).min() >= -1e-10 * max(1.0, np.abs(K).max()) * len(x)


@settings(max_examples=50, deadline=None)
@given(points2, st.floats(-10, 10), st.floats(-10, 10),
       st.sampled_from(FAMILIES[:2]))
def test_stationarity(x, tx, ty, spec):
    shift = np.array([tx, ty])
    assert np.allclose(gram(spec, x), gram(spec, x + shift), rtol=1e-9, atol=1e-12)


def test_matern_second_derivative_is_continuous():
    r = np.linspace(1e-3, 5, 4001)
    h = r[1] - r[0]
    k = matern52(r, 0.8)
    d2 = (k[2:] - 2 * k[1:-1] + k[:-2]) / h ** 2
    assert np.all(np.isfinite(d2))
    assert np.max(np.abs(np.diff(d2))) < 0.05


# -- fitting ----------------------------------------------------------------

LINE_C = [1, 16, 32, 48, 64]


def test_fit_line_interpolates():
    s = fit(None, LINE_C, [3 + 0.1 * c for c in LINE_C], bounds=((1, 64),))
    assert s.mean([24]) == pytest.approx(5.4, rel=0.01)


def test_fit_needs_two_samples():
    with pytest.raises(GpError):
        fit(None, [5], [1.0])


def test_duplicates():
    s = fit(None, [4, 4, 10], [2.0, 2.0, 3.0])
    assert s.mean([4]) == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(SingularCovarianceError):
        fit(None, [4, 4, 10], [2.0, 5.0, 3.0], noise_ratio=0.0)


def test_noise_free_interpolation_and_prior_recovery():
    rng = np.random.default_rng(3)
    x = np.sort(rng.choice(np.arange(0, 21), 8, replace=False)).astype(float)
    y = 2.0 + np.sin(x / 3.0)
    # length scale 0.01 of a 0..100 range: 10 l = 10 channels
    s = fit(None, x, y, bounds=((0, 100),), length_scale=0.01, noise_ratio=0.0)
    m, v = s.predict_many(x)
    assert np.all(np.abs(m - y) <= 1e-6 * np.abs(y))
    assert np.all(v <= 1e-8 * s.signal_variance)
    _, far = s.predict([80.0])
    assert abs(far / s.signal_variance - 1) <= 0.01


def test_prediction_outside_bounds_raises():
    s = fit(None, LINE_C, [3 + 0.1 * c for c in LINE_C], bounds=((1, 64),))
    with pytest.raises(OutOfBoundsError):
        s.predict([65])
    with pytest.raises(OutOfBoundsError):
        fit(None, [0, 5], [1, 2], bounds=((1, 64),))


def test_factorization_invariant():
    s = fit(None, [[1, 1], [1, 9], [9, 1], [9, 9], [5, 5]], [1, 2, 3, 4, 3.5])
    K = s.covariance() + (s.noise_variance + s.jitter) * np.eye(5)
    err = np.linalg.norm(s.factor @ s.factor.T - K) / np.linalg.norm(K)
    assert err <= 1e-8


def test_jitter_escalation():
    K = np.ones((3, 3))
    L, jit = cholesky_with_jitter(K)
    assert jit > 0
    assert np.allclose(L @ L.T, K + jit * np.eye(3))


def test_lml_examples():
    assert log_marginal_likelihood([[1.0]], [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    K = gram(KernelSpec(KernelFamily.Matern25, 0.5), [[0.0], [0.3], [1.0]])
    # all-zero targets: only the log-determinant and constant remain
    L = np.linalg.cholesky(K)
    assert log_marginal_likelihood(K, np.zeros(3)) == pytest.approx(
        -np.sum(np.log(np.diag(L))) - 1.5 * math.log(2 * math.pi))
    # mismatched values at close inputs: noise explains them better
    Kc = gram(KernelSpec(KernelFamily.Matern25, 1.0), [[0.0], [0.01], [0.02]])
    y = np.array([1.0, -1.0, 1.0])
    assert log_marginal_likelihood(Kc, y, 0.5) > log_marginal_likelihood(Kc, y, 1e-9)


def test_lml_matches_scipy_density():
    from scipy.stats import multivariate_normal
    K = gram(KernelSpec(KernelFamily.Rbf, 0.7, 1.5), [[0.0], [0.5], [1.3], [2.0]])
    y = np.array([0.3, -0.2, 1.0, 0.4])
    ref = multivariate_normal(np.zeros(4), K + 0.1 * np.eye(4)).logpdf(y)
    assert log_marginal_likelihood(K, y, 0.1) == pytest.approx(ref, rel=1e-10)


def test_selected_hyperparameters_maximize_lml():
    rng = np.random.default_rng(5)
    x = np.arange(1, 41, 3).astype(float)
    y = 1 + 0.05 * x + rng.normal(0, 0.05, x.size)
    best = fit(None, x, y, bounds=((1, 40),))
    for ls in (0.05, 0.2, 1.6):
        for nr in (1e-6, 0.05):
            other = fit(None, x, y, bounds=((1, 40),), length_scale=ls, noise_ratio=nr)
            assert best.log_marginal_likelihood() >= other.log_marginal_likelihood() - 1e-9


@pytest.mark.parametrize("family", list(KernelFamily))
def test_persistence_round_trip(tmp_path, family):
    s = fit(None, [[1, 2], [3, 8], [7, 7], [8, 1]], [1.0, 2.5, 3.0, 1.7], family, bounds=((1, 8), (1, 8)))
    p = tmp_path / "s.json"
    s.save(p)
    t = GpSurface.load(p)
    q = np.array([[2, 2], [5, 5], [8, 8]], dtype=float)
    m1, v1 = s.predict_many(q)
    m2, v2 = t.predict_many(q)
    assert np.allclose(m1, m2, rtol=1e-12)
    assert np.allclose(v1, v2, rtol=1e-9, atol=1e-15)


def test_load_rejects_tampered_noise(tmp_path):
    s = fit(None, [1, 2, 3], [1.0, 2.0, 2.5], noise_ratio=0.0)
    d = s.to_dict()
    d["noise_variance"] = -1.0
    with pytest.raises(GpError):
        GpSurface.from_dict(d)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 64), min_size=3, max_size=12, unique=True), st.integers(1, 64),
       st.integers(0, 10_000))
def test_variance_shrinkage(xs, extra, seed):
    """Adding a training point never increases the posterior variance (fixed hyperparameters)."""
    assume(extra not in xs)
    rng = np.random.default_rng(seed)
    ys = rng.normal(size=len(xs))
    kw = dict(bounds=((1, 64),), length_scale=0.2, noise_ratio=1e-2, signal_variance=1.0)
    a = fit(None, xs, ys, **kw)
    xs2 = xs + [extra]
    b = fit(None, xs2, list(ys) + [float(rng.normal())], **kw)
    q = np.arange(1, 65, dtype=float)
    # compare in standardized units: y_std changes with the data
    va = a.predict_many(q)[1] / a.y_std ** 2
    vb = b.predict_many(q)[1] / b.y_std ** 2
    assert np.all(vb <= va + 1e-8)
