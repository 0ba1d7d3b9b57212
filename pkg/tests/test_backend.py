import numpy as np
import pytest

from dpdcan import _backend, _fallback

compiled = pytest.importorskip("dpdcan._kernels")


def test_compiled_backend_is_selected():
    assert _backend.NAME == "compiled"


def _zinb_inputs(seed, n=500):
    rng = np.random.default_rng(seed)
    x = rng.poisson(2.0, n).astype(float)
    x[rng.random(n) < 0.3] = 0.0
    mu = np.exp(rng.normal(0, 2, n))
    theta = np.exp(rng.normal(0, 2, n))
    logit = rng.normal(0, 3, n)
    return x, mu, theta, -np.logaddexp(0, -logit), -np.logaddexp(0, logit)


@pytest.mark.parametrize("seed", range(5))
def test_zinb_kernels_agree(seed):
    args = _zinb_inputs(seed)
    for a, b in zip(compiled.zinb_terms(*args), _fallback.zinb_terms(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_zinb_kernels_agree_on_matrices_and_caps():
    args = [a.reshape(20, 25) for a in _zinb_inputs(9)]
    for a, b in zip(compiled.zinb_terms(*args), _fallback.zinb_terms(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    x = np.array([1e6])
    out_c = compiled.zinb_terms(x, np.array([1e-12]), np.array([1e-4]), np.array([-1.0]), np.array([-0.5]))
    out_f = _fallback.zinb_terms(x, np.array([1e-12]), np.array([1e-4]), np.array([-1.0]), np.array([-0.5]))
    for a, b in zip(out_c, out_f):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("q,sigma", [(1e-4, 0.5), (0.01, 2.0), (0.1, 1.0), (1.0, 3.0), (0.5, 0.3)])
def test_sgm_series_agree(q, sigma):
    for alpha in (2, 3, 10, 64, 256):
        a = compiled.sgm_log_a_minus_one(q, sigma, alpha)
        b = _fallback.sgm_log_a_minus_one(q, sigma, alpha)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("bound", [None, 1e-3, 0.1, 10.0])
def test_clip_sum_agrees(bound):
    g = np.random.default_rng(3).normal(size=(40, 33)) * 0.05
    sc, nc = compiled.clip_sum(g, bound)
    sf, nf = _fallback.clip_sum(g, bound)
    np.testing.assert_allclose(sc, sf, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(nc, nf, rtol=1e-12)
