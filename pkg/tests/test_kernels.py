"""Backend kernels: correctness against plain-numpy references and
numba/numpy parity."""

import numpy as np
import pytest

from ccem import kernels


rng = np.random.default_rng(20240811)


def test_softplus_matches_reference_and_is_stable():
    x = np.array([-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0])
    sp = kernels.softplus(x)
    assert np.isfinite(sp).all()
    assert abs(sp[3] - np.log(2.0)) < 1e-15
    # large negative underflows to 0, large positive is x itself
    assert sp[0] == 0.0
    assert sp[-1] == 800.0
    mid = x[1:-1]
    assert np.allclose(kernels.softplus(mid), np.log1p(np.exp(mid)), rtol=1e-14)


def test_sigmoid_matches_reference():
    x = rng.normal(size=(3, 17)) * 5
    assert np.allclose(kernels.sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-14)
    assert kernels.sigmoid(np.array([0.0]))[0] == 0.5


def test_fused_softplus_sigmoid_agrees_with_singles():
    x = rng.normal(size=(5, 33)) * 3
    sp, sg = kernels.softplus_sigmoid(x)
    np.testing.assert_array_equal(sp, kernels.softplus(x))
    np.testing.assert_array_equal(sg, kernels.sigmoid(x))


def test_backend_parity_projections():
    # the dispatched backend must agree with the numpy reference exactly:
    # both run the identical sort/cumsum/divide sequence per row
    v = rng.normal(size=(200, 7)) * 2
    p_ref, a_ref = kernels._project_simplex_rows_np(v)
    p, a = kernels.project_simplex_rows(v)
    np.testing.assert_array_equal(p, p_ref)
    np.testing.assert_array_equal(a, a_ref)

    p_ref, a_ref, b_ref = kernels._project_relaxed_simplex_rows_np(v)
    p, a, b = kernels.project_relaxed_simplex_rows(v)
    np.testing.assert_array_equal(p, p_ref)
    np.testing.assert_array_equal(a, a_ref)
    np.testing.assert_array_equal(b, b_ref)


def test_backend_parity_elementwise():
    # backends may use different libm builds, so allow a few ulps
    x = rng.normal(size=(11, 13)) * 4
    assert np.allclose(kernels.softplus(x), kernels._softplus_np(x), rtol=1e-14, atol=0)
    assert np.allclose(kernels.sigmoid(x), kernels._sigmoid_np(x), rtol=1e-14, atol=0)


def test_adamw_matches_reference_sequence():
    p1 = rng.normal(size=37)
    p2 = p1.copy()
    m1 = np.zeros_like(p1)
    v1 = np.zeros_like(p1)
    m2 = np.zeros_like(p1)
    v2 = np.zeros_like(p1)
    for t in range(1, 6):
        g = rng.normal(size=37)
        kernels.adamw_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 1e-4, t)
        kernels._adamw_update_np(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 1e-4, t)
        assert np.allclose(p1, p2, rtol=1e-15)
        assert np.allclose(m1, m2, rtol=1e-15)
        assert np.allclose(v1, v2, rtol=1e-15)


def test_scatter_add_rows_matches_add_at():
    bsz, kk, dmax, d = 3, 5, 4, 11
    idx = rng.integers(0, d, size=(kk, dmax))
    mask = (rng.uniform(size=(kk, dmax)) > 0.3).astype(np.float64)
    g = rng.normal(size=(bsz * kk, dmax))
    out1 = np.zeros((bsz, d))
    kernels.scatter_add_rows(out1, idx, mask, g)
    out2 = np.zeros((bsz, d))
    kernels._scatter_add_rows_np(out2, idx, mask, g)
    assert np.allclose(out1, out2, rtol=1e-15, atol=1e-300)


def test_simplex_kernel_feasibility():
    v = rng.normal(size=(500, 9)) * 3
    p, active = kernels.project_simplex_rows(v)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(active, p > 0)
