import numpy as np
import pytest

from gatedmeta import _npkernels, kernels
from oracles import conv3x3_direct

BACKENDS = kernels.available_backends()
needs_ext = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def _mod(name):
    return _npkernels if name == "numpy" else kernels._ckernels


@pytest.mark.parametrize("name", BACKENDS)
def test_conv_hand_worked_2x2(name):
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0   # identity tap
    w[0, 0, 1, 2] = 10.0  # right neighbour
    out = _mod(name).conv3x3_forward(x, w, np.array([0.5]))
    np.testing.assert_allclose(out[0, 0], [[1 + 20 + 0.5, 2 + 0.5], [3 + 40 + 0.5, 4 + 0.5]])


@pytest.mark.parametrize("name", BACKENDS)
def test_conv_matches_direct_loops(name):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 5, 4))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(_mod(name).conv3x3_forward(x, w, b), conv3x3_direct(x, w, b), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_conv_backward_is_adjoint(name):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(5, 3, 3, 3))
    dy = rng.normal(size=(2, 5, 4, 4))
    dx, dw, db = _mod(name).conv3x3_backward(x, w, dy)
    # <dy, conv(x)> is bilinear: its x-gradient is dx, its w-gradient is dw
    zero = np.zeros(5)
    dx_ref = rng.normal(size=x.shape)
    lhs = np.sum(dy * conv3x3_direct(dx_ref, w, zero))
    assert np.sum(dx * dx_ref) == pytest.approx(lhs, rel=1e-10)
    dw_ref = rng.normal(size=w.shape)
    assert np.sum(dw * dw_ref) == pytest.approx(np.sum(dy * conv3x3_direct(x, dw_ref, zero)), rel=1e-10)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("name", BACKENDS)
def test_maxpool_forward_backward(name):
    x = np.array([[[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 8.0, 1.0], [0.0, 0.0, 1.0, 1.0], [0.0, 9.0, 1.0, 1.0]]]])
    out, idx = _mod(name).maxpool2_forward(x)
    np.testing.assert_array_equal(out[0, 0], [[5.0, 8.0], [9.0, 1.0]])
    dx = _mod(name).maxpool2_backward(np.ones_like(out), idx, x.shape)
    assert dx.sum() == 4.0
    assert dx[0, 0, 0, 1] == 1.0 and dx[0, 0, 1, 2] == 1.0 and dx[0, 0, 3, 1] == 1.0
    # ties go to the first position in row-major order
    assert dx[0, 0, 2, 2] == 1.0


@pytest.mark.parametrize("name", BACKENDS)
def test_group_shrink_in_place(name):
    v = np.array([3.0, 4.0, 0.1, 0.1])
    _mod(name).group_shrink(v, np.array([0, 2]), np.array([2, 4]), np.array([1.0, 1.0]), 1.0)
    np.testing.assert_allclose(v, [2.4, 3.2, 0.0, 0.0])


@needs_ext
def test_backends_agree_on_random_inputs():
    rng = np.random.default_rng(7)
    c, n = kernels._ckernels, _npkernels
    for shape, o in (((4, 3, 8, 8), 8), ((3, 8, 4, 4), 16), ((2, 1, 6, 2), 3)):
        x = rng.normal(size=shape)
        w = rng.normal(size=(o, shape[1], 3, 3))
        b = rng.normal(size=o)
        dy = rng.normal(size=(shape[0], o) + shape[2:])
        np.testing.assert_allclose(c.conv3x3_forward(x, w, b), n.conv3x3_forward(x, w, b), atol=1e-12)
        for a, r in zip(c.conv3x3_backward(x, w, dy), n.conv3x3_backward(x, w, dy)):
            np.testing.assert_allclose(a, r, atol=1e-11)
        xp = rng.normal(size=(shape[0], 2, 4, 6))
        oc, ic = c.maxpool2_forward(xp)
        on, inn = n.maxpool2_forward(xp)
        np.testing.assert_array_equal(oc, on)
        np.testing.assert_array_equal(ic, inn)
        d = rng.normal(size=oc.shape)
        np.testing.assert_array_equal(c.maxpool2_backward(d, ic, xp.shape), n.maxpool2_backward(d, inn, xp.shape))
    v = rng.normal(size=40)
    st, sp, wt = np.arange(0, 40, 5), np.arange(5, 45, 5), rng.uniform(0, 2, 8)
    a, b = v.copy(), v.copy()
    c.group_shrink(a, st, sp, wt, 0.7)
    n.group_shrink(b, st, sp, wt, 0.7)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_use_backend_switches_and_validates():
    previous = kernels.use_backend("numpy")
    try:
        assert kernels.BACKEND == "numpy"
        assert kernels.conv3x3_forward is _npkernels.conv3x3_forward
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(previous)
