import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mbdiff import kernels
from mbdiff.kernels import available_backends

BACKENDS = sorted(available_backends())


def reference_conv(x, w, b):
    """Direct loop definition of a zero-padded 'same' cross-correlation."""
    B, Cin, L = x.shape
    Cout, _, K = w.shape
    half = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (half, half)))
    out = np.empty((B, Cout, L))
    for i in range(L):
        out[:, :, i] = np.einsum("bck,ock->bo", xp[:, :, i:i + K], w)
    return out + b[None, :, None]


shapes = st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 40),
                   st.sampled_from([1, 3, 5, 7]))


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


def test_compiled_backend_built():
    assert "cython" in BACKENDS, "compiled extension missing; run pip install -e ."


@pytest.mark.parametrize("name", BACKENDS)
@given(shapes, st.integers(0, 2**31))
def test_forward_matches_reference(name, shape, seed):
    B, Cin, Cout, L, K = shape
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((B, Cin, L)), r.standard_normal((Cout, Cin, K)), r.standard_normal(Cout)
    assert_allclose(available_backends()[name].conv1d(x, w, b), reference_conv(x, w, b), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("name", BACKENDS)
@given(shapes, st.integers(0, 2**31))
def test_gradients_are_adjoint(name, shape, seed):
    # <g, conv(x)> is bilinear; its derivatives are the claimed gradients
    B, Cin, Cout, L, K = shape
    r = np.random.default_rng(seed)
    x, w, g = r.standard_normal((B, Cin, L)), r.standard_normal((Cout, Cin, K)), r.standard_normal((B, Cout, L))
    mod = available_backends()[name]
    gx, gw, gb = mod.conv1d_grad(x, w, g)
    dx, dw = r.standard_normal(x.shape), r.standard_normal(w.shape)
    zero = np.zeros(Cout)
    assert np.sum(g * reference_conv(dx, w, zero)) == pytest.approx(np.sum(gx * dx), rel=1e-9, abs=1e-9)
    assert np.sum(g * reference_conv(x, dw, zero)) == pytest.approx(np.sum(gw * dw), rel=1e-9, abs=1e-9)
    assert_allclose(gb, g.sum(axis=(0, 2)), rtol=1e-12)


@given(shapes, st.integers(0, 2**31))
def test_backends_agree(shape, seed):
    if len(BACKENDS) < 2:
        pytest.skip("only one backend available")
    B, Cin, Cout, L, K = shape
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((B, Cin, L)), r.standard_normal((Cout, Cin, K)), r.standard_normal(Cout)
    g = r.standard_normal((B, Cout, L))
    c, p = available_backends()["cython"], available_backends()["python"]
    assert_allclose(c.conv1d(x, w, b), p.conv1d(x, w, b), rtol=1e-12, atol=1e-12)
    for a, bb in zip(c.conv1d_grad(x, w, g), p.conv1d_grad(x, w, g)):
        assert_allclose(a, bb, rtol=1e-12, atol=1e-12)


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("MBDIFF_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("MBDIFF_PURE_PYTHON")
        importlib.reload(kernels)
