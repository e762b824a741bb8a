import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faststamp import kernels
from faststamp._jit import HAVE_NUMBA


def naive_dwconv(x, k, stride):
    """Direct definition: out[n,c,oy,ox] = sum_ij xpad[n,c,oy*s+i,ox*s+j] * k[c,i,j]."""
    n, c, h, w = x.shape
    ks = k.shape[-1]
    p = (ks - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = kernels.out_size(h, stride), kernels.out_size(w, stride)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, k))
    for oy in range(ho):
        for ox in range(wo):
            win = xp[:, :, oy * stride:oy * stride + ks, ox * stride:ox * stride + ks]
            out[:, :, oy, ox] = np.sum(win * k[None], axis=(2, 3))
    return out


shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9),
                   st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]))


@given(shapes, st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_numpy_forward_matches_definition(shape, seed):
    n, c, h, w, ks, stride = shape
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(n, c, h, w)), rng.normal(size=(c, ks, ks))
    np.testing.assert_allclose(kernels.dwconv_forward_np(x, k, stride), naive_dwconv(x, k, stride),
                               rtol=1e-12, atol=1e-12)


@given(shapes, st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_loop_kernels_match_numpy(shape, seed):
    n, c, h, w, ks, stride = shape
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(n, c, h, w)), rng.normal(size=(c, ks, ks))
    ho, wo = kernels.out_size(h, stride), kernels.out_size(w, stride)
    g = rng.normal(size=(n, c, ho, wo))
    np.testing.assert_allclose(kernels.dwconv_forward_nb(x, k, stride),
                               kernels.dwconv_forward_np(x, k, stride), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(kernels.dwconv_backward_input_nb(g, k, h, w, stride),
                               kernels.dwconv_backward_input_np(g, k, h, w, stride), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(kernels.dwconv_backward_kernel_nb(x, g, ks, stride),
                               kernels.dwconv_backward_kernel_np(x, g, ks, stride), rtol=1e-10, atol=1e-10)


def test_backward_is_adjoint_of_forward():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(3, 3, 3))
    y = kernels.dwconv_forward(x, k, 2)
    g = rng.normal(size=y.shape)
    # <A x, g> == <x, A^T g> and the same for the kernel argument
    lhs = np.sum(y * g)
    assert np.sum(x * kernels.dwconv_backward_input(g, k, 7, 6, 2)) == pytest.approx(lhs, rel=1e-10)
    assert np.sum(k * kernels.dwconv_backward_kernel(x, g, 3, 2)) == pytest.approx(lhs, rel=1e-10)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
@settings(max_examples=25, deadline=None)
def test_integer_conv_exact(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.integers(-2**15, 2**15, size=(1, 2, 6, 5), dtype=np.int64)
    k = rng.integers(-2**15, 2**15, size=(2, 3, 3), dtype=np.int64)
    ref = naive_dwconv(x.astype(object), k.astype(object), stride)
    assert np.array_equal(kernels.dwconv_int(x, k, stride), ref.astype(np.int64))
    assert np.array_equal(kernels.dwconv_int(x.astype(object), k.astype(object), stride), ref)


def python_requant(a, shift, lo, hi):
    if shift > 0:
        q = (abs(a) + (1 << (shift - 1))) >> shift
        q = q if a >= 0 else -q
    else:
        q = a
    return min(max(q, lo), hi)


@given(st.lists(st.integers(-2**40, 2**40), min_size=1, max_size=30), st.integers(0, 20))
@settings(deadline=None)
def test_requantize_matches_scalar_oracle(values, shift):
    acc = np.array(values, dtype=np.int64)
    lo, hi = -2**15, 2**15 - 1
    want = [python_requant(v, shift, lo, hi) for v in values]
    assert kernels.requantize_np(acc, shift, lo, hi).tolist() == want
    assert kernels.requantize_nb(acc, shift, lo, hi).tolist() == want
    assert kernels.requantize(acc.astype(object), shift, lo, hi).tolist() == want


def test_requantize_ties_round_away_from_zero():
    acc = np.array([3, -3, 1, -1, 5, -5], dtype=np.int64)  # x.5 ties after >> 1
    assert kernels.requantize(acc, 1, -100, 100).tolist() == [2, -2, 1, -1, 3, -3]


def test_env_flag_disables_numba():
    code = "from faststamp import _jit, kernels; print(_jit.HAVE_NUMBA, kernels.dwconv_forward is kernels.dwconv_forward_np)"
    env = dict(os.environ, FASTSTAMP_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_public_names_use_numba_when_available():
    assert kernels.dwconv_forward is not kernels.dwconv_forward_np
