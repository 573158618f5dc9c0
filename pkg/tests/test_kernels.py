import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtdomain import _kernels_py, kernels

compiled = pytest.importorskip("virtdomain._kernels", reason="compiled extension not built")

shapes = st.tuples(st.integers(1, 40), st.integers(1, 30), st.integers(1, 20))


@settings(max_examples=60, deadline=None)
@given(shapes, st.booleans(), st.integers(0, 2**31))
def test_dense_parity(shape, relu, seed):
    n, i, o = shape
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)
    out_c = compiled.dense_forward(x, w, b, relu)
    out_p = _kernels_py.dense_forward(x, w, b, relu)
    np.testing.assert_allclose(out_c, out_p, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=(n, o))
    for need in (True, False):
        rc = compiled.dense_backward(x, w, out_p, g, relu, need)
        rp = _kernels_py.dense_backward(x, w, out_p, g, relu, need)
        for a, c in zip(rc, rp):
            if c is None:
                assert a is None
            else:
                np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.floats(-500, 500), st.integers(0, 2**31))
def test_row_kernel_parity(n, k, shift, seed):
    z = np.random.default_rng(seed).normal(scale=20, size=(n, k)) + shift
    np.testing.assert_allclose(compiled.logsumexp_rows(z), _kernels_py.logsumexp_rows(z), rtol=1e-13, atol=1e-12)
    np.testing.assert_allclose(compiled.log_softmax(z), _kernels_py.log_softmax(z), rtol=1e-12, atol=1e-12)
    p = _kernels_py.softmax(z)
    np.testing.assert_allclose(compiled.softmax(z), p, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(compiled.row_entropy(p), _kernels_py.row_entropy(p), rtol=1e-12, atol=1e-14)


def test_entropy_zero_log_zero():
    p = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
    for mod in (compiled, _kernels_py):
        np.testing.assert_allclose(mod.row_entropy(p), [0.0, np.log(2)], atol=1e-15)


def test_dispatch_falls_back_for_float32_and_views():
    x = np.ones((3, 4), dtype=np.float32)
    w = np.ones((4, 2), dtype=np.float32)
    b = np.zeros(2, dtype=np.float32)
    assert kernels.dense_forward(x, w, b, False).dtype == np.float32
    z = np.arange(12.0).reshape(3, 4)[:, ::2]
    np.testing.assert_allclose(kernels.softmax(z), _kernels_py.softmax(z))


def test_backend_selection_env():
    assert kernels.BACKEND == "cython"
    env = dict(os.environ, VIRTDOMAIN_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "import virtdomain; print(virtdomain.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
