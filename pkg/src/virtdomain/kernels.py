"""Kernel dispatch: compiled extension when available, numpy otherwise.

The backend is chosen once at import. Set ``VIRTDOMAIN_PURE_PYTHON=1`` to
force the numpy path. Non-float64 or non-contiguous inputs always take the
numpy path, so float32 training mode works with either backend.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("VIRTDOMAIN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced by environment")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _fast(*arrays):
    if _compiled is None:
        return False
    for a in arrays:
        if a.dtype != np.float64 or not a.flags.c_contiguous:
            return False
    return True


def dense_forward(x, w, b, relu):
    if _fast(x, w, b):
        return _compiled.dense_forward(x, w, b, relu)
    return _kernels_py.dense_forward(x, w, b, relu)


def dense_backward(x, w, out, grad_out, relu, need_input_grad=True):
    if _fast(x, w, out, grad_out):
        return _compiled.dense_backward(x, w, out, grad_out, relu, need_input_grad)
    return _kernels_py.dense_backward(x, w, out, grad_out, relu, need_input_grad)


def logsumexp_rows(a):
    if _fast(a) and a.shape[1] > 0:
        return _compiled.logsumexp_rows(a)
    return _kernels_py.logsumexp_rows(a)


def log_softmax(logits):
    if _fast(logits) and logits.shape[1] > 0:
        return _compiled.log_softmax(logits)
    return _kernels_py.log_softmax(logits)


def softmax(logits):
    if _fast(logits) and logits.shape[1] > 0:
        return _compiled.softmax(logits)
    return _kernels_py.softmax(logits)


def row_entropy(probs):
    if _fast(probs):
        return _compiled.row_entropy(probs)
    return _kernels_py.row_entropy(probs)
