"""Pure numpy implementations of the numerical kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature. This module is the reference the compiled path is tested against
and the fallback used when the extension is unavailable or the arrays are
not float64.
"""
import numpy as np


def dense_forward(x, w, b, relu):
    """Affine layer ``x @ w + b``, optionally followed by a rectifier."""
    z = x @ w
    z += b
    if relu:
        np.maximum(z, 0.0, out=z)
    return z


def dense_backward(x, w, out, grad_out, relu, need_input_grad=True):
    """Backward pass of :func:`dense_forward`.

    Returns ``(grad_w, grad_b, grad_x)``; ``grad_x`` is None when not needed.
    """
    g = grad_out * (out > 0) if relu else grad_out
    grad_w = x.T @ g
    grad_b = g.sum(axis=0)
    grad_x = g @ w.T if need_input_grad else None
    return grad_w, grad_b, grad_x


def logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def log_softmax(logits):
    return logits - logsumexp_rows(logits)[:, None]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_entropy(probs):
    """Shannon entropy per row in nats, with ``0 * log 0 := 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=1)
