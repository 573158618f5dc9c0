"""Shared oracles for the test suite."""
import numpy as np

from virtdomain.models import NetworkSpec, init_bundle


def central_diff(f, arrays, eps=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each
    array in ``arrays`` (perturbed in place and restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f()
            a[i] = old - eps
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def small_bundle(seed=0, input_dim=4, feature_dim=3, num_classes=3, hidden=(5,), disc=(6,)):
    spec = NetworkSpec(input_dim, feature_dim, num_classes, hidden_widths=hidden, discriminator_widths=disc)
    return init_bundle(spec, seed)


def n_params(layers):
    return sum(w.size + b.size for w, b in layers)
