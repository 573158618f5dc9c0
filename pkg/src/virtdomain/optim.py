"""Momentum SGD with L2 weight decay, and the annealed learning-rate schedule
used by every training phase."""
import numpy as np

from .errors import ConfigError


def lr_schedule(eta0, p):
    """Annealed learning rate ``eta0 * (1 + 10 p) ** -0.75`` for progress ``p`` in [0, 1]."""
    if not eta0 > 0:
        raise ConfigError(f"eta0 must be positive, got {eta0}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"progress p must lie in [0, 1], got {p}")
    return eta0 * (1.0 + 10.0 * p) ** -0.75


class SGD:
    """Momentum SGD over a dict of named parameter arrays, updated in place.

    Matches the usual heavy-ball formulation: ``v <- m v + (g + wd * w)``,
    ``w <- w - lr * v``.
    """

    def __init__(self, momentum=0.9, weight_decay=1e-3):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {}

    def step(self, params, grads, lr):
        for name, grad in grads.items():
            w = params[name]
            d = grad + self.weight_decay * w if self.weight_decay else grad.copy()
            v = self.velocity.get(name)
            if v is None:
                v = d
            else:
                v *= self.momentum
                v += d
            self.velocity[name] = v
            w -= lr * v

    def state_dict(self):
        return {k: np.array(v, copy=True) for k, v in self.velocity.items()}
