"""Gaussian-mixture virtual domain derived from a frozen linear classifier.

Each class contributes one isotropic component whose mean is the
L2-normalised classifier row. All components share one variance, set from
the closest pair of prototypes, and the mixture weights are uniform.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    DegenerateClassifierError,
    DegeneratePrototypeError,
    InputShapeError,
)

DEFAULT_LAMBDA = 6.0
DUPLICATE_TOL = 1e-12


class DistanceMetric(str, Enum):
    SQUARED_EUCLIDEAN = "squared_euclidean"
    COSINE_DISTANCE = "cosine_distance"


@dataclass(frozen=True, eq=False)
class VirtualDomainGMM:
    prototypes: np.ndarray
    sigma_sq: float
    mixing: np.ndarray
    lam: float
    metric: DistanceMetric = DistanceMetric.SQUARED_EUCLIDEAN

    def __post_init__(self):
        mu = np.array(self.prototypes, dtype=np.float64)
        mu.setflags(write=False)
        pi = np.array(self.mixing, dtype=np.float64)
        pi.setflags(write=False)
        object.__setattr__(self, "prototypes", mu)
        object.__setattr__(self, "mixing", pi)
        object.__setattr__(self, "metric", DistanceMetric(self.metric))
        if mu.ndim != 2 or pi.shape != (mu.shape[0],):
            raise InputShapeError("prototypes must be (K, d) and mixing length K")
        if not np.allclose(np.linalg.norm(mu, axis=1), 1.0, atol=1e-6):
            raise ConfigError("prototype rows must have unit L2 norm")
        if not self.sigma_sq > 0:
            raise ConfigError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if (pi < 0).any() or abs(pi.sum() - 1.0) > 1e-12:
            raise ConfigError("mixing coefficients must be a probability vector")

    @property
    def num_components(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def __eq__(self, other):
        if not isinstance(other, VirtualDomainGMM):
            return NotImplemented
        return (
            np.array_equal(self.prototypes, other.prototypes)
            and self.sigma_sq == other.sigma_sq
            and np.array_equal(self.mixing, other.mixing)
            and self.lam == other.lam
            and self.metric == other.metric
        )

    __hash__ = None


def extract_prototypes(W):
    """Row-normalise classifier weights ``(K, d)`` into unit prototypes."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 2:
        raise InputShapeError(f"classifier weights must be (K>=2, d), got {W.shape}")
    norms = np.linalg.norm(W, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateClassifierError(int(zero[0]))
    return W / norms[:, None]


def pairwise_distances(mu, metric=DistanceMetric.SQUARED_EUCLIDEAN):
    metric = DistanceMetric(metric)
    mu = np.asarray(mu, dtype=np.float64)
    if metric is DistanceMetric.SQUARED_EUCLIDEAN:
        sq = (mu**2).sum(axis=1)
        D = sq[:, None] + sq[None, :] - 2.0 * mu @ mu.T
        return np.maximum(D, 0.0)
    norms = np.linalg.norm(mu, axis=1)
    return 1.0 - (mu @ mu.T) / np.outer(norms, norms)


def estimate_sigma(prototypes, lam=DEFAULT_LAMBDA, metric=DistanceMetric.SQUARED_EUCLIDEAN):
    """Shared variance: closest-pair prototype distance divided by ``lam``."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    mu = np.asarray(prototypes, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise InputShapeError("need at least two prototypes")
    D = pairwise_distances(mu, metric)
    min_dist = D[~np.eye(len(mu), dtype=bool)].min()
    if min_dist <= DUPLICATE_TOL:
        raise DegeneratePrototypeError(f"two prototypes coincide (min distance {min_dist:.3e})")
    return float(min_dist / lam)


def build_virtual_domain(bundle, lam=DEFAULT_LAMBDA, metric=DistanceMetric.SQUARED_EUCLIDEAN):
    """Virtual-domain mixture for ``bundle``'s classifier. Does not mutate it."""
    mu = extract_prototypes(bundle.classifier_weights)
    sigma_sq = estimate_sigma(mu, lam, metric)
    K = mu.shape[0]
    return VirtualDomainGMM(mu, sigma_sq, np.full(K, 1.0 / K), float(lam), metric)


def balanced_labels(n, K, rng):
    """Round-robin class labels in random order; counts differ by at most one."""
    return rng.permutation(np.arange(n) % K)


def sample_virtual_batch(gmm, n, rng, sigma_sq=None):
    """Draw ``n`` labelled virtual features.

    ``sigma_sq`` overrides the mixture variance and may be 0 (noise-free
    samples at the prototypes); it exists for testing.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    var = gmm.sigma_sq if sigma_sq is None else float(sigma_sq)
    if var < 0:
        raise ConfigError("sigma_sq override must be >= 0")
    labels = balanced_labels(n, gmm.num_components, rng)
    noise = rng.standard_normal((n, gmm.dim))
    return gmm.prototypes[labels] + np.sqrt(var) * noise, labels


def gmm_log_density(gmm, f):
    """``log sum_k pi_k N(f | mu_k, sigma^2 I)`` via log-sum-exp.

    Accepts one vector (returns a float) or a batch (returns an array).
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    F = f[None, :] if single else f
    if F.ndim != 2 or F.shape[1] != gmm.dim:
        raise InputShapeError(f"expected feature dimension {gmm.dim}, got shape {f.shape}")
    d = gmm.dim
    sq = ((F[:, None, :] - gmm.prototypes[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        log_pi = np.log(gmm.mixing)
    comp = log_pi[None, :] - 0.5 * sq / gmm.sigma_sq - 0.5 * d * np.log(2 * np.pi * gmm.sigma_sq)
    out = kernels.logsumexp_rows(np.ascontiguousarray(comp))
    return float(out[0]) if single else out


def export_gmm_text(gmm):
    """Line-oriented plain-text record, stable across runs for diffing."""
    lines = [
        "# virtual-domain mixture",
        f"K: {gmm.num_components}",
        f"d: {gmm.dim}",
        f"lambda: {gmm.lam!r}",
        f"metric: {gmm.metric.value}",
        f"sigma_sq: {gmm.sigma_sq!r}",
        "mixing: " + " ".join(repr(float(p)) for p in gmm.mixing),
        "prototypes:",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in gmm.prototypes]
    return "\n".join(lines) + "\n"


def parse_gmm_text(text):
    fields, rows, in_protos = {}, [], False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_protos:
            rows.append([float(v) for v in line.split()])
            continue
        key, _, value = line.partition(":")
        if key == "prototypes":
            in_protos = True
        else:
            fields[key.strip()] = value.strip()
    return VirtualDomainGMM(
        np.array(rows),
        float(fields["sigma_sq"]),
        np.array([float(v) for v in fields["mixing"].split()]),
        float(fields["lambda"]),
        DistanceMetric(fields["metric"]),
    )
