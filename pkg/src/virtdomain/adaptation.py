"""Uncertainty-weighted adversarial alignment and pseudo-label refinement.

The target feature extractor starts from the source extractor and is trained
so that its (optionally L2-normalised) features become indistinguishable
from virtual-domain samples, while the discriminator learns to separate the
two. Target samples are weighted by the normalised entropy of the frozen
classifier's prediction, so uncertain samples are pulled hardest. After each
alignment pass the most confident target samples are pseudo-labelled and
used for a cross-entropy refinement pass over the extractor.

The classifier weights are never updated here: they define the prototypes of
the virtual domain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datasets import batch_iterator
from .errors import ConfigError, DivergenceError, InvalidDistributionError
from .models import (
    TARGET_DOMAIN,
    VIRTUAL_DOMAIN,
    ModelBundle,
    classification_loss_and_grads,
    extract_features,
    mlp_backward,
    mlp_forward,
    named_grads,
    predict_proba,
)
from .optim import SGD, lr_schedule
from .virtual_domain import VirtualDomainGMM, sample_virtual_batch

LOG_CLAMP = math.log(1e-12)
NORM_EPS = 1e-12


@dataclass
class AdaptationConfig:
    epochs: int = 30
    batch_size: int = 32
    eta0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    extractor_lr_factor: float = 0.1
    r_percent: float = 70.0
    tc_enabled: bool = True
    normalize_target_features: bool = True
    normalize_virtual_features: bool = True
    saturating_generator: bool = False
    # Constant per-sample weight replacing the entropy weights when set.
    alpha_override: float | None = None
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r_percent <= 100:
            raise ConfigError(f"r_percent must lie in (0, 100], got {self.r_percent}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.alpha_override is not None and not 0 <= self.alpha_override <= 1:
            raise ConfigError("alpha_override must lie in [0, 1]")


@dataclass
class AlignmentStepResult:
    d_loss: float
    g_loss: float
    mean_alpha: float
    discriminator_batch_accuracy: float


@dataclass
class PseudoLabelSet:
    sample_indices: np.ndarray
    labels: np.ndarray
    entropies: np.ndarray
    r_percent: float

    def __len__(self):
        return len(self.sample_indices)


@dataclass
class OptimizerStates:
    """Mutable state threaded through :func:`alignment_step`."""

    config: AdaptationConfig
    discriminator: SGD
    extractor: SGD
    refinement: SGD
    lr: float
    step: int = 0

    @classmethod
    def fresh(cls, config):
        def sgd():
            return SGD(config.momentum, config.weight_decay)

        return cls(config, sgd(), sgd(), sgd(), config.eta0)


# -- uncertainty weights ------------------------------------------------------


def _check_distribution(probs, tol=1e-6):
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise InvalidDistributionError(f"expected (n, K>=2) probabilities, got {probs.shape}")
    if not np.all(np.isfinite(probs)) or (probs < 0).any():
        raise InvalidDistributionError("probabilities must be finite and non-negative")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise InvalidDistributionError(f"row {int(bad[0])} does not sum to 1")
    return probs


def prediction_entropy(probs):
    return kernels.row_entropy(_check_distribution(probs))


def uncertainty_weights(probs):
    """Normalised prediction entropy ``H(p) / ln K`` per row, in [0, 1]."""
    probs = _check_distribution(probs)
    alpha = kernels.row_entropy(probs) / math.log(probs.shape[1])
    return np.clip(alpha, 0.0, 1.0)


# -- adversarial objectives ---------------------------------------------------


def _clamped_log(logp):
    """Clamp log-probabilities at log(1e-12); returns values and a live mask."""
    # np.maximum, unlike a masked select, lets NaN through to the divergence check
    return np.maximum(logp, LOG_CLAMP), logp > LOG_CLAMP


def discriminator_terms(logits_v, logits_t, alpha):
    """Value of the discriminator objective and its gradients w.r.t. logits.

    Value: ``mean(log D(f_v)) + mean(alpha * log(1 - D(f_t)))`` where ``D``
    is the softmax probability of the virtual column. The discriminator
    maximises it; returned gradients are of the value itself (ascent).
    """
    lp_v = kernels.log_softmax(np.ascontiguousarray(logits_v, dtype=np.float64))
    lp_t = kernels.log_softmax(np.ascontiguousarray(logits_t, dtype=np.float64))
    log_d_v, live_v = _clamped_log(lp_v[:, VIRTUAL_DOMAIN])
    log_1md_t, live_t = _clamped_log(lp_t[:, TARGET_DOMAIN])
    nv, nt = len(lp_v), len(lp_t)
    value = log_d_v.mean() + (alpha * log_1md_t).mean()

    g_v = -np.exp(lp_v)
    g_v[:, VIRTUAL_DOMAIN] += 1.0
    g_v *= (live_v / nv)[:, None]
    g_t = -np.exp(lp_t)
    g_t[:, TARGET_DOMAIN] += 1.0
    g_t *= (alpha * live_t / nt)[:, None]
    return float(value), g_v, g_t


def generator_terms(logits_t, alpha, saturating=False):
    """Value of the extractor objective (minimised) and its logit gradient.

    Non-saturating form ``-mean(alpha * log D(f_t))`` by default; the
    saturating form is ``mean(alpha * log(1 - D(f_t)))``.
    """
    lp_t = kernels.log_softmax(np.ascontiguousarray(logits_t, dtype=np.float64))
    nt = len(lp_t)
    g = -np.exp(lp_t)
    if saturating:
        logv, live = _clamped_log(lp_t[:, TARGET_DOMAIN])
        value = (alpha * logv).mean()
        g[:, TARGET_DOMAIN] += 1.0
        g *= (alpha * live / nt)[:, None]
    else:
        logv, live = _clamped_log(lp_t[:, VIRTUAL_DOMAIN])
        value = -(alpha * logv).mean()
        g[:, VIRTUAL_DOMAIN] += 1.0
        g *= (-alpha * live / nt)[:, None]
    return float(value), g


def discriminator_objective(virtual_features, target_features, alpha, discriminator):
    """Discriminator objective for a list of dense ``(weight, bias)`` layers."""
    lv, _ = mlp_forward(discriminator, np.ascontiguousarray(virtual_features))
    lt, _ = mlp_forward(discriminator, np.ascontiguousarray(target_features))
    return discriminator_terms(lv, lt, np.asarray(alpha, dtype=np.float64))[0]


def generator_objective(target_features, alpha, discriminator, saturating=False):
    lt, _ = mlp_forward(discriminator, np.ascontiguousarray(target_features))
    return generator_terms(lt, np.asarray(alpha, dtype=np.float64), saturating)[0]


def discriminator_grads(virtual_features, target_features, alpha, discriminator):
    """Value, per-layer gradients of the objective, and batch accuracy."""
    lv, acts_v = mlp_forward(discriminator, np.ascontiguousarray(virtual_features))
    lt, acts_t = mlp_forward(discriminator, np.ascontiguousarray(target_features))
    value, g_v, g_t = discriminator_terms(lv, lt, alpha)
    dtype = lv.dtype
    grads_v, _ = mlp_backward(discriminator, acts_v, g_v.astype(dtype, copy=False))
    grads_t, _ = mlp_backward(discriminator, acts_t, g_t.astype(dtype, copy=False))
    grads = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(grads_v, grads_t)]
    correct = (lv[:, VIRTUAL_DOMAIN] > lv[:, TARGET_DOMAIN]).sum() + (lt[:, TARGET_DOMAIN] >= lt[:, VIRTUAL_DOMAIN]).sum()
    accuracy = float(correct) / (len(lv) + len(lt))
    return value, grads, accuracy


def l2_normalize(f):
    norms = np.maximum(np.linalg.norm(f, axis=1, keepdims=True), NORM_EPS)
    return f / norms, norms


def l2_normalize_backward(u, norms, grad_u):
    return (grad_u - (grad_u * u).sum(axis=1, keepdims=True) * u) / norms


def generator_feature_grad(bundle, x, alpha, config):
    """Extractor objective and its gradient w.r.t. extractor parameters."""
    f, f_acts = extract_features(bundle, x)
    if config.normalize_target_features:
        u, norms = l2_normalize(f)
    else:
        u, norms = f, None
    lt, acts_t = mlp_forward(bundle.discriminator_params, np.ascontiguousarray(u))
    value, g_lt = generator_terms(lt, alpha, config.saturating_generator)
    _, g_u = mlp_backward(bundle.discriminator_params, acts_t, g_lt.astype(lt.dtype, copy=False), need_input_grad=True)
    g_f = l2_normalize_backward(u, norms, g_u) if norms is not None else g_u
    layer_grads, _ = mlp_backward(bundle.feature_params, f_acts, g_f)
    return value, named_grads("feature", layer_grads)


def target_alpha(bundle, f, config):
    """Per-sample weights for a batch of raw target features (no gradient)."""
    n = len(f)
    if config.alpha_override is not None:
        return np.full(n, float(config.alpha_override))
    if not config.tc_enabled:
        return np.ones(n)
    logits = np.ascontiguousarray(f @ bundle.classifier_weights.T, dtype=np.float64)
    return uncertainty_weights(kernels.softmax(logits))


def alignment_step(
    bundle: ModelBundle,
    gmm: VirtualDomainGMM,
    target_batch: np.ndarray,
    states: OptimizerStates,
    rng: np.random.Generator,
):
    """One discriminator ascent step followed by one extractor descent step.

    Updates ``bundle`` in place and returns ``(bundle, AlignmentStepResult)``.
    The discriminator uses ``states.lr``; the extractor uses
    ``states.lr * extractor_lr_factor``.
    """
    cfg = states.config
    x = np.ascontiguousarray(target_batch, dtype=bundle.spec.dtype)
    f, _ = extract_features(bundle, x)
    alpha = target_alpha(bundle, f, cfg)
    u = l2_normalize(f)[0] if cfg.normalize_target_features else f
    fv, _ = sample_virtual_batch(gmm, len(x), rng)
    fv = fv.astype(bundle.spec.dtype)
    if cfg.normalize_virtual_features:
        fv = l2_normalize(fv)[0]

    d_val, d_layer_grads, d_acc = discriminator_grads(fv, u, alpha, bundle.discriminator_params)
    if not np.isfinite(d_val):
        raise DivergenceError("alignment diverged", step=states.step, d_loss=d_val, g_loss=float("nan"))
    ascent = {k: -g for k, g in named_grads("discriminator", d_layer_grads).items()}
    states.discriminator.step(bundle.discriminator_arrays(), ascent, states.lr)

    g_val, f_grads = generator_feature_grad(bundle, x, alpha, cfg)
    if not np.isfinite(g_val):
        raise DivergenceError("alignment diverged", step=states.step, d_loss=d_val, g_loss=g_val)
    states.extractor.step(bundle.feature_arrays(), f_grads, states.lr * cfg.extractor_lr_factor)
    states.step += 1
    return bundle, AlignmentStepResult(d_val, g_val, float(alpha.mean()), d_acc)


# -- pseudo labels --------------------------------------------------------------


def rank_by_certainty(probs):
    """Indices ordered from most to least confident (ascending entropy,
    ties broken by original index)."""
    return np.argsort(prediction_entropy(probs), kind="stable")


def pseudo_label_count(n, r_percent):
    """``floor(r/100 * n)``, at least 1 for a non-empty set."""
    if n < 1:
        return 0
    # r * n before dividing keeps integer-valued inputs exact.
    return max(1, min(n, int(math.floor(r_percent * n / 100.0))))


def select_confident(bundle: ModelBundle, target_inputs: np.ndarray, r_percent: float) -> PseudoLabelSet:
    if not 0 < r_percent <= 100:
        raise ConfigError(f"r_percent must lie in (0, 100], got {r_percent}")
    probs = predict_proba(bundle, target_inputs)
    return select_from_probs(probs, r_percent)


def select_from_probs(probs, r_percent):
    """Pseudo-label the lowest-entropy ``r_percent`` of rows in ``probs``."""
    entropies = prediction_entropy(probs)
    order = np.argsort(entropies, kind="stable")
    keep = order[: pseudo_label_count(len(order), r_percent)]
    return PseudoLabelSet(keep, np.argmax(probs[keep], axis=1), entropies[keep], float(r_percent))


def refinement_step(bundle, inputs, pseudo_labels, optimizer: SGD, lr):
    """One SGD step of cross-entropy against pseudo labels, extractor only."""
    if len(pseudo_labels) == 0:
        return bundle
    loss, grads = classification_loss_and_grads(bundle, inputs, np.asarray(pseudo_labels), train_classifier=False)
    if not np.isfinite(loss):
        raise DivergenceError("pseudo-label refinement diverged", loss=loss)
    optimizer.step(bundle.feature_arrays(), grads, lr)
    return bundle


# -- entry point ------------------------------------------------------------------


@dataclass
class EpochSummary:
    epoch: int
    d_loss: float
    g_loss: float
    mean_alpha: float
    discriminator_accuracy: float
    pseudo_label_count: int | None = None
    pseudo_label_agreement: float | None = None


@dataclass
class AdaptationResult:
    bundle: ModelBundle
    epochs: list = field(default_factory=list)


def adapt(
    bundle: ModelBundle,
    gmm: VirtualDomainGMM,
    target_inputs: np.ndarray,
    config: AdaptationConfig,
    *,
    sink=None,
    pseudo_label_monitor=None,
) -> AdaptationResult:
    """Source-free adaptation of ``bundle`` to unlabelled ``target_inputs``.

    Only the pretrained bundle, the virtual domain and raw target inputs are
    accepted; labelled datasets are rejected. ``sink`` receives one dict per
    diagnostic record. ``pseudo_label_monitor``, if given, is called with each
    :class:`PseudoLabelSet` and may return an agreement score for logging;
    it is how an evaluator with held-out labels observes pseudo-label quality
    without the labels entering this function.

    The input bundle is not modified; the adapted copy is returned.
    """
    if not isinstance(target_inputs, np.ndarray):
        raise TypeError(
            f"adapt() takes unlabelled target inputs as an ndarray, got {type(target_inputs).__name__}"
        )
    if not isinstance(bundle, ModelBundle) or not isinstance(gmm, VirtualDomainGMM):
        raise TypeError("adapt() takes a ModelBundle and a VirtualDomainGMM")
    X = np.ascontiguousarray(target_inputs, dtype=bundle.spec.dtype)
    model = bundle.copy()
    states = OptimizerStates.fresh(config)
    rng = np.random.default_rng([config.seed, 2])
    emit = sink or (lambda record: None)

    n_batches = -(-len(X) // config.batch_size)
    total = max(1, config.epochs * n_batches)
    summaries = []
    for epoch in range(config.epochs):
        results = []
        for idx in batch_iterator(len(X), config.batch_size, [config.seed, 3, epoch]):
            states.lr = lr_schedule(config.eta0, min(1.0, states.step / total))
            _, res = alignment_step(model, gmm, X[idx], states, rng)
            results.append(res)
            emit({"kind": "step", "step": states.step, "epoch": epoch, **vars(res)})
        summary = EpochSummary(
            epoch,
            float(np.mean([r.d_loss for r in results])),
            float(np.mean([r.g_loss for r in results])),
            float(np.mean([r.mean_alpha for r in results])),
            float(np.mean([r.discriminator_batch_accuracy for r in results])),
        )
        if config.tc_enabled and epoch >= config.warmup_epochs:
            pls = select_confident(model, X, config.r_percent)
            lr_f = states.lr * config.extractor_lr_factor
            for b in batch_iterator(len(pls), config.batch_size, [config.seed, 4, epoch]):
                refinement_step(model, X[pls.sample_indices[b]], pls.labels[b], states.refinement, lr_f)
            summary.pseudo_label_count = len(pls)
            if pseudo_label_monitor is not None:
                summary.pseudo_label_agreement = pseudo_label_monitor(pls)
        emit({"kind": "epoch", **vars(summary)})
        summaries.append(summary)
    model.check_finite()
    return AdaptationResult(model, summaries)
