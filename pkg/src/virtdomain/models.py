"""Feature extractor / classifier / discriminator networks.

Networks are plain stacks of dense layers held as lists of ``(weight, bias)``
pairs with ``weight`` shaped ``(fan_in, fan_out)``. Hidden layers use a
rectifier; the last layer of every stack is linear. The classifier is a
single bias-free matrix ``W`` of shape ``(K, d)`` so ``logits = f @ W.T`` and
each row of ``W`` doubles as a class prototype.

Gradients are written out by hand (see :func:`mlp_backward`) and verified
against central finite differences in the test suite.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .datasets import DomainDataset, batch_iterator
from .errors import (
    ConfigError,
    DegenerateDatasetError,
    DivergenceError,
    InputShapeError,
    InvalidValueError,
)
from .optim import SGD, lr_schedule

CHECKPOINT_SCHEMA_VERSION = 1

# Discriminator output columns; the virtual domain is the positive class.
TARGET_DOMAIN = 0
VIRTUAL_DOMAIN = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the three sub-networks.

    ``feature_layer=False`` together with empty ``hidden_widths`` gives an
    identity feature extractor (requires ``input_dim == feature_dim``).
    """

    input_dim: int
    feature_dim: int
    num_classes: int
    hidden_widths: tuple = (64,)
    discriminator_widths: tuple = (1024, 1024)
    feature_layer: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "discriminator_widths", tuple(int(w) for w in self.discriminator_widths))
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ConfigError("input_dim and feature_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_widths + self.discriminator_widths):
            raise ConfigError("all layer widths must be >= 1")
        if not self.feature_layer:
            if self.hidden_widths:
                raise ConfigError("feature_layer=False is only valid with no hidden layers")
            if self.input_dim != self.feature_dim:
                raise ConfigError("identity feature extractor needs input_dim == feature_dim")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def extractor_widths(self):
        if not self.feature_layer:
            return (self.input_dim,)
        return (self.input_dim, *self.hidden_widths, self.feature_dim)

    @property
    def full_discriminator_widths(self):
        return (self.feature_dim, *self.discriminator_widths, 2)

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["discriminator_widths"] = list(self.discriminator_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_mlp(widths, rng, dtype=np.float64):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append((w, b))
    return layers


def mlp_forward(layers, x):
    """Run a dense stack; returns ``(output, activations)``.

    ``activations[i]`` is the input to layer ``i`` and ``activations[-1]``
    is the output, which is what :func:`mlp_backward` needs.
    """
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = kernels.dense_forward(h, w, b, i != last)
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, grad_out, need_input_grad=False):
    """Backpropagate ``grad_out`` through a stack run by :func:`mlp_forward`.

    Returns ``(grads, grad_input)`` with ``grads`` aligned to ``layers``.
    """
    grads = [None] * len(layers)
    g = grad_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        w, _ = layers[i]
        need = need_input_grad or i > 0
        gw, gb, g = kernels.dense_backward(acts[i], w, acts[i + 1], np.ascontiguousarray(g), i != last, need)
        grads[i] = (gw, gb)
    return grads, g


@dataclass
class ModelBundle:
    spec: NetworkSpec
    feature_params: list
    classifier_weights: np.ndarray
    discriminator_params: list = field(default_factory=list)

    def copy(self):
        def cp(layers):
            return [(w.copy(), b.copy()) for w, b in layers]

        return ModelBundle(
            self.spec, cp(self.feature_params), self.classifier_weights.copy(), cp(self.discriminator_params)
        )

    @staticmethod
    def _named(prefix, layers):
        out = {}
        for i, (w, b) in enumerate(layers):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def feature_arrays(self):
        """Live references to extractor parameters, keyed by name."""
        return self._named("feature", self.feature_params)

    def discriminator_arrays(self):
        return self._named("discriminator", self.discriminator_params)

    def named_arrays(self):
        out = self.feature_arrays()
        out["classifier.weight"] = self.classifier_weights
        out.update(self.discriminator_arrays())
        return out

    def check_finite(self):
        for name, a in self.named_arrays().items():
            if not np.all(np.isfinite(a)):
                raise InvalidValueError(f"parameter {name} contains non-finite values")


def named_grads(prefix, grads):
    out = {}
    for i, (gw, gb) in enumerate(grads):
        out[f"{prefix}.{i}.weight"] = gw
        out[f"{prefix}.{i}.bias"] = gb
    return out


def init_bundle(spec, seed):
    """Fresh parameters for all three sub-networks, deterministic in ``seed``."""
    dtype = np.dtype(spec.dtype)
    f_rng, c_rng, d_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    feature = init_mlp(spec.extractor_widths, f_rng, dtype) if spec.feature_layer else []
    bound = 1.0 / np.sqrt(spec.feature_dim)
    classifier = c_rng.uniform(-bound, bound, size=(spec.num_classes, spec.feature_dim)).astype(dtype)
    disc = init_mlp(spec.full_discriminator_widths, d_rng, dtype)
    return ModelBundle(spec, feature, classifier, disc)


def _as_batch(X, dim, dtype, what):
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputShapeError(f"{what}: expected shape (n, {dim}), got {X.shape}")
    if X.shape[0] == 0:
        raise InputShapeError(f"{what}: empty batch")
    return np.ascontiguousarray(X, dtype=dtype)


def extract_features(bundle, X):
    """Like :func:`forward_features` but also returns activations for backprop."""
    X = _as_batch(X, bundle.spec.input_dim, bundle.spec.dtype, "forward_features")
    return mlp_forward(bundle.feature_params, X)


def forward_features(bundle, X):
    """Map a batch of inputs to feature vectors of length ``d``."""
    return extract_features(bundle, X)[0]


def classify(bundle, f):
    """Logits ``f @ W.T`` for a batch of feature vectors."""
    f = _as_batch(f, bundle.spec.feature_dim, bundle.spec.dtype, "classify")
    return f @ bundle.classifier_weights.T


def softmax_probs(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    if np.isnan(logits).any():
        raise InvalidValueError("softmax_probs: NaN in logits")
    return kernels.softmax(np.ascontiguousarray(logits))


def predict_proba(bundle, X):
    return softmax_probs(classify(bundle, forward_features(bundle, X)))


def predict(bundle, X):
    return np.argmax(classify(bundle, forward_features(bundle, X)), axis=1)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    logp = kernels.log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    """Gradient of :func:`cross_entropy` with respect to the logits."""
    n = len(labels)
    g = kernels.softmax(np.ascontiguousarray(logits, dtype=np.float64))
    g[np.arange(n), labels] -= 1.0
    g /= n
    return g.astype(logits.dtype, copy=False)


def classification_loss_and_grads(bundle, X, y, train_classifier=True):
    """Cross-entropy of ``classify(forward_features(X))`` and its gradients.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to arrays
    (extractor always, classifier only when ``train_classifier``).
    """
    f, acts = extract_features(bundle, X)
    W = bundle.classifier_weights
    logits = f @ W.T
    loss = cross_entropy(logits, y)
    g_logits = cross_entropy_grad(logits, y)
    grads = {}
    if train_classifier:
        grads["classifier.weight"] = g_logits.T @ f
    if bundle.feature_params:
        g_f = g_logits @ W
        layer_grads, _ = mlp_backward(bundle.feature_params, acts, g_f)
        grads.update(named_grads("feature", layer_grads))
    return loss, grads


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    eta0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0


def pretrain_source(source: DomainDataset, spec: NetworkSpec, opt: PretrainConfig) -> ModelBundle:
    """Train extractor and classifier on labelled source data with SGD.

    The discriminator in the returned bundle is freshly initialised and
    untouched. Deterministic in ``opt.seed``.
    """
    if source.labels is None:
        raise DegenerateDatasetError("source dataset has no labels")
    y = np.asarray(source.labels)
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise DegenerateDatasetError(f"source labels must lie in [0, {spec.num_classes})")
    counts = np.bincount(y, minlength=spec.num_classes)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise DegenerateDatasetError(f"source classes with zero samples: {empty}")

    bundle = init_bundle(spec, opt.seed)
    X = np.ascontiguousarray(source.inputs, dtype=spec.dtype)
    params = bundle.feature_arrays()
    params["classifier.weight"] = bundle.classifier_weights
    sgd = SGD(opt.momentum, opt.weight_decay)
    n_batches = -(-len(X) // opt.batch_size)
    total = max(1, opt.epochs * n_batches)
    it = 0
    for epoch in range(opt.epochs):
        for idx in batch_iterator(len(X), opt.batch_size, [opt.seed, 1, epoch]):
            loss, grads = classification_loss_and_grads(bundle, X[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError("source pretraining diverged", step=it, loss=loss)
            sgd.step(params, grads, lr_schedule(opt.eta0, it / total))
            it += 1
    return bundle


@dataclass
class EvaluationResult:
    per_class_accuracy: list
    average_accuracy: float
    absent_classes: list
    overall_accuracy: float


def per_class_accuracy(y_true, y_pred, num_classes):
    """Per-class recall and its unweighted mean; classes absent from
    ``y_true`` are reported as None and left out of the mean."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    per_class, absent = [], []
    for k in range(num_classes):
        mask = y_true == k
        if not mask.any():
            per_class.append(None)
            absent.append(k)
        else:
            per_class.append(float(np.mean(y_pred[mask] == k)))
    present = [a for a in per_class if a is not None]
    avg = float(np.mean(present)) if present else float("nan")
    overall = float(np.mean(y_true == y_pred)) if len(y_true) else float("nan")
    return EvaluationResult(per_class, avg, absent, overall)


def evaluate(bundle: ModelBundle, data: DomainDataset) -> EvaluationResult:
    if data.labels is None:
        raise DegenerateDatasetError("evaluate needs a labelled dataset")
    return per_class_accuracy(data.labels, predict(bundle, data.inputs), bundle.spec.num_classes)


def save_checkpoint(path, bundle, metadata=None):
    """Write ``bundle`` as an ``.npz`` archive of named arrays.

    A JSON metadata block (schema version, network spec and any extra keys
    such as ``config_hash`` and ``seed``) is stored under ``__metadata__``.
    """
    meta = {"schema_version": CHECKPOINT_SCHEMA_VERSION, "network": bundle.spec.to_dict()}
    meta.update(metadata or {})
    arrays = dict(bundle.named_arrays())
    arrays["__metadata__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(bundle, metadata)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__metadata__"]))
        if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ConfigError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
        spec = NetworkSpec.from_dict(meta["network"])

        def layers(prefix, n):
            return [(z[f"{prefix}.{i}.weight"].copy(), z[f"{prefix}.{i}.bias"].copy()) for i in range(n)]

        n_feat = len(spec.extractor_widths) - 1 if spec.feature_layer else 0
        bundle = ModelBundle(
            spec,
            layers("feature", n_feat),
            z["classifier.weight"].copy(),
            layers("discriminator", len(spec.full_discriminator_widths) - 1),
        )
    return bundle, meta
