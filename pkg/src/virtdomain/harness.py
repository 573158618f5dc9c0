"""Experiment orchestration: pretrain, build the virtual domain, adapt, evaluate.

The pipeline is source-free after pretraining: the labelled source dataset is
created and consumed inside :func:`_pretrain_stage` and is verified to be
unreachable (via weak references) before :func:`~virtdomain.adaptation.adapt`
is called.
"""
from __future__ import annotations

import copy
import dataclasses
import gc
import hashlib
import itertools
import json
import logging
import os
import time
import weakref
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .adaptation import AdaptationConfig, adapt
from .datasets import ShiftSpec, TabularSchema, load_tabular, make_pair
from .errors import ConfigError, SourceLeakError, StageError
from .models import NetworkSpec, PretrainConfig, evaluate, forward_features, pretrain_source
from .optim import lr_schedule
from .virtual_domain import (
    DEFAULT_LAMBDA,
    DistanceMetric,
    build_virtual_domain,
    sample_virtual_batch,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "VIRTDOMAIN_OUTPUT_ROOT"
REPORT_SCHEMA_VERSION = 1

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "PipelineResult",
    "emit_report",
    "execute_pipeline",
    "lr_schedule",
    "output_root",
    "run_pipeline",
    "run_sweep",
]


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _default_network():
    return NetworkSpec(input_dim=16, feature_dim=16, num_classes=4)


@dataclass
class ExperimentConfig:
    network: NetworkSpec = field(default_factory=_default_network)
    lam: float = DEFAULT_LAMBDA
    r_percent: float = 70.0
    eta0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    extractor_lr_factor: float = 0.1
    pretrain_epochs: int = 100
    adapt_epochs: int = 30
    warmup_epochs: int = 1
    tc_enabled: bool = True
    alpha_override: float | None = None
    metric: DistanceMetric = DistanceMetric.SQUARED_EUCLIDEAN
    normalize_target_features: bool = True
    normalize_virtual_features: bool = True
    saturating_generator: bool = False
    seed: int = 0
    dataset: ShiftSpec = field(default_factory=ShiftSpec)
    source_csv: str | None = None
    target_csv: str | None = None

    def __post_init__(self):
        self.metric = DistanceMetric(self.metric)
        for name in ("lam", "eta0", "extractor_lr_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.r_percent <= 100:
            raise ConfigError("r_percent must lie in (0, 100]")
        if self.batch_size < 1 or self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay >= 0")
        if (self.source_csv is None) != (self.target_csv is None):
            raise ConfigError("source_csv and target_csv must be given together")
        if self.source_csv is None:
            if self.dataset.input_dim != self.network.input_dim:
                raise ConfigError("dataset.input_dim must equal network.input_dim")
            if self.dataset.num_classes != self.network.num_classes:
                raise ConfigError("dataset.num_classes must equal network.num_classes")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["network"] = self.network.to_dict()
        d["dataset"] = self.dataset.to_dict()
        d["metric"] = self.metric.value
        return d

    @classmethod
    def from_dict(cls, d):
        """Build from a possibly partial mapping; missing keys take defaults."""
        merged = _deep_merge(cls().to_dict(), d or {})
        unknown = set(merged) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            merged["network"] = NetworkSpec.from_dict(merged["network"])
            merged["dataset"] = ShiftSpec.from_dict(merged["dataset"])
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def pretrain_config(self):
        return PretrainConfig(
            self.pretrain_epochs, self.batch_size, self.eta0, self.momentum, self.weight_decay, self.seed
        )

    def adaptation_config(self):
        return AdaptationConfig(
            epochs=self.adapt_epochs,
            batch_size=self.batch_size,
            eta0=self.eta0,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            extractor_lr_factor=self.extractor_lr_factor,
            r_percent=self.r_percent,
            tc_enabled=self.tc_enabled,
            normalize_target_features=self.normalize_target_features,
            normalize_virtual_features=self.normalize_virtual_features,
            saturating_generator=self.saturating_generator,
            alpha_override=self.alpha_override,
            warmup_epochs=self.warmup_epochs,
            seed=self.seed,
        )

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides, e.g. ``{"dataset.seed": 3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, leaf = key.split(".")
            for part in path:
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class MetricsReport:
    per_class_accuracy: list
    average_accuracy: float
    source_only_accuracy: float
    source_only_per_class: list
    absent_classes: list
    loss_curves: dict
    mean_alpha_curve: list
    discriminator_accuracy_curve: list
    pseudo_label_count_curve: list
    pseudo_label_agreement_curve: list
    config_hash: str
    seed: int
    config: dict
    backend: str
    wall_time_seconds: float = 0.0
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self, include_wall_time=True):
        d = dataclasses.asdict(self)
        if not include_wall_time:
            d.pop("wall_time_seconds")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def deterministic_json(self):
        """Canonical JSON of every field except wall time."""
        return json.dumps(self.to_dict(include_wall_time=False), sort_keys=True, indent=2) + "\n"


@dataclass
class PipelineResult:
    report: MetricsReport
    diagnostics: list
    source_bundle: object
    adapted_bundle: object
    gmm: object
    target: object


def load_domains(config):
    if config.source_csv is not None:
        schema = TabularSchema(config.network.input_dim, config.network.num_classes)
        return (
            load_tabular(config.source_csv, schema, "source"),
            load_tabular(config.target_csv, schema, "target"),
        )
    return make_pair(config.dataset)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        return inner

    return wrap


@_stage("pretrain")
def _pretrain_stage(config, leak=None):
    """Generate data and pretrain. The labelled source set never leaves this
    frame; weak references to it are returned so the caller can prove it has
    been released. ``leak`` exists only so tests can simulate a leak."""
    source, target = _stage("data")(load_domains)(config)
    refs = [weakref.ref(source), weakref.ref(source.inputs)]
    if source.labels is not None:
        refs.append(weakref.ref(source.labels))
    bundle = pretrain_source(source, config.network, config.pretrain_config())
    if leak is not None:
        leak.append(source)
    del source
    return bundle, target, refs


def assert_source_released(refs):
    gc.collect()
    alive = [r for r in refs if r() is not None]
    if alive:
        raise SourceLeakError(f"{len(alive)} source object(s) still reachable before adaptation")


def execute_pipeline(config: ExperimentConfig, sink=None, _leak=None) -> PipelineResult:
    """Run every stage and keep intermediate artefacts (bundles, mixture)."""
    t0 = time.perf_counter()
    diagnostics = []

    def record(rec):
        diagnostics.append(rec)
        if sink is not None:
            sink(rec)

    bundle, target, source_refs = _pretrain_stage(config, _leak)
    source_only = _stage("evaluate")(evaluate)(bundle, target)
    gmm = _stage("virtual_domain")(build_virtual_domain)(bundle, config.lam, config.metric)
    _stage("source_free_check")(assert_source_released)(source_refs)

    labels = target.labels

    def agreement(pls):
        if labels is None:
            return None
        return float(np.mean(labels[pls.sample_indices] == pls.labels))

    result = _stage("adapt")(adapt)(
        bundle, gmm, target.unlabeled(), config.adaptation_config(), sink=record, pseudo_label_monitor=agreement
    )
    final = _stage("evaluate")(evaluate)(result.bundle, target)
    epochs = result.epochs
    report = MetricsReport(
        per_class_accuracy=final.per_class_accuracy,
        average_accuracy=final.average_accuracy,
        source_only_accuracy=source_only.average_accuracy,
        source_only_per_class=source_only.per_class_accuracy,
        absent_classes=final.absent_classes,
        loss_curves={"d_loss": [e.d_loss for e in epochs], "g_loss": [e.g_loss for e in epochs]},
        mean_alpha_curve=[e.mean_alpha for e in epochs],
        discriminator_accuracy_curve=[e.discriminator_accuracy for e in epochs],
        pseudo_label_count_curve=[e.pseudo_label_count for e in epochs],
        pseudo_label_agreement_curve=[e.pseudo_label_agreement for e in epochs],
        config_hash=config.config_hash(),
        seed=config.seed,
        config=config.to_dict(),
        backend=kernels.BACKEND,
        wall_time_seconds=time.perf_counter() - t0,
    )
    return PipelineResult(report, diagnostics, bundle, result.bundle, gmm, target)


def run_pipeline(config: ExperimentConfig) -> MetricsReport:
    return execute_pipeline(config).report


def emit_report(report, out_dir, diagnostics=None, plot=None):
    """Write ``report.json`` (all fields), ``metrics.json`` (wall time
    excluded, byte-stable across identical runs), ``diagnostics.jsonl`` and,
    when ``plot`` is given as ``(target_features, target_labels,
    virtual_features, virtual_labels)``, ``features.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    written.append(path)
    path = out / "metrics.json"
    path.write_text(report.deterministic_json())
    written.append(path)
    if diagnostics is not None:
        path = out / "diagnostics.jsonl"
        with open(path, "w") as fh:
            for rec in diagnostics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(path)
    if plot is not None:
        written.append(scatter_plot(*plot, out / "features.png"))
    return written


def load_report(path):
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def project_2d(*feature_sets):
    """Shared PCA projection of several feature sets onto two components."""
    stacked = np.concatenate(feature_sets)
    mean = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - mean, full_matrices=False)
    basis = vt[:2].T
    return [(f - mean) @ basis for f in feature_sets]


def scatter_plot(target_features, target_labels, virtual_features, virtual_labels, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t2, v2 = project_2d(np.asarray(target_features), np.asarray(virtual_features))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(t2[:, 0], t2[:, 1], c=target_labels, cmap="tab10", s=6, alpha=0.5, label="target")
    ax.scatter(v2[:, 0], v2[:, 1], c=virtual_labels, cmap="tab10", s=30, marker="*", edgecolors="k", linewidths=0.3, label="virtual")
    ax.legend(loc="best")
    ax.set_title("target vs virtual features (PCA)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_inputs(bundle, gmm, target, config, n_virtual=400):
    """Features for :func:`scatter_plot`, normalised the way the
    discriminator sees them."""
    f = forward_features(bundle, target.inputs)
    if config.normalize_target_features:
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    fv, yv = sample_virtual_batch(gmm, n_virtual, np.random.default_rng([config.seed, 9]))
    if config.normalize_virtual_features:
        fv = fv / np.linalg.norm(fv, axis=1, keepdims=True)
    labels = target.labels if target.labels is not None else np.zeros(len(f), dtype=int)
    return f, labels, fv, yv


# -- sweeps -------------------------------------------------------------------


def expand_grid(grid):
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def _point_seed(base_seed, index):
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0] % (2**31))


def _run_point(config_dict, path):
    config = ExperimentConfig.from_dict(config_dict)
    try:
        report = run_pipeline(config)
        payload = {"status": "ok", "config_hash": config.config_hash(), "report": report.to_dict()}
    except Exception as exc:  # recorded per point, never aborts the sweep
        payload = {"status": "failed", "config_hash": config.config_hash(), "error": f"{type(exc).__name__}: {exc}"}
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    tmp.replace(path)
    return payload


@dataclass
class SweepPoint:
    index: int
    overrides: dict
    status: str
    report: MetricsReport | None = None
    error: str | None = None
    resumed: bool = False


def run_sweep(base_config, parameter_grid, out_dir, workers=1, derive_seeds=False):
    """Run the pipeline for every combination in ``parameter_grid``.

    Each point writes ``point-XXX.json`` as soon as it finishes; points whose
    file already holds a successful result for the same config are skipped,
    so an interrupted sweep can be resumed by calling again. Failed points
    are recorded and re-attempted on the next call. With ``derive_seeds``
    each point gets its own seed derived from the base seed and its index.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = expand_grid(parameter_grid)
    jobs, results = [], {}
    for i, overrides in enumerate(points):
        ov = dict(overrides)
        if derive_seeds and "seed" not in ov:
            ov["seed"] = _point_seed(base_config.seed, i)
        config = base_config.with_overrides(ov)
        path = out / f"point-{i:03d}.json"
        if path.exists():
            saved = json.loads(path.read_text())
            if saved.get("status") == "ok" and saved.get("config_hash") == config.config_hash():
                results[i] = SweepPoint(i, ov, "ok", MetricsReport.from_dict(saved["report"]), resumed=True)
                continue
        jobs.append((i, ov, config.to_dict(), path))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            payloads = list(pool.map(_run_point, [j[2] for j in jobs], [j[3] for j in jobs]))
    else:
        payloads = [_run_point(j[2], j[3]) for j in jobs]
    for (i, ov, _, _), payload in zip(jobs, payloads):
        if payload["status"] == "ok":
            results[i] = SweepPoint(i, ov, "ok", MetricsReport.from_dict(payload["report"]))
        else:
            log.warning("sweep point %d failed: %s", i, payload["error"])
            results[i] = SweepPoint(i, ov, "failed", error=payload["error"])
    return [results[i] for i in range(len(points))]
