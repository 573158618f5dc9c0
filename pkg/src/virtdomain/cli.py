"""Command-line entry point: ``virtdomain {pretrain,adapt,eval,run,sweep,plot}``.

Configuration comes from an optional YAML/JSON file (``--config``); flags on
the command line override it. Exit status is 0 on success, 1 for usage or
configuration errors and 2 for runtime failures such as divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .adaptation import adapt
from .errors import ConfigError, VirtDomainError
from .harness import (
    ExperimentConfig,
    emit_report,
    execute_pipeline,
    load_domains,
    output_root,
    plot_inputs,
    run_sweep,
    scatter_plot,
)
from .models import evaluate, load_checkpoint, pretrain_source, save_checkpoint
from .virtual_domain import build_virtual_domain, export_gmm_text

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


# (flag, dotted config key, type)
_OVERRIDES = [
    ("--seed", "seed", int),
    ("--lambda", "lam", float),
    ("--r-percent", "r_percent", float),
    ("--eta0", "eta0", float),
    ("--momentum", "momentum", float),
    ("--weight-decay", "weight_decay", float),
    ("--batch-size", "batch_size", int),
    ("--extractor-lr-factor", "extractor_lr_factor", float),
    ("--pretrain-epochs", "pretrain_epochs", int),
    ("--adapt-epochs", "adapt_epochs", int),
    ("--warmup-epochs", "warmup_epochs", int),
    ("--alpha-override", "alpha_override", float),
    ("--metric", "metric", str),
    ("--source-csv", "source_csv", str),
    ("--target-csv", "target_csv", str),
    ("--feature-dim", "network.feature_dim", int),
    ("--hidden-widths", "network.hidden_widths", _ints),
    ("--disc-widths", "network.discriminator_widths", _ints),
    ("--family", "dataset.family", str),
    ("--num-classes", "dataset.num_classes", int),
    ("--input-dim", "dataset.input_dim", int),
    ("--samples-per-class", "dataset.samples_per_class", int),
    ("--rotation", "dataset.rotation_degrees", float),
    ("--scale", "dataset.scale", float),
    ("--noise-std", "dataset.noise_std", float),
    ("--translation", "dataset.translation", _floats),
    ("--data-seed", "dataset.seed", int),
]

_BOOL_FLAGS = [
    ("tc", "tc_enabled"),
    ("normalize-target", "normalize_target_features"),
    ("normalize-virtual", "normalize_virtual_features"),
    ("saturating-generator", "saturating_generator"),
]


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--out", type=Path, help="output directory (default: $VIRTDOMAIN_OUTPUT_ROOT or ./runs)")
    for flag, key, typ in _OVERRIDES:
        p.add_argument(flag, dest=key.replace(".", "__"), type=typ, default=None)
    for flag, key in _BOOL_FLAGS:
        p.add_argument(f"--{flag}", dest=key, action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="virtdomain", description="Source-free adaptation with a virtual domain.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train on the labelled source domain")
    _add_config_args(p)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to the target domain")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("eval", help="per-class target accuracy of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("run", help="pretrain, adapt and evaluate in one go")
    _add_config_args(p)
    p.add_argument("--plot", action="store_true", help="also write features.png")

    p = sub.add_parser("sweep", help="run the pipeline over a parameter grid")
    _add_config_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="dotted config key and values")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--derive-seeds", action="store_true")

    p = sub.add_parser("plot", help="scatter target and virtual features of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def load_config_file(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return data or {}


def config_from_args(args):
    base = load_config_file(args.config) if args.config else {}
    config = ExperimentConfig.from_dict(base)
    overrides = {}
    for _, key, _ in _OVERRIDES:
        value = getattr(args, key.replace(".", "__"))
        if value is not None:
            overrides[key] = value
    for _, key in _BOOL_FLAGS:
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    # keep the network consistent with a resized synthetic dataset
    for dkey, nkey in (("dataset.input_dim", "network.input_dim"), ("dataset.num_classes", "network.num_classes")):
        if dkey in overrides:
            overrides.setdefault(nkey, overrides[dkey])
    return config.with_overrides(overrides) if overrides else config


def _parse_grid(items):
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"--grid expects KEY=V1,V2, got {item!r}")
        grid[key] = [yaml.safe_load(v) for v in values.split(",")]
    if not grid:
        raise ConfigError("sweep needs at least one --grid")
    return grid


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _cmd_pretrain(args, config, out):
    source, target = load_domains(config)
    bundle = pretrain_source(source, config.network, config.pretrain_config())
    path = save_checkpoint(out / "source.npz", bundle, {"stage": "pretrain", "config": config.to_dict()})
    res = evaluate(bundle, target)
    _print({"checkpoint": str(path), "source_only_accuracy": res.average_accuracy})


def _target_of(config):
    _, target = load_domains(config)
    return target


def _cmd_adapt(args, config, out):
    bundle, _ = load_checkpoint(args.checkpoint)
    target = _target_of(config)
    gmm = build_virtual_domain(bundle, config.lam, config.metric)
    records = []
    result = adapt(bundle, gmm, target.unlabeled(), config.adaptation_config(), sink=records.append)
    path = save_checkpoint(out / "adapted.npz", result.bundle, {"stage": "adapt", "config": config.to_dict()})
    (out / "virtual_domain.txt").write_text(export_gmm_text(gmm))
    with open(out / "diagnostics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _print({"checkpoint": str(path), "epochs": len(result.epochs)})


def _cmd_eval(args, config, out):
    bundle, _ = load_checkpoint(args.checkpoint)
    res = evaluate(bundle, _target_of(config))
    _print(
        {
            "per_class_accuracy": res.per_class_accuracy,
            "average_accuracy": res.average_accuracy,
            "absent_classes": res.absent_classes,
        }
    )


def _cmd_run(args, config, out):
    result = execute_pipeline(config)
    plot = None
    if args.plot:
        plot = plot_inputs(result.adapted_bundle, result.gmm, result.target, config)
    emit_report(result.report, out, result.diagnostics, plot)
    save_checkpoint(out / "source.npz", result.source_bundle, {"stage": "pretrain"})
    save_checkpoint(out / "adapted.npz", result.adapted_bundle, {"stage": "adapt"})
    (out / "virtual_domain.txt").write_text(export_gmm_text(result.gmm))
    r = result.report
    _print(
        {
            "out": str(out),
            "source_only_accuracy": r.source_only_accuracy,
            "average_accuracy": r.average_accuracy,
            "per_class_accuracy": r.per_class_accuracy,
        }
    )


def _cmd_sweep(args, config, out):
    points = run_sweep(config, _parse_grid(args.grid), out, workers=args.workers, derive_seeds=args.derive_seeds)
    summary = [
        {
            "index": p.index,
            "overrides": p.overrides,
            "status": p.status,
            "average_accuracy": p.report.average_accuracy if p.report else None,
            "error": p.error,
        }
        for p in points
    ]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _print(summary)
    if any(p.status != "ok" for p in points):
        raise VirtDomainError(f"{sum(p.status != 'ok' for p in points)} sweep point(s) failed")


def _cmd_plot(args, config, out):
    bundle, _ = load_checkpoint(args.checkpoint)
    gmm = build_virtual_domain(bundle, config.lam, config.metric)
    path = scatter_plot(*plot_inputs(bundle, gmm, _target_of(config), config), out / "features.png")
    _print({"plot": str(path)})


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "plot": _cmd_plot,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"virtdomain: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or output_root() / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](args, config, out)
    except ConfigError as exc:
        print(f"virtdomain: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VirtDomainError, OSError, FloatingPointError) as exc:
        print(f"virtdomain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
