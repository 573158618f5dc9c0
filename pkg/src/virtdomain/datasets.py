"""Synthetic domain-shift generators, CSV I/O and mini-batching.

Two families are provided:

* ``blobs``: isotropic Gaussian classes. The first two coordinates hold a
  ring of class means; when ``input_dim > 2`` each class also gets a
  class-specific offset along one extra coordinate. The target domain moves
  the means by a rotation of the first two coordinates, a scale and a
  translation, then draws fresh noise.
* ``moons``: the classic two interleaving half circles, with the target
  rotated about the data centroid.

Generators are pure functions of their :class:`ShiftSpec`.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError, TabularParseError, UnsupportedSpecError

MIN_SEPARATION = 6.0  # in units of noise_std


@dataclass
class DomainDataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    domain_tag: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigError(f"inputs must be a non-empty 2-D array, got shape {self.inputs.shape}")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError("inputs contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ConfigError("labels must have one entry per input row")
            if self.labels.min() < 0:
                raise ConfigError("labels must be non-negative")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def unlabeled(self):
        """The inputs alone, as handed to source-free adaptation."""
        return self.inputs


@dataclass(frozen=True)
class ShiftSpec:
    """Synthetic source/target pair description.

    ``ring_radius`` and ``offset_radius`` place the blob means and are
    measured in units of ``noise_std``.
    """

    family: str = "blobs"
    num_classes: int = 4
    samples_per_class: int = 500
    input_dim: int = 16
    rotation_degrees: float = 45.0
    translation: tuple = field(default_factory=tuple)
    scale: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    ring_radius: float = 5.0
    offset_radius: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if self.family not in ("blobs", "moons"):
            raise ConfigError(f"unknown dataset family {self.family!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be positive")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2")
        if self.translation and len(self.translation) != self.input_dim:
            raise ConfigError("translation must be empty or have input_dim entries")

    def to_dict(self):
        d = asdict(self)
        d["translation"] = list(self.translation)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rotation_matrix(dim, degrees):
    """Rotation acting on the first two coordinates only."""
    R = np.eye(dim)
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def apply_shift(points, spec, pivot=None):
    """Rotate (first two coords) about ``pivot``, scale, then translate."""
    points = np.asarray(points, dtype=np.float64)
    pivot = np.zeros(points.shape[1]) if pivot is None else np.asarray(pivot, dtype=np.float64)
    R = rotation_matrix(points.shape[1], spec.rotation_degrees)
    out = (points - pivot) @ R.T * spec.scale + pivot
    if spec.translation:
        out = out + np.asarray(spec.translation)
    return out


def blob_means(spec):
    """Source class means; see module docstring for the layout."""
    K, D = spec.num_classes, spec.input_dim
    means = np.zeros((K, D))
    theta = 2 * np.pi * np.arange(K) / K
    means[:, 0] = spec.ring_radius * spec.noise_std * np.cos(theta)
    means[:, 1] = spec.ring_radius * spec.noise_std * np.sin(theta)
    if D > 2 and spec.offset_radius > 0:
        for k in range(K):
            means[k, 2 + k % (D - 2)] += spec.offset_radius * spec.noise_std
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    min_sep = dist[~np.eye(K, dtype=bool)].min()
    if min_sep < MIN_SEPARATION * spec.noise_std - 1e-9:
        raise ConfigError(
            f"blob means are {min_sep / spec.noise_std:.2f} noise_std apart; need >= {MIN_SEPARATION}"
        )
    return means


def _draw(means, n_per_class, noise_std, rng):
    K, D = means.shape
    labels = np.repeat(np.arange(K), n_per_class)
    X = means[labels] + noise_std * rng.standard_normal((K * n_per_class, D))
    return X, labels


def make_blobs_pair(spec: ShiftSpec):
    """Source and shifted target blobs, both labelled (target labels are for
    evaluation only)."""
    if spec.family != "blobs":
        raise UnsupportedSpecError(f"make_blobs_pair needs family 'blobs', got {spec.family!r}")
    means = blob_means(spec)
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    Xs, ys = _draw(means, spec.samples_per_class, spec.noise_std, src_rng)
    Xt, yt = _draw(apply_shift(means, spec), spec.samples_per_class, spec.noise_std, tgt_rng)
    return (
        DomainDataset(Xs, ys, "source", spec.seed),
        DomainDataset(Xt, yt, "target", spec.seed),
    )


MOONS_CENTROID = (0.5, 0.25)


def moon_curves(n):
    """Noise-free points on the two half circles, ``n`` per class."""
    t = np.linspace(0.0, np.pi, n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return np.concatenate([upper, lower]), np.repeat([0, 1], n)


def make_moons_pair(spec: ShiftSpec):
    if spec.family != "moons":
        raise UnsupportedSpecError(f"make_moons_pair needs family 'moons', got {spec.family!r}")
    if spec.num_classes != 2 or spec.input_dim != 2:
        raise UnsupportedSpecError("two moons is defined only for num_classes=2, input_dim=2")
    base, labels = moon_curves(spec.samples_per_class)
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    Xs = base + spec.noise_std * src_rng.standard_normal(base.shape)
    Xt = apply_shift(base, spec, pivot=MOONS_CENTROID) + spec.noise_std * tgt_rng.standard_normal(base.shape)
    return (
        DomainDataset(Xs, labels, "source", spec.seed),
        DomainDataset(Xt, labels.copy(), "target", spec.seed),
    )


def make_pair(spec: ShiftSpec):
    return make_blobs_pair(spec) if spec.family == "blobs" else make_moons_pair(spec)


@dataclass(frozen=True)
class TabularSchema:
    input_dim: int
    num_classes: int | None = None


def save_tabular(path, data: DomainDataset):
    """Write ``f0,...,f{d-1}[,label]`` CSV with 17 significant digits."""
    d = data.input_dim
    header = [f"f{i}" for i in range(d)] + (["label"] if data.labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i, row in enumerate(data.inputs):
            cells = [format(float(v), ".17g") for v in row]
            if data.labels is not None:
                cells.append(str(int(data.labels[i])))
            fh.write(",".join(cells) + "\n")
    return Path(path)


def load_tabular(path, schema: TabularSchema, domain_tag=None):
    d = schema.input_dim
    feat_header = [f"f{i}" for i in range(d)]
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TabularParseError("empty file; header row required", line=1) from None
        header = [h.strip() for h in header]
        if header == feat_header:
            has_label = False
        elif header == feat_header + ["label"]:
            has_label = True
        else:
            raise SchemaError(f"header {header} does not match f0..f{d - 1}[,label]")
        width = d + has_label
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise TabularParseError(f"expected {width} fields, got {len(row)}", line=line)
            try:
                rows.append([float(v) for v in row[:d]])
                if has_label:
                    labels.append(int(row[d]))
            except ValueError as exc:
                raise TabularParseError(str(exc), line=line) from None
            if has_label and schema.num_classes is not None and not 0 <= labels[-1] < schema.num_classes:
                raise SchemaError(f"line {line}: label {labels[-1]} outside [0, {schema.num_classes})")
    if not rows:
        raise TabularParseError("no data rows")
    return DomainDataset(
        np.array(rows), np.array(labels) if has_label else None, domain_tag or Path(path).stem
    )


def batch_iterator(data, batch_size, shuffle_seed=None):
    """Split ``range(N)`` into index batches, shuffled by ``shuffle_seed``.

    ``data`` may be a dataset or a plain count. The last batch keeps the
    remainder. ``shuffle_seed=None`` keeps the natural order.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = data if isinstance(data, (int, np.integer)) else len(data)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
