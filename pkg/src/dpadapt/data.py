"""Controllable two-domain synthetic datasets and CSV ingestion.

A domain pair shares class-mean geometry; the target domain is the
source distribution pushed through a configurable shift (rotation in the
first two coordinates, translation, covariance scaling). The rotation
angle is the single difficulty knob, so class means are placed with a
fixed fraction of their energy in the rotated plane: angle 0 gives an
identical domain, larger angles progressively break a source classifier.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .rng import substream

LABEL_MODES = ("multiclass", "multilabel")


@dataclass
class DomainSpec:
    n_classes: int
    dim: int
    samples_per_class: int
    mean_radius: float = 4.0
    cov_scale: float = 1.0
    rotation_deg: float = 0.0
    translation: object = None  # optional length-dim vector
    cov_multiplier: float = 1.0
    label_mode: str = "multiclass"
    label_noise_rate: float = 0.0
    plane_fraction: float = 0.7  # share of squared mean norm in the rotated plane
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim must be >= 2 (rotation needs two coordinates)")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ConfigError("label_noise_rate must be in [0, 1)")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        if not 0.0 < self.plane_fraction <= 1.0:
            raise ConfigError("plane_fraction must be in (0, 1]")
        if self.cov_multiplier <= 0 or self.cov_scale <= 0 or self.mean_radius <= 0:
            raise ConfigError("scales must be positive")
        if self.translation is not None:
            t = np.asarray(self.translation, dtype=np.float64)
            if t.shape != (self.dim,):
                raise ConfigError(
                    f"translation must have length {self.dim}, got shape {t.shape}"
                )
            self.translation = t


@dataclass
class Dataset:
    x: np.ndarray  # (N, dim)
    y: np.ndarray  # (N,) int labels, or (N, K) 0/1 in multilabel mode
    domain: str
    label_mode: str
    n_classes: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ShapeError("features must be 2-D")
        self.y = np.ascontiguousarray(self.y)
        if self.y.shape[0] != self.x.shape[0]:
            raise ShapeError("feature and label row counts differ")
        if not self.class_names:
            self.class_names = [f"c{i}" for i in range(self.n_classes)]

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]


def class_means(spec):
    """Class means on the sphere of radius mean_radius.

    In-plane components sit at evenly spaced angles (plus a per-seed
    offset); the remaining coordinates get a random direction carrying
    the rest of the norm.
    """
    rng = substream(spec.seed, "data-means")
    k, d, r = spec.n_classes, spec.dim, spec.mean_radius
    frac = 1.0 if d == 2 else spec.plane_fraction
    offset = rng.uniform(0, 2 * np.pi)
    means = np.zeros((k, d))
    angles = offset + 2 * np.pi * np.arange(k) / k
    means[:, 0] = np.cos(angles) * r * np.sqrt(frac)
    means[:, 1] = np.sin(angles) * r * np.sqrt(frac)
    if d > 2 and frac < 1.0:
        rest = rng.normal(size=(k, d - 2))
        rest /= np.linalg.norm(rest, axis=1, keepdims=True)
        means[:, 2:] = rest * r * np.sqrt(1.0 - frac)
    return means


def rotation_matrix(spec):
    theta = np.deg2rad(spec.rotation_deg)
    rot = np.eye(spec.dim)
    rot[0, 0] = rot[1, 1] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    return rot


def generate_pair(spec):
    """(source, target) datasets under one spec.

    Source rows are class Gaussians around the means; source labels get
    uniform flips at label_noise_rate (the auto-labeler noise stand-in).
    Target rows are fresh draws from the shifted distribution: deviations
    scaled by sqrt(cov_multiplier), the whole point rotated in the first
    two coordinates, then translated. Target labels are kept clean; they
    are used only for evaluation, never for adaptation.
    """
    means = class_means(spec)
    n, k = spec.samples_per_class, spec.n_classes
    src_rng = substream(spec.seed, "data-source")
    tgt_rng = substream(spec.seed, "data-target")

    xs = np.vstack(
        [means[c] + spec.cov_scale * src_rng.normal(size=(n, spec.dim)) for c in range(k)]
    )
    true_src = np.repeat(np.arange(k), n)

    dev_scale = spec.cov_scale * np.sqrt(spec.cov_multiplier)
    raw = np.vstack(
        [means[c] + dev_scale * tgt_rng.normal(size=(n, spec.dim)) for c in range(k)]
    )
    xt = raw @ rotation_matrix(spec).T
    if spec.translation is not None:
        xt = xt + spec.translation
    true_tgt = np.repeat(np.arange(k), n)

    if spec.label_mode == "multiclass":
        ys = _flip_labels(true_src, k, spec.label_noise_rate,
                          substream(spec.seed, "data-noise"))
        yt = true_tgt
    else:
        ys = _multilabel_targets(xs, means, spec, substream(spec.seed, "data-ml-src"))
        ys = _flip_bits(ys, spec.label_noise_rate, substream(spec.seed, "data-noise"))
        shifted_means = means @ rotation_matrix(spec).T
        if spec.translation is not None:
            shifted_means = shifted_means + spec.translation
        yt = _multilabel_targets(xt, shifted_means, spec,
                                 substream(spec.seed, "data-ml-tgt"))

    source = Dataset(xs, ys, "source", spec.label_mode, k)
    target = Dataset(xt, yt, "target", spec.label_mode, k)
    return source, target


def _flip_labels(labels, n_classes, rate, rng):
    out = labels.copy()
    if rate <= 0:
        return out
    flip = rng.random(labels.shape[0]) < rate
    for i in np.flatnonzero(flip):
        choices = [c for c in range(n_classes) if c != out[i]]
        out[i] = choices[rng.integers(len(choices))]
    return out


def _flip_bits(y, rate, rng):
    out = y.copy()
    if rate <= 0:
        return out
    flip = rng.random(y.shape) < rate
    out[flip] = 1.0 - out[flip]
    return out


def _multilabel_targets(x, means, spec, rng):
    """Per-class Bernoulli conditioned on proximity to the class mean:
    a row close to mean_k is very likely positive for k, so nearby
    classes can share positives (reports with multiple findings)."""
    dists = np.linalg.norm(x[:, None, :] - means[None, :, :], axis=2)
    scale = spec.cov_scale * np.sqrt(spec.dim)
    nearest = dists.min(axis=1, keepdims=True)
    p = 1.0 / (1.0 + np.exp(4.0 * (dists - nearest - scale / 2) / scale))
    return (rng.random(p.shape) < p).astype(np.float64)


# CSV schema (documented in the README): multiclass files have columns
# feat_0..feat_{d-1},label; multilabel files have feat_* followed by one
# y_<classname> column per class with 0/1 entries.


def write_csv(dataset, path):
    cols = [f"feat_{j}" for j in range(dataset.dim)]
    if dataset.label_mode == "multiclass":
        cols.append("label")
    else:
        cols += [f"y_{name}" for name in dataset.class_names]
    lines = [",".join(cols)]
    for i in range(dataset.n):
        row = [_fmt(v) for v in dataset.x[i]]
        if dataset.label_mode == "multiclass":
            row.append(dataset.class_names[int(dataset.y[i])])
        else:
            row += [str(int(v)) for v in dataset.y[i]]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v):
    return format(float(v), ".17g")


def load_csv(path, schema="auto", domain="source", class_names=None):
    """Parse a feature/label CSV into a Dataset.

    schema: multiclass, multilabel, or auto (inferred from the header).
    Multiclass label strings map to indices in first-seen order unless
    class_names pins the mapping; a label outside a pinned mapping, a
    ragged row, or a non-numeric feature is a ParseError naming its line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln != ""]
    if not lines:
        raise ParseError("empty file", line=1)
    header = lines[0].split(",")
    feat_cols = [c for c in header if c.startswith("feat_")]
    dim = len(feat_cols)
    if header[:dim] != [f"feat_{j}" for j in range(dim)] or dim == 0:
        raise ParseError("header must start with feat_0..feat_{d-1}", line=1)
    rest = header[dim:]
    if schema == "auto":
        schema = "multilabel" if rest and rest[0].startswith("y_") else "multiclass"
    if schema == "multiclass":
        if rest != ["label"]:
            raise ParseError("multiclass header needs a single 'label' column", line=1)
    else:
        if not rest or not all(c.startswith("y_") for c in rest):
            raise ParseError("multilabel header needs y_<class> columns", line=1)

    n_cols = len(header)
    feats, labels = [], []
    if schema == "multiclass":
        mapping = (
            {name: i for i, name in enumerate(class_names)} if class_names else {}
        )
        names = list(class_names) if class_names else []
        pinned = class_names is not None
        for lineno, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != n_cols:
                raise ParseError(
                    f"expected {n_cols} fields, found {len(parts)}", line=lineno
                )
            feats.append(_parse_floats(parts[:dim], lineno))
            lab = parts[dim]
            if lab not in mapping:
                if pinned:
                    raise ParseError(f"unknown label {lab!r}", line=lineno)
                mapping[lab] = len(names)
                names.append(lab)
            labels.append(mapping[lab])
        y = np.array(labels, dtype=np.int64)
        return Dataset(np.array(feats), y, domain, "multiclass", len(names), names)

    names = [c[2:] for c in rest]
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != n_cols:
            raise ParseError(
                f"expected {n_cols} fields, found {len(parts)}", line=lineno
            )
        feats.append(_parse_floats(parts[:dim], lineno))
        bits = []
        for c, raw in zip(rest, parts[dim:]):
            if raw not in ("0", "1"):
                raise ParseError(f"column {c} must be 0 or 1, got {raw!r}", line=lineno)
            bits.append(float(raw))
        labels.append(bits)
    return Dataset(
        np.array(feats), np.array(labels), domain, "multilabel", len(names), names
    )


def _parse_floats(parts, lineno):
    out = []
    for raw in parts:
        try:
            val = float(raw)
        except ValueError:
            raise ParseError(f"non-numeric feature {raw!r}", line=lineno) from None
        if not np.isfinite(val):
            raise ParseError(f"non-finite feature {raw!r}", line=lineno)
        out.append(val)
    return out
