"""Diagonal-covariance Gaussian mixtures over feature space.

Per-class mixtures are the shareable surrogate for source data: the
target side resamples labeled features from them instead of ever seeing
source rows. Fitting is plain EM with log-space responsibilities,
k-means++-style seeding, and a variance floor.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .backend import K
from .errors import ConfigError, ShapeError
from .nn import as_matrix
from .rng import substream

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6

# Reserved class key for the single unlabeled mixture behind the pooled
# flag; per-class models may not use it.
POOLED_KEY = "__pooled__"


@dataclass
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal
    n_iter: int = field(default=0, compare=False)  # M-steps used by em_fit

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.means = as_matrix(self.means, "means")
        self.variances = as_matrix(self.variances, "variances")
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.variances.shape != (k, d):
            raise ShapeError("mixture parameter shapes disagree")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must sum to 1")
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-12)):
            raise ConfigError(f"variances must be >= {VAR_FLOOR}")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.shape[0]


def log_density_rows(model, x):
    """Per-row log density under the mixture."""
    x = as_matrix(x, "features")
    if x.shape[1] != model.dim:
        raise ShapeError(f"features have dim {x.shape[1]}, model has {model.dim}")
    comp = K.gmm_log_components(
        x, model.means, model.variances, np.log(model.weights)
    )
    return K.logsumexp_rows(comp)


def log_likelihood(model, x):
    """Mean per-row log density."""
    return float(log_density_rows(model, x).mean())


def em_fit(x, k, tol=1e-6, max_iter=200, seed=0, rng=None, return_trace=False):
    """Fit a k-component diagonal GMM by EM.

    Stops when the mean log-likelihood improves by less than tol, or
    after max_iter M-steps. A component that loses all responsibility
    mass is re-seeded from a random data point (logged). The returned
    model's n_iter records how many M-steps ran, so refitting with
    max_iter = n_iter reproduces it exactly. With return_trace=True the
    per-iteration mean log-likelihoods come back alongside the model.
    """
    x = as_matrix(x, "features")
    n, d = x.shape
    if k < 1:
        raise ConfigError(f"component count must be >= 1, got {k}")
    if n < k:
        raise ConfigError(f"need at least {k} rows to fit {k} components, got {n}")
    rng = rng or substream(seed, "gmm-init")

    data_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    means = _kmeanspp_seeds(x, k, rng)
    variances = np.tile(data_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    trace = []
    prev_ll = None
    n_iter = 0
    for _ in range(max_iter):
        comp = K.gmm_log_components(x, means, variances, np.log(weights))
        lse = K.logsumexp_rows(comp)
        ll = float(lse.mean())
        trace.append(ll)
        if prev_ll is not None and abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
        resp = np.exp(comp - lse[:, None])

        mass = resp.sum(axis=0)
        dead = np.flatnonzero(mass < n * 1e-12)
        safe_mass = np.maximum(mass, 1e-300)
        weights = mass / mass.sum()
        means = np.einsum("bk,bd->kd", resp, x, optimize=False) / safe_mass[:, None]
        for c in range(k):
            sq = (x - means[c]) ** 2
            variances[c] = (
                np.einsum("b,bd->d", resp[:, c], sq, optimize=False) / safe_mass[c]
            )
        for c in dead:
            log.warning("re-seeding degenerate mixture component %d", c)
            means[c] = x[rng.integers(n)]
            variances[c] = data_var
            weights[c] = 1.0 / n
        if dead.size:
            weights = weights / weights.sum()
        variances = np.maximum(variances, VAR_FLOOR)
        n_iter += 1

    model = Gmm(weights, means, variances, n_iter=n_iter)
    return (model, trace) if return_trace else model


def _kmeanspp_seeds(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [K.row_sq_norms(x - c) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:  # all points coincide with a center
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def sample(model, n, rng):
    """Draw n points; returns (features (n,d), component ids (n,))."""
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    ids = rng.choice(model.n_components, size=n, p=model.weights)
    noise = rng.normal(size=(n, model.dim))
    x = model.means[ids] + noise * np.sqrt(model.variances[ids])
    return x, ids


def bic(model, x):
    """Bayesian information criterion (diagnostic for choosing k)."""
    x = as_matrix(x, "features")
    n = x.shape[0]
    k, d = model.means.shape
    n_params = (k - 1) + 2 * k * d
    return -2.0 * n * log_likelihood(model, x) + n_params * np.log(n)


@dataclass
class ClassGmms:
    """One mixture per class label, sharing a feature dimension.

    class_priors are the source label frequencies, used to draw labeled
    resamples with realistic class balance.
    """

    models: dict
    class_priors: dict
    dim: int

    def __post_init__(self):
        for label, model in self.models.items():
            if model.dim != self.dim:
                raise ShapeError(f"class {label!r} model dim {model.dim} != {self.dim}")
        if set(self.models) != set(self.class_priors):
            raise ConfigError("models and class_priors must cover the same classes")

    @property
    def labels(self):
        return sorted(self.models)

    @property
    def pooled(self):
        return list(self.models) == [POOLED_KEY]


def fit_class_conditional(x, labels, k_per_class, seed=0, tol=1e-6, max_iter=200,
                          n_classes=None):
    """Fit one GMM per class.

    A class with fewer rows than k_per_class gets its component count
    reduced to its row count (logged). Classes expected by n_classes but
    absent from the data are a configuration error.
    """
    x = as_matrix(x, "features")
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise ShapeError("features and labels must have equal row counts")
    present = sorted(int(c) for c in np.unique(labels))
    if n_classes is not None:
        missing = sorted(set(range(n_classes)) - set(present))
        if missing:
            raise ConfigError(f"classes with no source rows: {missing}")
    models, priors = {}, {}
    for c in present:
        rows = _canonical_rows(x[labels == c])
        k = min(k_per_class, rows.shape[0])
        if k < k_per_class:
            log.warning(
                "class %s has %d rows; reducing mixture components to %d",
                c, rows.shape[0], k,
            )
        models[c] = em_fit(rows, k, tol=tol, max_iter=max_iter,
                           rng=substream(seed, "gmm", c))
        priors[c] = rows.shape[0] / x.shape[0]
    return ClassGmms(models, priors, dim=x.shape[1])


def _canonical_rows(rows):
    # Lexicographic row order makes the fit independent of how the
    # dataset happened to be ordered.
    return rows[np.lexsort(rows.T[::-1])]


def fit_pooled(x, k, seed=0, tol=1e-6, max_iter=200):
    """Single unlabeled mixture over all rows (pooled mode)."""
    x = as_matrix(x, "features")
    model = em_fit(_canonical_rows(x), k, tol=tol, max_iter=max_iter,
                   rng=substream(seed, "gmm", POOLED_KEY))
    return ClassGmms({POOLED_KEY: model}, {POOLED_KEY: 1.0}, dim=x.shape[1])


def sample_labeled(class_gmms, n, rng):
    """Draw n labeled feature rows; classes follow the stored priors.

    In pooled mode the labels are all -1 (the mixture is unlabeled).
    """
    if class_gmms.pooled:
        x, _ = sample(class_gmms.models[POOLED_KEY], n, rng)
        return x, np.full(n, -1, dtype=np.int64)
    labels = class_gmms.labels
    priors = np.array([class_gmms.class_priors[c] for c in labels])
    picks = rng.choice(len(labels), size=n, p=priors / priors.sum())
    x = np.empty((n, class_gmms.dim))
    y = np.empty(n, dtype=np.int64)
    for i, c in enumerate(labels):  # fixed class order keeps draws deterministic
        mask = picks == i
        count = int(mask.sum())
        if count:
            x[mask], _ = sample(class_gmms.models[c], count, rng)
            y[mask] = c
    return x, y
