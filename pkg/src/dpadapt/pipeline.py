"""The three-step protocol: private source pretraining, share-package
construction, target-side adaptation; plus evaluation and embedding
export.

The target side only ever touches the share package: adaptation reads
the frozen encoder/classifier weights and the per-class mixtures, never
source rows or labels, and the privacy ledger gains no events after
pretraining (mixture fitting is post-processing).
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import accountant, dp, gmm, losses, nn, share
from .errors import ConfigError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class ModelSpec:
    """Encoder layout: input -> hidden (relu each) -> feature_dim
    (identity); the classifier is a linear map feature_dim -> K."""

    hidden: tuple = (64, 32)
    feature_dim: int = 16

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.feature_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("model dims must be positive")


@dataclass
class PrivacySpec:
    """How to privatize pretraining. target_epsilon > 0 calibrates the
    noise multiplier through the accountant; otherwise noise_multiplier
    is used as given."""

    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    target_epsilon: float = 0.0
    delta: float = 1e-5
    accumulation_steps: int = 1
    mask: str = "all"  # or "last-layer"


@dataclass
class PretrainResult:
    encoder: nn.Mlp
    classifier: nn.Mlp
    ledger: object  # PrivacyLedger or None
    log: list
    sigma: float = 0.0


def build_model(input_dim, n_classes, spec, rng):
    dims = [input_dim, *spec.hidden, spec.feature_dim]
    acts = ["relu"] * len(spec.hidden) + ["identity"]
    encoder = nn.init_mlp(dims, acts, rng)
    classifier = nn.init_mlp([spec.feature_dim, n_classes], ["identity"], rng)
    return encoder, classifier


def _stacked(encoder, classifier):
    return nn.Mlp(list(encoder.layers) + list(classifier.layers))


def _split(stacked, n_encoder_layers):
    return (
        nn.Mlp(list(stacked.layers[:n_encoder_layers])),
        nn.Mlp(list(stacked.layers[n_encoder_layers:])),
    )


def _loss_head(label_mode):
    return nn.ce_softmax_loss if label_mode == "multiclass" else nn.bce_sigmoid_loss


def _targets(dataset):
    if dataset.label_mode == "multiclass":
        return nn.one_hot(dataset.y, dataset.n_classes)
    return np.asarray(dataset.y, dtype=np.float64)


def pretrain_source(dataset, model_spec=None, steps=600, batch_size=64,
                    learning_rate=5e-5, seed=0, privacy=None):
    """Train the source encoder and classifier jointly.

    Cross-entropy in multiclass mode, per-class binary cross-entropy in
    multilabel mode. With a PrivacySpec the whole run goes through the
    DP optimizer; steps then counts privatized micro-batches, and one
    optimizer step happens per accumulation_steps of them.
    """
    if dataset.n == 0:
        raise ConfigError("pretrain_source: empty dataset")
    spec = model_spec or ModelSpec()
    if dataset.label_mode == "multiclass" and int(np.max(dataset.y)) >= dataset.n_classes:
        raise ConfigError("label index outside the declared class count")
    encoder, classifier = build_model(
        dataset.dim, dataset.n_classes, spec, substream(seed, "init")
    )
    model = _stacked(encoder, classifier)
    head = _loss_head(dataset.label_mode)
    targets = _targets(dataset)
    opt = nn.AdamW(learning_rate=learning_rate)

    if steps == 0:
        return PretrainResult(*_split(model, len(encoder.layers)), None, [])

    if privacy is None:
        result = dp.train_plain(model, dataset.x, targets, head, steps,
                                batch_size, seed, optimizer=opt)
        ledger, sigma = None, 0.0
    else:
        q = batch_size / dataset.n
        sigma = privacy.noise_multiplier
        if privacy.target_epsilon > 0:
            sigma = accountant.noise_for_epsilon(
                q, steps, privacy.target_epsilon, privacy.delta
            )
            log.info("calibrated noise multiplier %.4f for epsilon<=%.3g",
                     sigma, privacy.target_epsilon)
        cfg = dp.DpConfig(
            clip_norm=privacy.clip_norm,
            noise_multiplier=sigma,
            batch_size=batch_size,
            dataset_size=dataset.n,
            total_iterations=steps,
            accumulation_steps=privacy.accumulation_steps,
            delta=privacy.delta,
            seed=seed,
        )
        mask = dp.privacy_mask(model, privacy.mask)
        result = dp.dp_train(model, dataset.x, targets, head, cfg,
                             layer_mask=mask, optimizer=opt)
        ledger = result.ledger

    encoder, classifier = _split(model, len(encoder.layers))
    return PretrainResult(encoder, classifier, ledger, result.log, sigma)


def build_share(encoder, classifier, dataset, k_per_class=6, ledger=None,
                seed=0, pooled=False, config_digest=""):
    """Assemble the share package from a trained source model.

    Computes penultimate features for every source row, fits the
    per-class mixtures (or one pooled mixture), and attaches the privacy
    receipt. The ledger is read, never written: this step is
    post-processing and must add no privacy events.
    """
    digest_before = ledger.digest() if ledger is not None else None
    feats = nn.forward(encoder, dataset.x).outputs
    if pooled:
        mixtures = gmm.fit_pooled(feats, k_per_class, seed=seed)
    elif dataset.label_mode == "multiclass":
        mixtures = gmm.fit_class_conditional(
            feats, dataset.y, k_per_class, seed=seed, n_classes=dataset.n_classes
        )
    else:
        mixtures = _fit_per_positive_class(feats, dataset, k_per_class, seed)
    receipt = share.receipt_from_ledger(ledger)
    if digest_before is not None and ledger.digest() != digest_before:
        raise ConfigError("share construction must not alter the privacy ledger")
    return share.SharePackage(
        encoder=encoder.copy(),
        classifier=classifier.copy(),
        gmms=mixtures,
        privacy=receipt,
        class_names=list(dataset.class_names),
        label_mode=dataset.label_mode,
        seed=seed,
        config_digest=config_digest,
    )


def _fit_per_positive_class(feats, dataset, k_per_class, seed):
    """Multilabel sharing unit: one mixture per class, fitted on the rows
    positive for that class (rows with several findings join several fits)."""
    y = np.asarray(dataset.y)
    models, priors = {}, {}
    total = 0
    for c in range(dataset.n_classes):
        rows = feats[y[:, c] > 0.5]
        if rows.shape[0] == 0:
            raise ConfigError(f"class {dataset.class_names[c]} has no positive rows")
        k = min(k_per_class, rows.shape[0])
        if k < k_per_class:
            log.warning("class %s has %d positives; reducing components to %d",
                        dataset.class_names[c], rows.shape[0], k)
        models[c] = gmm.em_fit(
            gmm._canonical_rows(rows), k, rng=substream(seed, "gmm", c)
        )
        priors[c] = rows.shape[0]
        total += rows.shape[0]
    priors = {c: v / total for c, v in priors.items()}
    return gmm.ClassGmms(models, priors, dim=feats.shape[1])


@dataclass
class AdaptResult:
    encoder: nn.Mlp
    log: list  # (step, kd, im_ent, im_div, disc, gen) rows


def adapt_target(pkg, target, cfg=None):
    """Adapt a target encoder against the share package.

    The target encoder starts as a copy of the shared source encoder.
    Each step draws a target batch and a fresh batch of source features
    from the package mixtures (or a slice of one static pool), runs a
    DANN or CDAN alternation, and folds the distillation and
    information-maximization terms into the encoder update. The package
    contents, the classifier, and the privacy receipt are never written.
    """
    cfg = cfg or losses.AdaptConfig()
    if target.dim != pkg.encoder.input_dim:
        raise ConfigError(
            f"target dim {target.dim} != encoder input {pkg.encoder.input_dim}"
        )
    if cfg.batch_size > target.n:
        raise ConfigError("adaptation batch size exceeds the target dataset")
    multilabel = pkg.label_mode == "multilabel"
    lambda_im = cfg.lambda_im
    if multilabel and lambda_im > 0:
        warnings.warn(
            "information maximization is defined for multiclass outputs only; "
            "disabling it in multilabel mode",
            stacklevel=2,
        )
        lambda_im = 0.0

    enc = pkg.encoder.copy()
    clf = pkg.classifier
    d_s, k = pkg.feature_dim, pkg.n_classes
    disc_in = (
        d_s if cfg.method == "dann"
        else losses.conditioning_dim(d_s, k, cfg.conditioning)
    )
    disc = losses.make_discriminator(
        disc_in, cfg.disc_hidden, substream(cfg.seed, "adapt-init")
    )
    enc_opt = nn.AdamW(learning_rate=cfg.learning_rate)
    disc_opt = nn.AdamW(learning_rate=cfg.learning_rate)

    pool = None
    if cfg.resample_mode == "pool":
        n_pool = cfg.resample_count or cfg.steps * cfg.batch_size
        pool, _ = gmm.sample_labeled(pkg.gmms, n_pool, substream(cfg.seed, "adapt-pool"))

    kd_fn = losses.kd_loss_multilabel if multilabel else losses.kd_loss
    rows = []
    for t in range(cfg.steps):
        bidx = substream(cfg.seed, "adapt-batch", t).choice(
            target.n, size=cfg.batch_size, replace=False
        )
        x_t = target.x[bidx]
        draw = substream(cfg.seed, "adapt-gmm", t)
        if pool is None:
            z_s, _ = gmm.sample_labeled(pkg.gmms, cfg.batch_size, draw)
        else:
            z_s = pool[draw.choice(pool.shape[0], size=cfg.batch_size, replace=False)]

        teacher_logits = nn.forward(clf, nn.forward(pkg.encoder, x_t).outputs).outputs

        def extra(f_t):
            clf_trace = nn.forward(clf, f_t)
            logits = clf_trace.outputs
            named = {"kd": 0.0, "im_ent": 0.0, "im_div": 0.0}
            grad = np.zeros_like(logits)
            if cfg.lambda_kd > 0:
                kd_v, kd_g = kd_fn(teacher_logits, logits, cfg.temperature)
                named["kd"] = kd_v
                grad += cfg.lambda_kd * kd_g
            if lambda_im > 0:
                im = losses.im_loss(logits)
                named["im_ent"], named["im_div"] = im.ent, im.div
                grad += lambda_im * im.grad
            return named, nn.backward_input(clf, clf_trace, grad)

        if cfg.method == "dann":
            out = losses.dann_step(enc, disc, z_s, x_t, enc_opt, disc_opt,
                                   cfg.lambda_adv, extra)
        else:
            out = losses.cdan_step(enc, clf, disc, z_s, x_t, enc_opt, disc_opt,
                                   cfg.lambda_adv, extra, cfg.conditioning,
                                   prediction="sigmoid" if multilabel else "softmax")
        rows.append((t, out["kd"], out["im_ent"], out["im_div"],
                     out["disc"], out["gen"]))
    return AdaptResult(enc, rows)


ADAPT_LOG_HEADER = ("step", "kd", "im_ent", "im_div", "disc", "gen")
TRAIN_LOG_HEADER = ("step", "loss", "epsilon")


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    per_class: list
    macro_precision: float = field(init=False)
    macro_recall: float = field(init=False)
    macro_f1: float = field(init=False)

    def __post_init__(self):
        self.macro_precision = float(np.mean([c.precision for c in self.per_class]))
        self.macro_recall = float(np.mean([c.recall for c in self.per_class]))
        self.macro_f1 = float(np.mean([c.f1 for c in self.per_class]))


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def evaluate(encoder, classifier, dataset, mode=None):
    """Per-class precision/recall/F1 plus macro averages.

    Multiclass: argmax predictions scored one-vs-rest per class.
    Multilabel: per-class sigmoid threshold at 0.5.
    """
    if dataset.n == 0:
        raise ConfigError("evaluate: empty dataset")
    mode = mode or dataset.label_mode
    logits = nn.forward(classifier, nn.forward(encoder, dataset.x).outputs).outputs
    per_class = []
    if mode == "multiclass":
        preds = np.argmax(logits, axis=1)
        y = np.asarray(dataset.y)
        for c in range(dataset.n_classes):
            tp = int(np.sum((preds == c) & (y == c)))
            fp = int(np.sum((preds == c) & (y != c)))
            fn = int(np.sum((preds != c) & (y == c)))
            per_class.append(
                ClassMetrics(dataset.class_names[c], *_prf(tp, fp, fn),
                             support=int(np.sum(y == c)))
            )
    else:
        probs = nn._sigmoid(logits)
        y = np.asarray(dataset.y) > 0.5
        preds = probs >= 0.5
        for c in range(dataset.n_classes):
            tp = int(np.sum(preds[:, c] & y[:, c]))
            fp = int(np.sum(preds[:, c] & ~y[:, c]))
            fn = int(np.sum(~preds[:, c] & y[:, c]))
            per_class.append(
                ClassMetrics(dataset.class_names[c], *_prf(tp, fp, fn),
                             support=int(np.sum(y[:, c])))
            )
    return Metrics(per_class)


def metrics_csv(metrics):
    """Table-shaped rows: one line per class plus the macro average."""
    lines = ["class,precision,recall,f1,support"]
    for c in metrics.per_class:
        lines.append(
            f"{c.name},{_f(c.precision)},{_f(c.recall)},{_f(c.f1)},{c.support}"
        )
    total = sum(c.support for c in metrics.per_class)
    lines.append(
        "macro_average,"
        f"{_f(metrics.macro_precision)},{_f(metrics.macro_recall)},"
        f"{_f(metrics.macro_f1)},{total}"
    )
    return "\n".join(lines) + "\n"


def _f(v):
    return format(float(v), ".17g")


def pca2(feats):
    """Deterministic 2-D PCA: covariance eigendecomposition, components
    signed so their largest-magnitude coordinate is positive."""
    feats = np.asarray(feats, dtype=np.float64)
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / feats.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    comps = []
    for idx in (-1, -2):
        v = evecs[:, idx].copy()
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
    basis = np.stack(comps, axis=1)
    return centered @ basis, evals[[-1, -2]]


def export_embeddings(encoder, dataset, projection="none"):
    """(header, rows) of encoder features, optionally PCA-projected."""
    if projection not in ("none", "pca2"):
        raise ConfigError(f"unknown projection {projection!r}")
    feats = nn.forward(encoder, dataset.x).outputs
    if projection == "pca2":
        coords, _ = pca2(feats)
    else:
        coords = feats
    header = ["id", "label"] + [f"coord_{j}" for j in range(coords.shape[1])]
    rows = []
    for i in range(dataset.n):
        if dataset.label_mode == "multiclass":
            label = dataset.class_names[int(dataset.y[i])]
        else:
            names = [
                dataset.class_names[c]
                for c in range(dataset.n_classes)
                if dataset.y[i, c] > 0.5
            ]
            label = "|".join(names)
        rows.append([str(i), label] + [_f(v) for v in coords[i]])
    return header, rows
