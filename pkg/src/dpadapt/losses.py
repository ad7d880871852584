"""Adaptation objectives: distillation, information maximization, and
the DANN/CDAN adversarial pair.

Gradients are returned explicitly (there is no autograd here); every
grad is checked against finite differences in the tests. The adversarial
steps use explicit alternation, one discriminator update then one
encoder update, instead of a gradient-reversal layer; the objective is
the same and each half is verifiable on its own.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .nn import PROB_FLOOR, as_matrix

ADAPT_METHODS = ("dann", "cdan")


@dataclass
class AdaptConfig:
    method: str = "cdan"
    temperature: float = 20.0
    lambda_kd: float = 1.0
    lambda_im: float = 1.0
    lambda_adv: float = 1.0
    learning_rate: float = 1e-5
    steps: int = 1000
    batch_size: int = 64
    seed: int = 0
    resample_mode: str = "fresh"  # fresh draw per step, or one static pool
    resample_count: int = 0  # pool size N_s; 0 means steps * batch_size
    disc_hidden: int = 32
    conditioning: str = "outer"  # cdan conditioning map: outer | concat

    def __post_init__(self):
        if self.method not in ADAPT_METHODS:
            raise ConfigError(f"method must be one of {ADAPT_METHODS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        for name in ("lambda_kd", "lambda_im", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.resample_mode not in ("fresh", "pool"):
            raise ConfigError("resample_mode must be 'fresh' or 'pool'")
        if self.conditioning not in ("outer", "concat"):
            raise ConfigError("conditioning must be 'outer' or 'concat'")


def kd_loss(source_logits, target_logits, temperature):
    """Temperature-softened distillation between two logit sets.

    The source distribution softmax(source_logits / t) is the fixed
    teacher; returns (loss, gradient w.r.t. target_logits). Loss is
    t^2 times the mean row-wise cross-entropy.
    """
    s = as_matrix(source_logits, "source_logits")
    z = as_matrix(target_logits, "target_logits")
    if s.shape != z.shape:
        raise ShapeError(f"logit shapes differ: {s.shape} vs {z.shape}")
    t = float(temperature)
    p = nn.softmax_rows(s, t)
    q = nn.softmax_rows(z, t)
    loss = t * t * float(
        -(p * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=1).mean()
    )
    grad = t * (q - p) / z.shape[0]
    return loss, grad


def kd_loss_multilabel(source_logits, target_logits, temperature):
    """Per-class binary softening for the multi-label mode: each class
    is distilled through sigmoid(logit / t) independently."""
    s = as_matrix(source_logits, "source_logits")
    z = as_matrix(target_logits, "target_logits")
    if s.shape != z.shape:
        raise ShapeError(f"logit shapes differ: {s.shape} vs {z.shape}")
    t = float(temperature)
    p = nn._sigmoid(s / t)
    q = np.clip(nn._sigmoid(z / t), PROB_FLOOR, 1.0 - PROB_FLOOR)
    per_class = -(p * np.log(q) + (1.0 - p) * np.log1p(-q))
    loss = t * t * float(per_class.sum(axis=1).mean())
    grad = t * (nn._sigmoid(z / t) - p) / z.shape[0]
    return loss, grad


@dataclass
class ImLoss:
    ent: float
    div: float
    total: float
    grad: np.ndarray  # d(total)/d(logits)


def im_loss(target_logits):
    """Information maximization on a batch of target logits.

    ent is the mean per-row prediction entropy (drives confident rows);
    div is sum_k g_k log g_k for the batch-mean prediction g (drives
    class balance; it is minus the entropy of g). The minimized total is
    ent + div: zero for uniform predictions, -log K for confident rows
    spread evenly over K classes.
    """
    z = as_matrix(target_logits, "target_logits")
    if z.shape[1] < 2:
        raise ConfigError("information maximization needs at least 2 classes")
    b = z.shape[0]
    p = nn.softmax_rows(z)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    ent_rows = -(p * logp).sum(axis=1)
    l_ent = float(ent_rows.mean())
    g = p.mean(axis=0)
    logg = np.log(np.maximum(g, PROB_FLOOR))
    l_div = float((g * logg).sum())

    grad_ent = -p * (logp + ent_rows[:, None]) / b
    grad_div = p * (logg[None, :] - (p * logg[None, :]).sum(axis=1, keepdims=True)) / b
    return ImLoss(l_ent, l_div, l_ent + l_div, grad_ent + grad_div)


def make_discriminator(in_dim, hidden, rng):
    """3-layer fully connected domain discriminator with sigmoid output."""
    return nn.init_mlp(
        [in_dim, hidden, hidden, 1], ["relu", "relu", "sigmoid"], rng
    )


def _clamped(d):
    return np.clip(d, PROB_FLOOR, 1.0 - PROB_FLOOR)


def disc_loss(d_source, d_target):
    """-E log D(source) - E log(1 - D(target)); 2 ln 2 at D = 1/2.

    Returns (loss, grad w.r.t. d_source, grad w.r.t. d_target).
    """
    ds = _clamped(d_source)
    dt = _clamped(d_target)
    loss = float(-np.log(ds).mean() - np.log1p(-dt).mean())
    return loss, -1.0 / (ds * ds.shape[0]), 1.0 / ((1.0 - dt) * dt.shape[0])


def generator_loss(d_target):
    """Non-saturating encoder objective -E log D(target): pushes target
    features toward the discriminator's source side."""
    dt = _clamped(d_target)
    loss = float(-np.log(dt).mean())
    return loss, -1.0 / (dt * dt.shape[0])


def _update_disc(disc, disc_opt, src_in, tgt_in):
    src_trace = nn.forward(disc, src_in)
    tgt_trace = nn.forward(disc, tgt_in)
    loss, g_src, g_tgt = disc_loss(src_trace.outputs, tgt_trace.outputs)
    grads = nn.backward_mean(disc, src_trace, g_src)
    nn.add_grads(grads, nn.backward_mean(disc, tgt_trace, g_tgt))
    disc_opt.update(disc, grads)
    return loss


def _encoder_adv_grad(disc, tgt_in, lambda_adv):
    """Generator loss and its gradient w.r.t. the discriminator input."""
    trace = nn.forward(disc, tgt_in)
    loss, g_out = generator_loss(trace.outputs)
    if lambda_adv == 0.0:
        return loss, np.zeros_like(tgt_in)
    return loss, lambda_adv * nn.backward_input(disc, trace, g_out)


def dann_step(encoder, disc, source_feats, target_batch, enc_opt, disc_opt,
              lambda_adv=1.0, extra=None):
    """One DANN alternation.

    (a) discriminator step: separate resampled source features (label
    "source") from the current target features, encoder frozen;
    (b) encoder step: adversarial generator term plus any extra
    objective, discriminator frozen. `extra(features)` may return
    (named losses dict, gradient w.r.t. features) to fold distillation
    and information-maximization terms into the same encoder update.
    Returns the named losses of this step.
    """
    src = as_matrix(source_feats, "source_feats")
    trace_t = nn.forward(encoder, target_batch)
    f_t = trace_t.outputs
    if src.shape[1] != f_t.shape[1]:
        raise ShapeError(
            f"source features dim {src.shape[1]} != encoder output {f_t.shape[1]}"
        )

    d_loss = _update_disc(disc, disc_opt, src, f_t)
    g_loss, d_feat = _encoder_adv_grad(disc, f_t, lambda_adv)

    losses = {"disc": d_loss, "gen": g_loss}
    if extra is not None:
        extra_losses, extra_grad = extra(f_t)
        losses.update(extra_losses)
        d_feat = d_feat + extra_grad
    enc_opt.update(encoder, nn.backward_mean(encoder, trace_t, d_feat))
    return losses


def _condition(feats, probs, mode):
    if mode == "concat":
        return np.concatenate([feats, probs], axis=1)
    b, d = feats.shape
    return (feats[:, :, None] * probs[:, None, :]).reshape(b, -1)


def _condition_feat_grad(grad_u, probs, dim, mode):
    if mode == "concat":
        return grad_u[:, :dim]
    b = grad_u.shape[0]
    return np.einsum(
        "bdk,bk->bd", grad_u.reshape(b, dim, -1), probs, optimize=False
    )


def conditioning_dim(feature_dim, n_classes, mode):
    return feature_dim + n_classes if mode == "concat" else feature_dim * n_classes


def cdan_step(encoder, classifier, disc, source_feats, target_batch, enc_opt,
              disc_opt, lambda_adv=1.0, extra=None, conditioning="outer",
              prediction="softmax"):
    """One CDAN alternation.

    The discriminator sees the conditioning map of (features, class
    prediction): source side (z_s, C(z_s)) with z_s resampled from the
    shared mixtures, target side (E_t(x), C(E_t(x))). Predictions are
    softmax rows (sigmoid per class in multilabel mode), treated as
    constants: no gradient flows through the classifier into the
    conditioning, and neither the classifier nor the source side is
    ever updated.
    """
    src = as_matrix(source_feats, "source_feats")
    trace_t = nn.forward(encoder, target_batch)
    f_t = trace_t.outputs
    if src.shape[1] != f_t.shape[1]:
        raise ShapeError(
            f"source features dim {src.shape[1]} != encoder output {f_t.shape[1]}"
        )
    predict = nn.softmax_rows if prediction == "softmax" else nn._sigmoid
    p_src = predict(nn.forward(classifier, src).outputs)
    p_tgt = predict(nn.forward(classifier, f_t).outputs)
    u_src = _condition(src, p_src, conditioning)
    u_tgt = _condition(f_t, p_tgt, conditioning)

    d_loss = _update_disc(disc, disc_opt, u_src, u_tgt)
    g_loss, d_u = _encoder_adv_grad(disc, u_tgt, lambda_adv)
    d_feat = _condition_feat_grad(d_u, p_tgt, f_t.shape[1], conditioning)

    losses = {"disc": d_loss, "gen": g_loss}
    if extra is not None:
        extra_losses, extra_grad = extra(f_t)
        losses.update(extra_losses)
        d_feat = d_feat + extra_grad
    enc_opt.update(encoder, nn.backward_mean(encoder, trace_t, d_feat))
    return losses
