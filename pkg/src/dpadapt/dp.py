"""Differentially private training: clip, noise, accumulate, step.

Each iteration samples one batch uniformly without replacement, computes
exact per-example gradients, clips each example's global L2 norm to the
clip norm, adds Gaussian noise scaled by noise_multiplier * clip_norm,
and records one (q, sigma) event in the privacy ledger. One AdamW update
is applied per `accumulation_steps` micro-batches, on their averaged
noisy gradients; noise is added inside the inner loop, so the ledger
carries one event per micro-batch, not per optimizer step.

A per-layer privacy mask restricts clipping and noising to designated
parameter groups (all layers by default; a last-layer-only preset
mirrors perturbing only the final block of a large pretrained encoder).
Unmasked layers receive their plain batch-mean gradients, so the privacy
guarantee covers the masked parameters only.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .accountant import PrivacyLedger
from .errors import ConfigError, DpAdaptError
from .rng import substream


@dataclass
class DpConfig:
    clip_norm: float
    noise_multiplier: float
    batch_size: int
    dataset_size: int
    total_iterations: int
    accumulation_steps: int = 1
    delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(
                f"noise_multiplier must be >= 0, got {self.noise_multiplier}"
            )
        if self.batch_size < 1 or self.batch_size > self.dataset_size:
            raise ConfigError(
                f"batch_size {self.batch_size} must be in [1, dataset_size="
                f"{self.dataset_size}]"
            )
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.total_iterations % self.accumulation_steps != 0:
            raise ConfigError(
                "total_iterations must be a multiple of accumulation_steps"
            )
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0,1), got {self.delta}")

    @property
    def sampling_rate(self):
        return self.batch_size / self.dataset_size


def privacy_mask(mlp, preset="all"):
    """Per-layer boolean mask of which parameter groups are private."""
    n = len(mlp.layers)
    if preset == "all":
        return [True] * n
    if preset == "last-layer":
        return [False] * (n - 1) + [True]
    raise ConfigError(f"unknown privacy mask preset {preset!r}")


def clip_per_example(grads, clip_norm, layer_mask=None):
    """Scale each example's gradient so its global L2 norm over the
    masked layers is at most clip_norm; gradients already under the
    bound are unchanged. Unmasked layers are never scaled."""
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    norms = np.sqrt(grads.sq_norms(layer_mask))
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    if layer_mask is None:
        return grads.scale_examples(factors)
    dw, db = [], []
    for idx, (w, b) in enumerate(zip(grads.dw, grads.db)):
        if layer_mask[idx]:
            dw.append(w * factors[:, None, None])
            db.append(b * factors[:, None])
        else:
            dw.append(w.copy())
            db.append(b.copy())
    return nn.PerExampleGrads(dw, db)


def noise_and_average(clipped, config, rng, layer_mask=None):
    """(sum of clipped gradients + Gaussian noise) / batch rows.

    Noise is N(0, (sigma * clip_norm)^2) i.i.d. per coordinate, added to
    masked layers only. With sigma = 0 no draw is made and the result is
    the exact mean. Returns (grads, (q, sigma)) with the privacy event
    the caller must record.
    """
    n = float(clipped.n_examples)
    std = config.noise_multiplier * config.clip_norm
    grads = []
    for idx, (w, b) in enumerate(zip(clipped.dw, clipped.db)):
        sw = np.sum(w, axis=0)
        sb = np.sum(b, axis=0)
        if std > 0.0 and (layer_mask is None or layer_mask[idx]):
            sw = sw + rng.normal(0.0, std, size=sw.shape)
            sb = sb + rng.normal(0.0, std, size=sb.shape)
        grads.append((sw / n, sb / n))
    return grads, (config.sampling_rate, config.noise_multiplier)


@dataclass
class TrainResult:
    mlp: object
    ledger: object  # None for non-private training
    log: list  # (optimizer step, mean loss, epsilon or "") rows


def dp_train(mlp, x, targets, loss_head, config, ledger=None, layer_mask=None,
             optimizer=None):
    """Private training loop (modifies mlp in place; also returned).

    x: (N, d) features; targets: (N, K) one-hot or binary matrix;
    loss_head(outputs, target_rows) -> (mean loss, per-example output
    gradient), e.g. nn.ce_softmax_loss. One ledger event is recorded per
    sampled micro-batch; the log carries one row per optimizer step with
    the cumulative epsilon at config.delta.
    """
    from . import accountant

    x = nn.as_matrix(x, "features")
    n = x.shape[0]
    if n == 0:
        raise ConfigError("dp_train: empty dataset")
    if n != config.dataset_size:
        raise ConfigError(
            f"dataset has {n} rows but config.dataset_size={config.dataset_size}"
        )
    if ledger is None:
        ledger = PrivacyLedger(delta=config.delta)
    opt = optimizer or nn.AdamW(learning_rate=5e-5)
    events_before = ledger.total_events()

    acc = nn.zero_grads(mlp)
    acc_loss = 0.0
    log = []
    for t in range(config.total_iterations):
        idx = _sample_batch(config.seed, t, n, config.batch_size)
        trace = nn.forward(mlp, x[idx])
        loss, grad_rows = loss_head(trace.outputs, targets[idx])
        per_ex = nn.backward_per_example_from_trace(mlp, trace, grad_rows)
        clipped = clip_per_example(per_ex, config.clip_norm, layer_mask)
        noise_rng = substream(config.seed, "dp-noise", t)
        noisy, event = noise_and_average(clipped, config, noise_rng, layer_mask)
        ledger.record(*event)
        nn.add_grads(acc, noisy)
        acc_loss += loss
        if (t + 1) % config.accumulation_steps == 0:
            scale = 1.0 / config.accumulation_steps
            opt.update(mlp, nn.scale_grads(acc, scale))
            eps = accountant.to_eps_delta(
                accountant.compose(ledger), config.delta
            ).epsilon
            log.append((opt.step_count, acc_loss * scale, eps))
            acc = nn.zero_grads(mlp)
            acc_loss = 0.0

    recorded = ledger.total_events() - events_before
    if recorded != config.total_iterations:
        raise DpAdaptError(
            f"ledger out of sync: {recorded} events for "
            f"{config.total_iterations} sampled batches"
        )
    return TrainResult(mlp, ledger, log)


def train_plain(mlp, x, targets, loss_head, steps, batch_size, seed,
                optimizer=None):
    """Non-private counterpart of dp_train.

    Uses the same batch substreams and the same per-example-then-mean
    gradient reduction, so dp_train with sigma = 0, a clip norm above
    every gradient norm, and accumulation_steps = 1 is bit-identical.
    """
    x = nn.as_matrix(x, "features")
    n = x.shape[0]
    if n == 0:
        raise ConfigError("train_plain: empty dataset")
    if batch_size < 1 or batch_size > n:
        raise ConfigError(f"batch_size {batch_size} must be in [1, {n}]")
    opt = optimizer or nn.AdamW(learning_rate=5e-5)
    log = []
    for t in range(steps):
        idx = _sample_batch(seed, t, n, batch_size)
        trace = nn.forward(mlp, x[idx])
        loss, grad_rows = loss_head(trace.outputs, targets[idx])
        per_ex = nn.backward_per_example_from_trace(mlp, trace, grad_rows)
        opt.update(mlp, per_ex.mean())
        log.append((opt.step_count, loss, ""))
    return TrainResult(mlp, None, log)


def _sample_batch(seed, iteration, n, batch_size):
    rng = substream(seed, "dp-batch", iteration)
    return rng.choice(n, size=batch_size, replace=False)
