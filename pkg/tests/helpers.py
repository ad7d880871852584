"""Independent oracles shared by the test modules.

These deliberately avoid the library's vectorized code paths: scalar
loops and finite differences only, so they can catch errors in the
kernels they cross-check.
"""

import math

import numpy as np

from dpadapt import nn


def scalar_forward(mlp, batch):
    """Reference MLP evaluation with plain Python loops."""
    batch = np.asarray(batch, dtype=np.float64)
    rows = []
    for i in range(batch.shape[0]):
        h = list(batch[i])
        for layer in mlp.layers:
            d_in, d_out = layer.w.shape
            z = []
            for j in range(d_out):
                acc = float(layer.b[j])
                for k in range(d_in):
                    acc += h[k] * float(layer.w[k, j])
                z.append(acc)
            if layer.activation == "relu":
                h = [max(v, 0.0) for v in z]
            elif layer.activation == "sigmoid":
                h = [1.0 / (1.0 + math.exp(-v)) for v in z]
            else:
                h = z
        rows.append(h)
    return np.array(rows)


def scalar_softmax(row, temperature=1.0):
    vals = [v / temperature for v in row]
    hi = max(vals)
    exps = [math.exp(v - hi) for v in vals]
    s = sum(exps)
    return [e / s for e in exps]


def fd_per_example_grads(mlp, batch, loss_rows_fn, h=1e-5):
    """Central-difference per-example gradients.

    loss_rows_fn maps network outputs (B, K) to per-example losses (B,).
    Returns [(dW, db)] per layer with dW of shape (B, d_in, d_out).
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]

    def losses():
        return loss_rows_fn(nn.forward(mlp, batch).outputs)

    out = []
    for layer in mlp.layers:
        dw = np.zeros((n,) + layer.w.shape)
        db = np.zeros((n,) + layer.b.shape)
        for idx in np.ndindex(layer.w.shape):
            orig = layer.w[idx]
            layer.w[idx] = orig + h
            up = losses()
            layer.w[idx] = orig - h
            down = losses()
            layer.w[idx] = orig
            dw[(slice(None),) + idx] = (up - down) / (2 * h)
        for j in range(layer.b.shape[0]):
            orig = layer.b[j]
            layer.b[j] = orig + h
            up = losses()
            layer.b[j] = orig - h
            down = losses()
            layer.b[j] = orig
            db[:, j] = (up - down) / (2 * h)
        out.append((dw, db))
    return out


def rel_err(analytic, numeric):
    """max over entries of |a - n| / max(1, |a|), the gradient-check metric."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_logit_grad(loss_fn, logits, h=1e-6):
    """Central-difference gradient of a scalar loss over a logit matrix."""
    logits = np.asarray(logits, dtype=np.float64).copy()
    g = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        orig = logits[idx]
        logits[idx] = orig + h
        up = loss_fn(logits)
        logits[idx] = orig - h
        down = loss_fn(logits)
        logits[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def random_mlp(rng, n_layers=None, max_dim=6, final_activation="identity"):
    """Small random network for gradient checks."""
    n_layers = n_layers or rng.integers(1, 4)
    dims = [int(rng.integers(2, max_dim + 1)) for _ in range(n_layers + 1)]
    acts = ["relu"] * (n_layers - 1) + [final_activation]
    mlp = nn.init_mlp(dims, acts, rng)
    for layer in mlp.layers:  # non-zero biases exercise the bias path
        layer.b[:] = rng.normal(0.0, 0.3, size=layer.b.shape)
    return mlp
