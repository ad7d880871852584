"""Dense feed-forward networks with exact per-example gradients.

All arrays are float64, batch-first, C-contiguous. Everything here is a
pure function of its inputs apart from AdamW.update, which mutates the
parameters and its own moment buffers in place. Summation order is fixed
by the kernel backend, so repeated calls are bit-identical.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import K
from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity", "sigmoid")

# Floor applied inside logs so a zero probability yields a large finite
# loss instead of -inf.
PROB_FLOOR = 1e-12


def as_matrix(x, name="matrix"):
    """Validate/convert to a 2-D float64 C-contiguous array."""
    out = np.ascontiguousarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


@dataclass
class Layer:
    w: np.ndarray  # (d_in, d_out)
    b: np.ndarray  # (d_out,)
    activation: str

    def __post_init__(self):
        self.w = as_matrix(self.w, "layer weight")
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.b.shape != (self.w.shape[1],):
            raise ShapeError(
                f"bias shape {self.b.shape} does not match weight {self.w.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    """An ordered stack of dense layers.

    Encoders and classifiers end in an identity layer (logits);
    discriminators end in a sigmoid layer.
    """

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.w.shape} -> {nxt.w.shape}"
                )

    @property
    def input_dim(self):
        return self.layers[0].w.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].w.shape[1]

    def copy(self):
        return Mlp([Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])

    def num_params(self):
        return sum(l.w.size + l.b.size for l in self.layers)


def init_mlp(dims, activations, rng):
    """He-style initialization: W ~ N(0, 2/fan_in) for relu layers,
    N(0, 1/fan_in) otherwise; biases zero."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims, dims[1:], activations):
        std = np.sqrt((2.0 if act == "relu" else 1.0) / d_in)
        w = rng.normal(0.0, std, size=(d_in, d_out))
        layers.append(Layer(w, np.zeros(d_out), act))
    return Mlp(layers)


def _apply_activation(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_deriv(z, act):
    if act == "relu":
        return (z > 0.0).astype(np.float64)
    if act == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _sigmoid(z):
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardTrace:
    """Intermediate per-layer values needed by the backward passes."""

    inputs: list  # input to each layer, (B, d_in)
    preacts: list  # pre-activation z of each layer, (B, d_out)
    outputs: np.ndarray  # post-activation of the final layer


def forward(mlp, batch):
    """Run the network on a (B, input_dim) batch; returns a ForwardTrace."""
    h = as_matrix(batch, "batch")
    if h.shape[1] != mlp.input_dim:
        raise ShapeError(
            f"batch has {h.shape[1]} columns, network expects {mlp.input_dim}"
        )
    inputs, preacts = [], []
    for layer in mlp.layers:
        inputs.append(h)
        z = K.affine(h, layer.w, layer.b)
        preacts.append(z)
        h = _apply_activation(z, layer.activation)
    return ForwardTrace(inputs, preacts, h)


@dataclass
class PerExampleGrads:
    """Per-example gradients, stacked layer-wise.

    dw[l] has shape (B, d_in, d_out) and db[l] shape (B, d_out); entry i
    is the gradient of example i's own scalar loss contribution.
    """

    dw: list
    db: list

    @property
    def n_examples(self):
        return self.dw[0].shape[0]

    def example(self, i):
        """Gradient set of one example, as [(dW, db)] per layer."""
        return [(w[i], b[i]) for w, b in zip(self.dw, self.db)]

    def mean(self):
        """Batch-mean gradient, as [(dW, db)] per layer.

        Uses the same reduction as the clipped-sum path in the DP
        optimizer, so private training with zero noise and a large clip
        norm is bit-identical to plain training on this mean.
        """
        n = float(self.n_examples)
        return [
            (np.sum(w, axis=0) / n, np.sum(b, axis=0) / n)
            for w, b in zip(self.dw, self.db)
        ]

    def sq_norms(self, layer_mask=None):
        """Per-example squared global L2 norm over (masked) layers."""
        b = self.n_examples
        total = np.zeros(b)
        for idx, (w, bia) in enumerate(zip(self.dw, self.db)):
            if layer_mask is not None and not layer_mask[idx]:
                continue
            total += K.row_sq_norms(w.reshape(b, -1))
            total += K.row_sq_norms(bia.reshape(b, -1))
        return total

    def scale_examples(self, factors):
        """New PerExampleGrads with example i multiplied by factors[i]."""
        f = np.asarray(factors, dtype=np.float64)
        return PerExampleGrads(
            [w * f[:, None, None] for w in self.dw],
            [b * f[:, None] for b in self.db],
        )


def backward_per_example(mlp, batch, output_grad):
    """Per-example parameter gradients for a batch.

    output_grad[i] is the gradient of example i's scalar loss with
    respect to the network outputs (post-activation) of row i.
    """
    trace = forward(mlp, batch)
    return backward_per_example_from_trace(mlp, trace, output_grad)


def backward_per_example_from_trace(mlp, trace, output_grad):
    delta = _check_output_grad(mlp, trace, output_grad)
    dw = [None] * len(mlp.layers)
    db = [None] * len(mlp.layers)
    for l in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[l]
        delta = delta * _activation_deriv(trace.preacts[l], layer.activation)
        dw[l] = K.per_example_outer(trace.inputs[l], delta)
        db[l] = delta
        if l > 0:
            delta = K.matmul_nt(delta, layer.w)
    return PerExampleGrads(dw, db)


def backward_mean(mlp, trace, output_grad):
    """Gradient of one scalar loss, as [(dW, db)] per layer.

    output_grad is d(loss)/d(outputs) with any 1/B factor already
    applied by the caller.
    """
    delta = _check_output_grad(mlp, trace, output_grad)
    grads = [None] * len(mlp.layers)
    for l in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[l]
        delta = delta * _activation_deriv(trace.preacts[l], layer.activation)
        grads[l] = (K.matmul_tn(trace.inputs[l], delta), delta.sum(axis=0))
        if l > 0:
            delta = K.matmul_nt(delta, layer.w)
    return grads


def backward_input(mlp, trace, output_grad):
    """d(loss)/d(batch input), without touching parameter gradients.

    Lets adversarial losses flow through a frozen network (classifier or
    discriminator) into the features that produced its input.
    """
    delta = _check_output_grad(mlp, trace, output_grad)
    for l in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[l]
        delta = delta * _activation_deriv(trace.preacts[l], layer.activation)
        delta = K.matmul_nt(delta, layer.w)
    return delta


def _check_output_grad(mlp, trace, output_grad):
    g = as_matrix(output_grad, "output_grad")
    if g.shape != trace.outputs.shape:
        raise ShapeError(
            f"output_grad shape {g.shape} does not match outputs "
            f"{trace.outputs.shape}"
        )
    return g


def zero_grads(mlp):
    return [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]


def add_grads(acc, grads, weight=1.0):
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += weight * gw
        ab += weight * gb
    return acc


def scale_grads(grads, factor):
    return [(w * factor, b * factor) for w, b in grads]


def softmax_rows(logits, temperature=1.0):
    """Row-wise softmax of logits / temperature, stabilized by the row max."""
    z = as_matrix(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_rows: non-finite logits")
    if temperature <= 0:
        raise NumericError("softmax_rows: temperature must be positive")
    z = z / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, onehot):
    """Mean over rows of -sum(onehot * log(probs)), with PROB_FLOOR."""
    p = as_matrix(probs, "probs")
    y = as_matrix(onehot, "labels")
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} vs labels {y.shape}")
    return float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ce_softmax_loss(logits, onehot):
    """Softmax cross-entropy head.

    Returns (mean loss, per-example output gradient): grad row i is
    d(loss_i)/d(logits_i) = softmax(logits_i) - onehot_i, unscaled.
    """
    p = softmax_rows(logits)
    return cross_entropy(p, onehot), p - onehot


def bce_sigmoid_loss(logits, targets):
    """Per-class binary cross-entropy head (multi-label mode).

    Loss of one example is the sum over classes of the binary
    cross-entropy of sigmoid(logit); returned loss is the row mean.
    """
    z = as_matrix(logits, "logits")
    y = as_matrix(targets, "targets")
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs targets {y.shape}")
    # log(1 + e^-|z|) is stable for both signs.
    loss_mat = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss_mat.sum(axis=1).mean()), _sigmoid(z) - y


@dataclass
class AdamW:
    """AdamW with decoupled weight decay; moments allocated on first use."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def update(self, mlp, grads):
        """One AdamW step, applied to mlp's parameters in place."""
        if self.m is None:
            self.m = zero_grads(mlp)
            self.v = zero_grads(mlp)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for layer, (mw, mb), (vw, vb), (gw, gb) in zip(
            mlp.layers, self.m, self.v, grads
        ):
            for p, mo, ve, g in ((layer.w, mw, vw, gw), (layer.b, mb, vb, gb)):
                mo *= b1
                mo += (1.0 - b1) * g
                ve *= b2
                ve += (1.0 - b2) * np.square(g)
                step = (mo / bias1) / (np.sqrt(ve / bias2) + self.eps)
                p -= self.learning_rate * (step + self.weight_decay * p)
