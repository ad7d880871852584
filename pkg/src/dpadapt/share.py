"""The share package: everything that crosses the trust boundary.

One UTF-8 JSON text with top-level keys exactly {version, encoder,
classifier, gmms, privacy, meta}. Every float is encoded as a decimal
string with 17 significant digits, which round-trips IEEE doubles
bit-exactly on any platform; serialization is canonical (sorted keys,
fixed separators), so identical packages are identical byte streams.

The package deliberately contains no raw source rows and no labels: the
mixtures, the weights, and the privacy receipt are the only things the
target side ever sees.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import accountant, gmm, nn
from .errors import ConfigError, ParseError

FORMAT_VERSION = 1

NON_PRIVATE = "non-private"

RECEIPT_KEYS = ("epsilon", "delta", "sigma", "q", "steps", "accountant", "scheme")


def _enc_f(x):
    return format(float(x), ".17g")


def _dec_f(s):
    return float(s)


def _enc_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    return {
        "rows": int(m.shape[0]),
        "cols": int(m.shape[1]),
        "data": [_enc_f(v) for v in m.ravel(order="C")],
    }


def _dec_matrix(obj):
    rows, cols = int(obj["rows"]), int(obj["cols"])
    data = np.array([_dec_f(v) for v in obj["data"]], dtype=np.float64)
    if data.size != rows * cols:
        raise ParseError(f"matrix data length {data.size} != {rows}x{cols}")
    return data.reshape(rows, cols)


def _enc_vector(v):
    return [_enc_f(x) for x in np.asarray(v, dtype=np.float64)]


def _dec_vector(obj):
    return np.array([_dec_f(v) for v in obj], dtype=np.float64)


def _enc_mlp(mlp):
    return {
        "layers": [
            {"w": _enc_matrix(l.w), "b": _enc_vector(l.b), "activation": l.activation}
            for l in mlp.layers
        ]
    }


def _dec_mlp(obj):
    return nn.Mlp(
        [
            nn.Layer(_dec_matrix(l["w"]), _dec_vector(l["b"]), l["activation"])
            for l in obj["layers"]
        ]
    )


def _enc_gmms(class_gmms, class_names):
    out = {}
    for label, model in class_gmms.models.items():
        name = label if label == gmm.POOLED_KEY else class_names[label]
        out[name] = {
            "k": int(model.n_components),
            "weights": _enc_vector(model.weights),
            "means": _enc_matrix(model.means),
            "variances": _enc_matrix(model.variances),
        }
    return out


def _dec_gmms(obj, class_names, priors):
    models = {}
    for name, entry in obj.items():
        model = gmm.Gmm(
            _dec_vector(entry["weights"]),
            _dec_matrix(entry["means"]),
            _dec_matrix(entry["variances"]),
        )
        if int(entry["k"]) != model.n_components:
            raise ParseError(f"gmm {name!r}: k does not match its weights")
        key = name if name == gmm.POOLED_KEY else class_names.index(name)
        models[key] = model
    dim = next(iter(models.values())).dim
    return gmm.ClassGmms(models, priors, dim=dim)


@dataclass
class SharePackage:
    """What the source party transmits, nothing more."""

    encoder: nn.Mlp
    classifier: nn.Mlp
    gmms: gmm.ClassGmms
    privacy: dict = None  # receipt mapping, or None for non-private
    class_names: list = field(default_factory=list)
    label_mode: str = "multiclass"
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self):
        d = self.encoder.output_dim
        if self.gmms.dim != d:
            raise ConfigError(
                f"gmm dim {self.gmms.dim} != encoder feature dim {d}"
            )
        if self.classifier.input_dim != d:
            raise ConfigError(
                f"classifier input dim {self.classifier.input_dim} != feature dim {d}"
            )
        if self.privacy is not None:
            missing = [k for k in RECEIPT_KEYS if k not in self.privacy]
            if missing:
                raise ConfigError(f"privacy receipt missing keys: {missing}")

    @property
    def feature_dim(self):
        return self.encoder.output_dim

    @property
    def n_classes(self):
        return len(self.class_names)


def to_text(pkg):
    if pkg.privacy is None:
        privacy = NON_PRIVATE
    else:
        privacy = {
            "epsilon": _enc_f(pkg.privacy["epsilon"]),
            "delta": _enc_f(pkg.privacy["delta"]),
            "sigma": _enc_f(pkg.privacy["sigma"]),
            "q": _enc_f(pkg.privacy["q"]),
            "steps": int(pkg.privacy["steps"]),
            "accountant": str(pkg.privacy["accountant"]),
            "scheme": str(pkg.privacy["scheme"]),
        }
    obj = {
        "version": FORMAT_VERSION,
        "encoder": _enc_mlp(pkg.encoder),
        "classifier": _enc_mlp(pkg.classifier),
        "gmms": _enc_gmms(pkg.gmms, pkg.class_names),
        "privacy": privacy,
        "meta": {
            "feature_dim": pkg.feature_dim,
            "class_names": list(pkg.class_names),
            "class_priors": {
                (k if k == gmm.POOLED_KEY else pkg.class_names[k]): _enc_f(v)
                for k, v in pkg.gmms.class_priors.items()
            },
            "label_mode": pkg.label_mode,
            "seed": int(pkg.seed),
            "config_digest": pkg.config_digest,
            "tool": "dpadapt",
            "tool_version": __import__("dpadapt").__version__,
        },
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def from_text(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"share package is not valid JSON: {e}") from None
    if set(obj) != {"version", "encoder", "classifier", "gmms", "privacy", "meta"}:
        raise ParseError(f"unexpected top-level keys: {sorted(obj)}")
    if obj["version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported share package version {obj['version']}")
    meta = obj["meta"]
    class_names = list(meta["class_names"])
    priors = {
        (k if k == gmm.POOLED_KEY else class_names.index(k)): _dec_f(v)
        for k, v in meta["class_priors"].items()
    }
    privacy = obj["privacy"]
    if privacy == NON_PRIVATE:
        receipt = None
    else:
        receipt = {
            "epsilon": _dec_f(privacy["epsilon"]),
            "delta": _dec_f(privacy["delta"]),
            "sigma": _dec_f(privacy["sigma"]),
            "q": _dec_f(privacy["q"]),
            "steps": int(privacy["steps"]),
            "accountant": privacy["accountant"],
            "scheme": privacy["scheme"],
        }
    return SharePackage(
        encoder=_dec_mlp(obj["encoder"]),
        classifier=_dec_mlp(obj["classifier"]),
        gmms=_dec_gmms(obj["gmms"], class_names, priors),
        privacy=receipt,
        class_names=class_names,
        label_mode=meta["label_mode"],
        seed=int(meta["seed"]),
        config_digest=meta["config_digest"],
    )


def save(pkg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(pkg))


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return from_text(fh.read())


def receipt_from_ledger(ledger):
    """Privacy receipt for a finished DP pretraining ledger."""
    if ledger is None or not ledger.events:
        return None
    first = ledger.events[0]
    eps = accountant.to_eps_delta(accountant.compose(ledger), ledger.delta)
    return {
        "epsilon": eps.epsilon,
        "delta": ledger.delta,
        "sigma": first.sigma,
        "q": first.q,
        "steps": ledger.total_events(),
        "accountant": "rdp",
        "scheme": ledger.scheme,
    }


# Standalone model files (pretrain and adaptation outputs) reuse the
# same matrix codec.


def save_model(path, encoder, classifier=None, meta=None):
    obj = {
        "version": FORMAT_VERSION,
        "encoder": _enc_mlp(encoder),
        "classifier": None if classifier is None else _enc_mlp(classifier),
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported model file version {obj.get('version')}")
    encoder = _dec_mlp(obj["encoder"])
    classifier = None if obj["classifier"] is None else _dec_mlp(obj["classifier"])
    return encoder, classifier, obj.get("meta", {})


def save_ledger(path, ledger):
    obj = {
        "version": FORMAT_VERSION,
        "delta": _enc_f(ledger.delta),
        "scheme": ledger.scheme,
        "events": [[_enc_f(e.q), _enc_f(e.sigma), int(e.count)] for e in ledger.events],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_ledger(path):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    ledger = accountant.PrivacyLedger(delta=_dec_f(obj["delta"]), scheme=obj["scheme"])
    for q, sigma, count in obj["events"]:
        ledger.record(_dec_f(q), _dec_f(sigma), int(count))
    return ledger


def digest_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
