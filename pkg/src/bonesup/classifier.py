"""Small convolutional normal-vs-abnormal classifier for the downstream AUC protocol.

Three stride-2 conv blocks (4x4, leaky_relu 0.2; widths b, 2b, 4b), global
average pooling and a 1x1 conv producing one logit per image.  With b=16
that is 41,393 parameters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import MODE_TAGS, decode_entries, encode_entries, network_entries, restore_network
from .errors import FormatError, UndefinedMetricError
from .networks import Network
from .optim import Adam
from .seeding import derive_seed
from .tensor import Tensor, backward, conv2d, leaky_relu, log_sigmoid, no_grad


class Classifier(Network):
    kind = "classifier"

    def __init__(self, base_channels=16, seed=0):
        super().__init__()
        if base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        self.base_channels = base_channels
        rng = np.random.default_rng(seed)
        in_ch = 1
        for i in range(3):
            out = base_channels * 2**i
            std = np.sqrt(2.0 / (in_ch * 16))  # He init; conv stack has no normalization
            self.params[f"conv{i}.weight"] = Tensor(rng.normal(0, std, (out, in_ch, 4, 4)), requires_grad=True)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(out), requires_grad=True)
            in_ch = out
        self.params["head.weight"] = Tensor(rng.normal(0, np.sqrt(1.0 / in_ch), (1, in_ch, 1, 1)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(1), requires_grad=True)

    def config(self):
        return {"base_channels": self.base_channels}

    def forward(self, x):
        """(N, 1, H, W) images in [-1, 1] -> (N,) logits as an (N, 1, 1, 1) tensor."""
        p = self.params
        for i in range(3):
            x = leaky_relu(conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=2, padding=1), 0.2)
        x = x.mean(axes=(2, 3), keepdims=True)
        return conv2d(x, p["head.weight"], p["head.bias"])

    def scores(self, images):
        """Abnormality probabilities for (N, H, W) images in [0, 1]."""
        images = np.asarray(images, dtype=np.float32)
        out = np.empty(len(images), dtype=np.float64)
        with no_grad():
            for i in range(0, len(images), 32):
                x = Tensor(images[i : i + 32, None] * 2.0 - 1.0)
                logits = self.forward(x).data.reshape(-1).astype(np.float64)
                out[i : i + 32] = 1.0 / (1.0 + np.exp(-logits))
        return out


@dataclass
class ClassifierConfig:
    base_channels: int = 16
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0


def train_classifier(images, labels, config: ClassifierConfig = ClassifierConfig()):
    """Fit a :class:`Classifier` with logistic loss; images are (N, H, W) in [0, 1]."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("classifier training needs both classes")
    clf = Classifier(config.base_channels, derive_seed(config.seed, "classifier"))
    opt = Adam(clf.named_parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2)
    rng = np.random.default_rng(derive_seed(config.seed, "classifier_order"))
    x_all = images[:, None] * 2.0 - 1.0
    y_all = labels.astype(np.float32)
    bs = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        for k in range(0, len(order), bs):
            idx = order[k : k + bs]
            logits = clf(Tensor(x_all[idx]))
            y = Tensor(y_all[idx].reshape(-1, 1, 1, 1))
            # binary cross-entropy on logits: -[y log s(z) + (1 - y) log s(-z)]
            loss = -(y * log_sigmoid(logits) + (1.0 - y) * log_sigmoid(-logits)).mean()
            opt.zero_grad()
            backward(loss)
            opt.step()
    return clf


def save_classifier(clf, path):
    data = encode_entries(MODE_TAGS["classifier"], network_entries("C", clf))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_classifier(path):
    with open(path, "rb") as fh:
        mode_tag, entries = decode_entries(fh.read())
    if mode_tag != MODE_TAGS["classifier"]:
        raise FormatError("checkpoint does not hold a classifier", offset=8)
    table = dict(entries)

    def build(meta):
        if meta.size != 1 or float(meta[0]) != int(meta[0]) or meta[0] < 1:
            raise FormatError("classifier meta needs one positive integer")
        return Classifier(int(meta[0]))

    clf, _ = restore_network("C", table, build)
    if table:
        raise FormatError(f"unexpected entries: {sorted(table)[:5]}")
    return clf
