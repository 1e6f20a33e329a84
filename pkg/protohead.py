# Prototype bank, projection head, DCE dan PL loss.

import numpy as np

from autodiff import (DEFAULT_DTYPE, Linear, Module, Parameter, as_tensor, gelu, log,
                      log_softmax, logsumexp, mean, no_grad, reshape, softmax)
from config import LossConfig, PL_TARGETS, default_lambda
from errors import ConfigurationError, ContractError, DimensionError

PROJECTION_MODES = ("linear", "mlp3")


class PrototypeBank(Module):
    """C x K learnable prototypes in a d-dimensional space."""

    def __init__(self, num_classes=2, per_class=1, dim=3, gamma=1.0, lam=None, rng=None, dtype=DEFAULT_DTYPE):
        if num_classes < 2 or per_class < 1 or dim < 1:
            raise ConfigurationError(f"invalid prototype bank shape C={num_classes} K={per_class} d={dim}")
        lam = default_lambda(dim) if lam is None else float(lam)
        if not gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {gamma}")
        if lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {lam}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.gamma = float(gamma)
        self.lam = lam
        self.prototypes = Parameter(rng.normal(0.0, 1.0, size=(num_classes, per_class, dim)), dtype=dtype)

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def per_class(self):
        return self.prototypes.shape[1]

    @property
    def dim(self):
        return self.prototypes.shape[2]


def _prototypes(bank):
    return bank.prototypes if isinstance(bank, PrototypeBank) else as_tensor(bank)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def distances(z, bank):
    """Squared Euclidean distance of every z (B, d) to every prototype -> (B, C, K)."""
    m = _prototypes(bank)
    z = as_tensor(z, like=m)
    if z.ndim != 2 or z.shape[1] != m.shape[-1]:
        raise DimensionError(f"projection {z.shape} does not match prototype dimension {m.shape[-1]}")
    diff = reshape(z, (z.shape[0], 1, 1, z.shape[1])) - m
    return (diff * diff).sum(axis=-1)


def prototype_probabilities(dist, gamma):
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    dist = as_tensor(dist)
    b, c, k = dist.shape
    return reshape(softmax(reshape(dist * (-gamma), (b, c * k)), axis=-1), (b, c, k))


def class_probability(proto_probs):
    return as_tensor(proto_probs).sum(axis=-1)


def dce_loss(class_probs, labels):
    class_probs = as_tensor(class_probs)
    labels = _check_labels(labels, class_probs.shape[1])
    picked = log(class_probs)[np.arange(len(labels)), labels]
    return -mean(picked)


def dce_loss_from_distances(dist, labels, gamma):
    """DCE evaluated in log-space, stable for very large distances."""
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    dist = as_tensor(dist)
    b, c, k = dist.shape
    labels = _check_labels(labels, c)
    logits = dist * (-gamma)
    log_total = logsumexp(reshape(logits, (b, c * k)), axis=-1)
    log_class = logsumexp(logits, axis=-1)
    return mean(log_total - log_class[np.arange(b), labels])


def pl_from_distances(dist, labels):
    dist = as_tensor(dist)
    labels = _check_labels(labels, dist.shape[1])
    rows = np.arange(len(labels))
    own = dist[rows, labels]
    nearest = np.argmin(own.data, axis=-1)
    return mean(own[rows, nearest])


def pl_loss(z, labels, bank):
    return pl_from_distances(distances(z, bank), labels)


def combined_loss(z, labels, bank, gamma=None, lam=None, pl_labels=None):
    """DCE + lambda * PL; lambda == 0 gives the DCE tensor itself."""
    gamma = bank.gamma if gamma is None else gamma
    lam = bank.lam if lam is None else lam
    dist = distances(z, bank)
    dce = dce_loss_from_distances(dist, labels, gamma)
    if lam == 0:
        return dce
    return dce + lam * pl_from_distances(dist, labels if pl_labels is None else pl_labels)


def classify_nearest(z, bank):
    """Class of the globally nearest prototype; ties go to the lower index."""
    with no_grad():
        dist = distances(z, bank).data
    b, c, k = dist.shape
    return (np.argmin(dist.reshape(b, c * k), axis=-1) // k).astype(np.int64)


def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    labels = _check_labels(labels, logits.shape[-1])
    return -mean(log_softmax(logits, axis=-1)[np.arange(len(labels)), labels])


class ProjectionHead(Module):
    """Encoder features -> prototype space: one affine map, or 3 affine maps with GELU between."""

    def __init__(self, in_dim, out_dim, mode="linear", rng=None, hidden=(64, 16), dtype=DEFAULT_DTYPE):
        if mode not in PROJECTION_MODES:
            raise ConfigurationError(f"projection mode must be one of {PROJECTION_MODES}, got '{mode}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        widths = (in_dim, out_dim) if mode == "linear" else (in_dim,) + tuple(hidden) + (out_dim,)
        if len(widths) != (2 if mode == "linear" else 4):
            raise ConfigurationError(f"mlp3 needs exactly two hidden widths, got {hidden}")
        self.layers = [Linear(widths[i], widths[i + 1], rng=rng, dtype=dtype) for i in range(len(widths) - 1)]

    @property
    def out_dim(self):
        return self.layers[-1].out_features

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            if i:
                x = gelu(x)
            x = layer(x)
        return x


class PrototypeClassifier(Module):
    head = "prototype"

    def __init__(self, encoder, projection, bank, loss_config=None):
        loss_config = loss_config or LossConfig()
        if loss_config.pl_target not in PL_TARGETS:
            raise ConfigurationError(f"unknown pl_target '{loss_config.pl_target}'")
        if projection.out_dim != bank.dim:
            raise DimensionError(f"projection emits {projection.out_dim} dims, prototypes have {bank.dim}")
        self.encoder = encoder
        self.projection = projection
        self.bank = bank
        self.pl_target = loss_config.pl_target

    def forward(self, x):
        return self.projection(self.encoder(x))

    def loss(self, x, labels):
        z = self.forward(x)
        pl_labels = classify_nearest(z, self.bank) if self.pl_target == "prediction" else None
        return combined_loss(z, labels, self.bank, pl_labels=pl_labels)

    def predict(self, x):
        with no_grad():
            return classify_nearest(self.forward(x), self.bank)

    def class_probabilities(self, x):
        with no_grad():
            dist = distances(self.forward(x), self.bank)
            return class_probability(prototype_probabilities(dist, self.bank.gamma)).data


class SoftmaxClassifier(Module):
    head = "softmax"

    def __init__(self, encoder, num_classes=2, rng=None, dtype=DEFAULT_DTYPE):
        self.encoder = encoder
        self.classifier = Linear(encoder.output_dim, num_classes, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.classifier(self.encoder(x))

    def loss(self, x, labels):
        return cross_entropy(self.forward(x), labels)

    def predict(self, x):
        with no_grad():
            return np.argmax(self.forward(x).data, axis=-1).astype(np.int64)

    def class_probabilities(self, x):
        with no_grad():
            return softmax(self.forward(x), axis=-1).data
