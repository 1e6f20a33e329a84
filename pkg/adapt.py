"""Self-labeling domain adaptation.

Label the target domain with the trained model, freeze encoder and prototypes,
swap the linear projection for a fresh 3-layer MLP and train only that MLP on
the pseudo-labels with the same combined loss.
"""

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ContractError
from pipeline import (Checkpoint, PREDICT_BATCH, Trainer, check_grid, class_probabilities, predict,
                      projection_mode)
from protohead import PrototypeClassifier, ProjectionHead
from storage import save_dataset
from syngen import SyntheticDataset

LOG = logging.getLogger(__name__)


@dataclass
class PseudoLabeledSet:
    indices: np.ndarray
    pseudo_labels: np.ndarray
    source_model_id: str
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.pseudo_labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        if len(self.indices) != len(self.pseudo_labels):
            raise ContractError(f"{len(self.pseudo_labels)} pseudo-labels for {len(self.indices)} samples")
        if not self.source_model_id:
            raise ContractError("pseudo-labels need the id of the model that produced them")
        if len(self.pseudo_labels) and not np.isin(self.pseudo_labels, (0, 1)).all():
            raise ContractError("pseudo-labels must be 0 or 1")

    def __len__(self):
        return len(self.indices)

    def accuracy_against(self, labels):
        labels = np.asarray(labels, dtype=np.int64)[self.indices]
        return float(np.mean(labels == self.pseudo_labels)) if len(self) else 0.0


def parameter_digest(*modules):
    h = hashlib.sha256()
    for module in modules:
        for name, p in module.named_parameters():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _require_trained(checkpoint):
    if checkpoint.stage not in ("trained", "adapted"):
        raise ContractError(f"checkpoint stage '{checkpoint.stage}' is not trained")


def generate_pseudo_labels(checkpoint, dataset, batch_size=PREDICT_BATCH, workers=1):
    """Nearest-prototype (or argmax) predictions for every sample, with max class probability."""
    _require_trained(checkpoint)
    model_id = checkpoint.model_id()
    if len(dataset) == 0:
        return PseudoLabeledSet(np.zeros(0), np.zeros(0), model_id, np.zeros(0))
    check_grid(checkpoint.config, dataset)
    probs = class_probabilities(checkpoint.model, dataset.phases, checkpoint.config.input_encoding,
                                batch_size=batch_size, workers=workers)
    labels = predict(checkpoint.model, dataset.phases, checkpoint.config.input_encoding,
                     batch_size=batch_size, workers=workers)
    LOG.info(">>> [ADAPT] %d pseudo-labels from model %s: %d positive, mean confidence %.3f",
             len(labels), model_id, int(labels.sum()), float(probs.max(axis=1).mean()))
    return PseudoLabeledSet(np.arange(len(dataset)), labels, model_id, probs.max(axis=1))


def freeze_for_adaptation(checkpoint, seed=None):
    """Copy of the checkpoint with encoder and prototypes frozen and a fresh trainable mlp3 projection."""
    _require_trained(checkpoint)
    if not isinstance(checkpoint.model, PrototypeClassifier):
        raise ContractError("adaptation needs a prototype-head checkpoint")
    config = checkpoint.config
    model = copy.deepcopy(checkpoint.model)
    model.encoder.freeze()
    model.bank.freeze()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    model.projection = ProjectionHead(config.output_dim, config.proto_dim, "mlp3", rng=rng,
                                      dtype=model.bank.prototypes.dtype)
    LOG.info(">>> [ADAPT] encoder and prototypes frozen, mlp3 projection installed (%d trainable parameters)",
             sum(p.size for p in model.trainable_parameters()))
    return Checkpoint(config, model, "adapted", list(checkpoint.history))


def train_projection(checkpoint, pseudo_set, dataset, config=None):
    """Train the mlp3 projection for epochs_p epochs on pseudo-labels; nothing else moves."""
    if len(pseudo_set) == 0:
        raise ContractError("pseudo-labeled set is empty")
    model = checkpoint.model
    frozen = model.encoder.parameters() + model.bank.parameters()
    if projection_mode(model) != "mlp3" or any(p.requires_grad for p in frozen):
        raise ContractError("train_projection needs a checkpoint from freeze_for_adaptation")
    cfg = config or checkpoint.config
    labels = pseudo_set.pseudo_labels
    if cfg.oversample and len(np.unique(labels)) < 2:
        LOG.warning(">>> [ADAPT] pseudo-labels contain one class only, oversampling disabled")
        cfg = cfg.replace(oversample=False)
    trainer = Trainer(cfg, model=model, tag="ADAPT")
    trainer.fit(dataset.phases[pseudo_set.indices], labels, cfg.epochs_p)
    checkpoint.history.extend(trainer.history)
    return checkpoint


def adapt(checkpoint, target, config=None, oracle_labels=None, workers=1):
    """Pseudo-label -> freeze -> retrain projection. Returns (adapted checkpoint, pseudo set).

    oracle_labels replaces the pseudo-labels by known target labels (control runs only).
    """
    cfg = config or checkpoint.config
    pseudo = generate_pseudo_labels(checkpoint, target, workers=workers)
    if oracle_labels is not None:
        pseudo = PseudoLabeledSet(pseudo.indices, oracle_labels, "oracle:" + pseudo.source_model_id)
    adapted = freeze_for_adaptation(checkpoint, cfg.seed)
    before = parameter_digest(adapted.model.encoder, adapted.model.bank)
    train_projection(adapted, pseudo, target, cfg)
    if parameter_digest(adapted.model.encoder, adapted.model.bank) != before:
        raise ContractError("frozen encoder or prototype parameters changed during adaptation")
    return adapted, pseudo


def save_pseudo_labels(path, dataset, pseudo_set):
    """Dataset container with the pseudo-labels as labels; manifest carries model id and confidence."""
    idx = pseudo_set.indices
    confidence = pseudo_set.confidence if pseudo_set.confidence is not None else np.full(len(idx), np.nan)
    records = [{"sample": int(i), "seed": int(dataset.seeds[i]), "pseudo_label": int(label),
                "confidence": float(conf)}
               for i, label, conf in zip(idx, pseudo_set.pseudo_labels, confidence)]
    labeled = SyntheticDataset(dataset.phases[idx], pseudo_set.pseudo_labels, dataset.seeds[idx],
                               records, dataset.profile)
    save_dataset(path, labeled, header={"source_model_id": pseudo_set.source_model_id})
