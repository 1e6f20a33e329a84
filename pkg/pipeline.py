# Orkestrasi: build model, training loop (DCE + PL atau softmax baseline),
# evaluasi confusion matrix, checkpoint biner, distilasi ke tiny_cnn,
# dan ekspor (protospace CSV, nearest ranking, peta attention).

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from autodiff import Optimizer, backward, no_grad
from config import config_from_mapping, parse_key_values
from encoder import TinySwin, build_encoder, encode_input
from errors import (ConfigurationError, ContractError, DataError, DimensionError,
                    NumericalAbort, UnlabeledDatasetError)
from pool import ordered_map
from protohead import (PrototypeBank, PrototypeClassifier, ProjectionHead, SoftmaxClassifier,
                       distances)
from storage import checkpoint_from_bytes, checkpoint_to_bytes, format_float, write_csv

LOG = logging.getLogger(__name__)

STAGES = ("initial", "trained", "adapted")
PREDICT_BATCH = 256


# ================================================================= #
# ============================ MODEL ============================== #
# ================================================================= #

def build_model(config, projection="linear", dtype=np.float32):
    """Freshly initialised classifier; initialisation depends only on config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    encoder = build_encoder(config, rng, dtype)
    if config.head == "softmax":
        return SoftmaxClassifier(encoder, config.num_classes, rng=rng, dtype=dtype)
    proj = ProjectionHead(config.output_dim, config.proto_dim, projection, rng=rng, dtype=dtype)
    bank = PrototypeBank(config.num_classes, config.prototypes_per_class, config.proto_dim,
                         gamma=config.loss.gamma, lam=config.lam, rng=rng, dtype=dtype)
    return PrototypeClassifier(encoder, proj, bank, config.loss)


def projection_mode(model):
    return model.projection.mode if isinstance(model, PrototypeClassifier) else "none"


@dataclass
class Checkpoint:
    config: object
    model: object
    stage: str = "initial"
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown checkpoint stage '{self.stage}'")

    @property
    def head(self):
        return self.config.head

    def metadata_text(self):
        return self.config.to_text() + f"projection={projection_mode(self.model)}\nstage={self.stage}\n"

    def to_bytes(self):
        return checkpoint_to_bytes(self.config.fingerprint(), self.metadata_text(), self.model.state_dict())

    def model_id(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def save(self, path):
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        LOG.info(">>> [EXPORT] checkpoint %s (%s, stage=%s, %d bytes) -> %s",
                 self.model_id(), self.config.encoder, self.stage, len(blob), path)

    @classmethod
    def from_bytes(cls, blob, source="<bytes>"):
        fingerprint, metadata, state = checkpoint_from_bytes(blob, source)
        try:
            mapping = parse_key_values(metadata)
            stage = mapping.pop("stage", "trained")
            projection = mapping.pop("projection", "linear")
            config = config_from_mapping(mapping)
        except ConfigurationError as e:
            raise DataError(f"{source}: invalid checkpoint metadata: {e}") from None
        if config.fingerprint() != fingerprint:
            raise DataError(f"{source}: config fingerprint mismatch")
        model = build_model(config, projection="linear" if projection == "none" else projection)
        try:
            model.load_state_dict(state)
        except DimensionError as e:
            raise DataError(f"{source}: {e}") from None
        return cls(config, model, stage)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as e:
            raise DataError(f"cannot read checkpoint {path}: {e}") from None
        return cls.from_bytes(blob, source=str(path))


# ================================================================= #
# =========================== INFERENCE =========================== #
# ================================================================= #

def _chunks(n, batch_size):
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _batched(fn, phases, encoding, batch_size, workers, empty):
    phases = np.asarray(phases)
    if len(phases) == 0:
        return empty

    def run(idx):
        with no_grad():
            return fn(encode_input(phases[idx], encoding))

    return np.concatenate(ordered_map(run, _chunks(len(phases), batch_size), workers))


def predict(model, phases, encoding="phase", batch_size=PREDICT_BATCH, workers=1):
    return _batched(model.predict, phases, encoding, batch_size, workers, np.zeros(0, dtype=np.int64))


def class_probabilities(model, phases, encoding="phase", batch_size=PREDICT_BATCH, workers=1):
    return _batched(model.class_probabilities, phases, encoding, batch_size, workers, np.zeros((0, 2)))


def embed(model, phases, encoding="phase", batch_size=PREDICT_BATCH, workers=1):
    """Prototype-space coordinates (N, d)."""
    if not isinstance(model, PrototypeClassifier):
        raise ContractError("prototype-space coordinates need a prototype-head model")
    return _batched(lambda x: model.forward(x).data, phases, encoding, batch_size, workers,
                    np.zeros((0, model.bank.dim)))


# ================================================================= #
# =========================== BATCHING ============================ #
# ================================================================= #

def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def oversample_batches(labels, batch_size, seed, epoch=0):
    """Class-balanced batches: every majority sample once, minority drawn from repeated permutations."""
    labels = np.asarray(labels)
    if batch_size < 2:
        raise ConfigurationError("oversampling needs batch_size >= 2")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigurationError(f"oversampling needs both classes, got {len(pos)} positive / {len(neg)} negative")
    rng = _epoch_rng(seed, epoch)
    major, minor = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    per_major = math.ceil(batch_size / 2)
    per_minor = batch_size // 2
    n_batches = math.ceil(len(major) / per_major)

    major = rng.permutation(major)
    need = n_batches * per_minor
    rounds = [rng.permutation(minor) for _ in range(math.ceil(need / len(minor)))]
    minor = np.concatenate(rounds)

    batches = []
    for b in range(n_batches):
        mj = major[b * per_major:(b + 1) * per_major]
        mn = minor[b * per_minor:b * per_minor + min(per_minor, len(mj))]
        batches.append(rng.permutation(np.concatenate([mj, mn])).astype(np.int64))
    return batches


def shuffled_batches(n, batch_size, seed, epoch=0):
    order = _epoch_rng(seed, epoch).permutation(n)
    return [order[i:i + batch_size].astype(np.int64) for i in range(0, n, batch_size)]


# ================================================================= #
# ============================ TRAINING =========================== #
# ================================================================= #

class Trainer:
    def __init__(self, config, model=None, tag="TRAIN"):
        self.config = config.validate()
        self.model = model if model is not None else build_model(config)
        self.tag = tag
        self.history = []
        self.logger = logging.getLogger(__name__)

    def batches(self, labels, epoch):
        cfg = self.config
        if cfg.oversample:
            return oversample_batches(labels, cfg.batch_size, cfg.seed, epoch)
        return shuffled_batches(len(labels), cfg.batch_size, cfg.seed, epoch)

    def fit(self, phases, labels, epochs, val=None):
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if len(phases) != len(labels):
            raise DimensionError(f"{len(phases)} samples but {len(labels)} labels")
        if epochs and len(labels) == 0:
            raise ContractError("cannot train on an empty sample set")
        params = self.model.trainable_parameters()
        steps_per_epoch = len(self.batches(labels, 0)) if epochs and len(labels) else 0
        opt = Optimizer(params, cfg.lr0, total_steps=epochs * steps_per_epoch, lr_min=cfg.lr_min,
                        weight_decay=cfg.weight_decay, method=cfg.optimizer, schedule=cfg.schedule)
        self.logger.info(">>> [%s] %d samples, %d epochs x %d steps, %d trainable parameters",
                         self.tag, len(labels), epochs, steps_per_epoch, sum(p.size for p in params))
        lr = opt.learning_rate

        for epoch in range(epochs):
            epoch_losses = []
            for idx in self.batches(labels, epoch):
                loss = self.model.loss(encode_input(phases[idx], cfg.input_encoding), labels[idx])
                value = float(loss.item())
                self.history.append(value)
                if not math.isfinite(value):
                    raise NumericalAbort(f"non-finite loss in epoch {epoch + 1}", step=opt.step_count,
                                         lr=opt.learning_rate, history=self.history)
                opt.zero_grad()
                backward(loss)
                lr = opt.step()
                epoch_losses.append(value)
            self.logger.info(">>> [%s] epoch %d/%d loss=%.4f lr=%.3g", self.tag, epoch + 1, epochs,
                             float(np.mean(epoch_losses)), lr)
            if val is not None:
                self._log_validation(val, epoch, epochs)
        return self.model

    def _log_validation(self, val, epoch, epochs):
        try:
            pred = predict(self.model, val.phases, self.config.input_encoding)
            report = EvalReport.from_predictions(pred, val.labels, domain="val")
            self.logger.info(">>> [%s] epoch %d/%d val acc=%.2f%%", self.tag, epoch + 1, epochs, report.acc_percent)
        except Exception as e:
            self.logger.error(">>> [ERROR] validation after epoch %d failed: %s", epoch + 1, e)


def _require_labels(dataset, what):
    if not dataset.has_labels:
        raise UnlabeledDatasetError(f"{what} needs a labeled dataset")


def check_grid(config, dataset):
    if len(dataset) and dataset.grid_size != config.grid_size:
        raise ConfigurationError(f"dataset grid {dataset.grid_size} != configured grid_size {config.grid_size}")


def train(dataset, config, val=None):
    _require_labels(dataset, "training")
    check_grid(config, dataset)
    trainer = Trainer(config)
    trainer.fit(dataset.phases, dataset.labels, config.epochs_s, val=val)
    return Checkpoint(config, trainer.model, "trained", trainer.history)


# ================================================================= #
# =========================== EVALUATION ========================== #
# ================================================================= #

@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    domain: str = "source"
    fingerprint: str = ""

    @classmethod
    def from_counts(cls, tp, fp, tn, fn, domain="source", fingerprint=""):
        return cls(int(tp), int(fp), int(tn), int(fn), domain, fingerprint)

    @classmethod
    def from_predictions(cls, pred, labels, domain="source", fingerprint=""):
        pred = np.asarray(pred, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if pred.shape != labels.shape:
            raise DimensionError(f"{pred.shape} predictions for {labels.shape} labels")
        return cls.from_counts(np.sum((pred == 1) & (labels == 1)), np.sum((pred == 1) & (labels == 0)),
                               np.sum((pred == 0) & (labels == 0)), np.sum((pred == 0) & (labels == 1)),
                               domain, fingerprint)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def correct(self):
        return self.tp + self.tn

    @property
    def acc(self):
        return self.correct / self.total if self.total else 0.0

    @property
    def acc_percent(self):
        return 100.0 * self.acc

    def percent(self, count):
        return 100.0 * count / self.total if self.total else 0.0

    def to_mapping(self):
        return {"domain": self.domain, "total": self.total, "acc": round(self.acc_percent, 2),
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "fingerprint": self.fingerprint}

    def summary(self):
        line = "=" * 40
        rows = [line, f"Laporan Evaluasi ({self.domain})", line,
                f"Samples     : {self.total}",
                f"ACC         : {self.acc_percent:.2f}% ({self.correct}/{self.total})"]
        for name in ("tp", "fp", "tn", "fn"):
            count = getattr(self, name)
            rows.append(f"{name.upper():<12}: {count} ({self.percent(count):.2f}%)")
        rows.append(f"Config      : {self.fingerprint[:16] or '-'}")
        rows.append(line)
        return "\n".join(rows)


def evaluate(checkpoint, dataset, domain="source", workers=1):
    _require_labels(dataset, "evaluation")
    check_grid(checkpoint.config, dataset)
    pred = predict(checkpoint.model, dataset.phases, checkpoint.config.input_encoding, workers=workers)
    report = EvalReport.from_predictions(pred, dataset.labels, domain, checkpoint.config.fingerprint())
    LOG.info(">>> [EVAL] %s: acc=%.2f%% tp=%d fp=%d tn=%d fn=%d", domain, report.acc_percent,
             report.tp, report.fp, report.tn, report.fn)
    return report


# ================================================================= #
# ========================== DISTILLATION ========================= #
# ================================================================= #

def split_target(dataset, seed):
    """Deterministic half/half split (first half trains, second half is held out)."""
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A6])).permutation(len(dataset))
    half = len(dataset) // 2
    return dataset.subset(np.sort(order[:half])), dataset.subset(np.sort(order[half:]))


def distill_to_cnn(labeler, unlabeled_target, config=None, heldout=None, epochs=None, workers=1):
    # student tanpa weight decay; tanpa heldout, target dibagi dua
    base = config or labeler.config
    if heldout is None:
        unlabeled_target, heldout = split_target(unlabeled_target, base.seed)
    check_grid(labeler.config, unlabeled_target)
    if len(unlabeled_target) == 0:
        raise ContractError("distillation needs a non-empty target set")
    pseudo = predict(labeler.model, unlabeled_target.phases, labeler.config.input_encoding, workers=workers)
    LOG.info(">>> [DISTILL] %d pseudo-labels from %s (%d positive)", len(pseudo), labeler.model_id(),
             int(pseudo.sum()))
    student_cfg = base.replace(encoder="tiny_cnn", head="softmax", weight_decay=0.0,
                               epochs_s=base.epochs_s if epochs is None else epochs,
                               input_encoding=labeler.config.input_encoding, grid_size=labeler.config.grid_size)
    if student_cfg.oversample and len(np.unique(pseudo)) < 2:
        LOG.warning(">>> [DISTILL] pseudo-labels contain one class only, oversampling disabled")
        student_cfg = student_cfg.replace(oversample=False)
    trainer = Trainer(student_cfg, tag="DISTILL")
    trainer.fit(unlabeled_target.phases, pseudo, student_cfg.epochs_s)
    student = Checkpoint(student_cfg, trainer.model, "trained", trainer.history)
    report = evaluate(student, heldout, domain="target", workers=workers) if heldout.has_labels else None
    return student, report


# ================================================================= #
# ============================ EXPORTS ============================ #
# ================================================================= #

def _require_prototypes(checkpoint):
    if not isinstance(checkpoint.model, PrototypeClassifier):
        raise ContractError(f"operation needs a prototype-head checkpoint, got head '{checkpoint.head}'")


def protospace_rows(checkpoint, dataset, workers=1):
    _require_prototypes(checkpoint)
    model = checkpoint.model
    enc = checkpoint.config.input_encoding
    z = embed(model, dataset.phases, enc, workers=workers).astype(np.float32)
    pred = predict(model, dataset.phases, enc, workers=workers)
    d = model.bank.dim
    header = ["sample_id", "label", "pred"] + [f"z{i}" for i in range(d)]
    rows = []
    for i in range(len(dataset)):
        label = int(dataset.labels[i]) if dataset.has_labels else ""
        rows.append([i, label, int(pred[i])] + [format_float(v) for v in z[i]])
    protos = model.bank.prototypes.data
    for c in range(protos.shape[0]):
        for k in range(protos.shape[1]):
            rows.append(["proto", c, c] + [format_float(v) for v in protos[c, k]])
    return header, rows


def export_protospace(checkpoint, dataset, path, workers=1):
    header, rows = protospace_rows(checkpoint, dataset, workers)
    write_csv(path, header, rows)
    LOG.info(">>> [EXPORT] prototype space: %d rows -> %s", len(rows), path)
    return rows


def nearest_to_prototype(checkpoint, dataset, cls, top=None, workers=1):
    """(sample_id, distance) sorted ascending by distance to the nearest prototype of `cls`."""
    _require_prototypes(checkpoint)
    bank = checkpoint.model.bank
    if not 0 <= int(cls) < bank.num_classes:
        raise ContractError(f"class must lie in [0, {bank.num_classes}), got {cls}")
    if len(dataset) == 0:
        return []
    z = embed(checkpoint.model, dataset.phases, checkpoint.config.input_encoding, workers=workers)
    with no_grad():
        dist = distances(z.astype(bank.prototypes.dtype), bank).data[:, int(cls), :].min(axis=-1)
    order = np.argsort(dist, kind="mergesort")
    if top is not None:
        order = order[:top]
    return [(int(i), float(dist[i])) for i in order]


def export_attention(checkpoint, phase):
    """Central-token attention of the last block for one sample -> (heads, h, w)."""
    encoder = checkpoint.model.encoder
    if not isinstance(encoder, TinySwin):
        raise ContractError(f"attention export needs a tiny_swin encoder, got '{checkpoint.config.encoder}'")
    x = encode_input(np.asarray(phase)[None], checkpoint.config.input_encoding)
    return encoder.last_layer_attention(x)[0]


def write_attention_csv(path, grids):
    stem, ext = os.path.splitext(str(path))
    paths = []
    for head, grid in enumerate(grids):
        out = f"{stem}_head{head}{ext or '.csv'}"
        write_csv(out, [f"c{j}" for j in range(grid.shape[1])], [list(map(float, row)) for row in grid])
        paths.append(out)
    LOG.info(">>> [EXPORT] attention maps for %d heads -> %s_head*.csv", len(paths), stem)
    return paths
