# Harness eksperimen berpasangan (seed & split data yang sama untuk semua varian):
#   heads   : prototype head vs softmax head, akurasi di target domain
#   adapt   : gain adaptasi pseudo-label + retensi akurasi source
#   distill : tiny_cnn dari pseudo-label vs tiny_cnn source-only
#   dims    : ablasi dimensi prototype space
# Hasil ditulis sebagai laporan teks, seperti laporan akhir otomasi.

import logging
import zlib
from dataclasses import dataclass

import numpy as np

from adapt import adapt
from errors import AcceptanceError, ConfigurationError, NumericalAbort
from pipeline import Trainer, Checkpoint, distill_to_cnn, evaluate, split_target, train
from syngen import DESK_SCALE_COUNTS, FULL_SCALE_COUNTS, SceneParams, generate_dataset

EXPERIMENTS = ("heads", "adapt", "distill", "dims")
SCALES = {
    "full": FULL_SCALE_COUNTS,
    "desk": DESK_SCALE_COUNTS,
    "small": {name: (pos // 10, neg // 10) for name, (pos, neg) in DESK_SCALE_COUNTS.items()},
}
DEFAULT_DIMS = (3, 100)
# acceptance thresholds, in accuracy points
SOURCE_VAL_MIN = 90.0
HEAD_TOLERANCE = 1.0
ADAPT_GAIN_MIN = 1.0
SOURCE_DROP_MAX = 2.0


def split_seed(seed, name):
    """Independent dataset seed per (run seed, split name)."""
    seq = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Splits:
    train: object
    val: object
    target_adapt: object
    target_heldout: object


@dataclass
class ResultRow:
    experiment: str
    seed: int
    variant: str
    domain: str
    acc: float


class ExperimentRunner:
    def __init__(self, base_config, seeds=(0, 1, 2), scale="desk", workers=1):
        if scale not in SCALES:
            raise ConfigurationError(f"scale must be one of {sorted(SCALES)}, got '{scale}'")
        self.base = base_config.validate()
        self.seeds = tuple(seeds)
        self.scale = scale
        self.workers = workers
        self.logger = logging.getLogger(__name__)
        self.rows = []
        self.notes = []
        self.failures = []
        self._splits = {}
        self._trained = {}

    # ---------------------------------------------------------------- data
    def splits(self, seed):
        if seed not in self._splits:
            counts = SCALES[self.scale]
            gen = {"workers": self.workers, "scene": SceneParams(grid_size=self.base.grid_size)}
            train_set = generate_dataset(*counts["train"], "source", split_seed(seed, "train"), **gen)
            val_set = generate_dataset(*counts["val"], "source", split_seed(seed, "val"), **gen)
            target = generate_dataset(*counts["target"], "target", split_seed(seed, "target"), **gen)
            target_adapt, target_heldout = split_target(target, seed)
            self._splits[seed] = Splits(train_set, val_set, target_adapt, target_heldout)
        return self._splits[seed]

    def config(self, seed, **changes):
        return self.base.replace(seed=seed, **changes)

    def trained(self, seed, **changes):
        key = (seed,) + tuple(sorted(changes.items()))
        if key not in self._trained:
            s = self.splits(seed)
            self.logger.info(">>> [TRAIN] seed=%d %s", seed, changes or "base config")
            self._trained[key] = train(s.train, self.config(seed, **changes), val=s.val)
        return self._trained[key]

    def _record(self, experiment, seed, variant, domain, report):
        self.rows.append(ResultRow(experiment, seed, variant, domain, report.acc_percent))
        return report.acc_percent

    def mean(self, experiment, variant, domain):
        values = [r.acc for r in self.rows
                  if r.experiment == experiment and r.variant == variant and r.domain == domain]
        return float(np.mean(values)) if values else float("nan")

    def _note(self, text):
        self.notes.append(text)
        self.logger.info(">>> [RESULT] %s", text)

    def _check(self, ok, text):
        self._note(f"{text} ({'OK' if ok else 'FAIL'})")
        if not ok:
            self.failures.append(text)
        return ok

    # ---------------------------------------------------------- acceptance
    def check_heads(self):
        val = self.mean("heads", "prototype", "val")
        gap = self.mean("heads", "prototype", "target") - self.mean("heads", "softmax", "target")
        self._check(val >= SOURCE_VAL_MIN,
                    f"heads: prototype source-val accuracy {val:.2f}% (min {SOURCE_VAL_MIN:.0f}%)")
        self._check(gap >= -HEAD_TOLERANCE,
                    f"heads: prototype - softmax target accuracy = {gap:+.2f} points (min -{HEAD_TOLERANCE:g})")

    def check_adaptation(self):
        gain = self.mean("adapt", "pseudo", "target") - self.mean("adapt", "before", "target")
        drop = self.mean("adapt", "before", "val") - self.mean("adapt", "pseudo", "val")
        oracle_gap = self.mean("adapt", "oracle", "target") - self.mean("adapt", "pseudo", "target")
        self._check(gain >= ADAPT_GAIN_MIN, f"adapt: target gain {gain:+.2f} points (min {ADAPT_GAIN_MIN:g})")
        self._check(drop <= SOURCE_DROP_MAX, f"adapt: source drop {drop:+.2f} points (max {SOURCE_DROP_MAX:g})")
        self._check(oracle_gap >= 0.0, f"adapt: oracle - pseudo target accuracy {oracle_gap:+.2f} points (min 0)")

    def check_distillation(self):
        diff = self.mean("distill", "pseudo_cnn", "target") - self.mean("distill", "source_cnn", "target")
        self._check(diff > 0.0, f"distill: pseudo-label CNN - source-only CNN = {diff:+.2f} points (must be > 0)")

    def verify(self):
        """Raise AcceptanceError when any threshold checked so far was missed."""
        if self.failures:
            raise AcceptanceError(self.failures)

    # ---------------------------------------------------------- experiments
    def heads(self):
        for seed in self.seeds:
            s = self.splits(seed)
            for head in ("prototype", "softmax"):
                ckpt = self.trained(seed, head=head)
                self._record("heads", seed, head, "val", evaluate(ckpt, s.val, "val", self.workers))
                self._record("heads", seed, head, "target",
                             evaluate(ckpt, s.target_heldout, "target", self.workers))
        self.check_heads()

    def adaptation(self):
        for seed in self.seeds:
            s = self.splits(seed)
            ckpt = self.trained(seed, head="prototype")
            self._record("adapt", seed, "before", "val", evaluate(ckpt, s.val, "val", self.workers))
            self._record("adapt", seed, "before", "target",
                         evaluate(ckpt, s.target_heldout, "target", self.workers))
            adapted, pseudo = adapt(ckpt, s.target_adapt.without_labels(), workers=self.workers)
            self.logger.info(">>> [ADAPT] seed=%d pseudo-label accuracy %.2f%%", seed,
                             100.0 * pseudo.accuracy_against(s.target_adapt.labels))
            self._record("adapt", seed, "pseudo", "val", evaluate(adapted, s.val, "val", self.workers))
            self._record("adapt", seed, "pseudo", "target",
                         evaluate(adapted, s.target_heldout, "target", self.workers))
            oracle, _ = adapt(ckpt, s.target_adapt, oracle_labels=s.target_adapt.labels, workers=self.workers)
            self._record("adapt", seed, "oracle", "target",
                         evaluate(oracle, s.target_heldout, "target", self.workers))
        self.check_adaptation()

    def distillation(self):
        for seed in self.seeds:
            s = self.splits(seed)
            labeler = self.trained(seed, head="prototype")
            student, report = distill_to_cnn(labeler, s.target_adapt.without_labels(),
                                             heldout=s.target_heldout, workers=self.workers)
            self._record("distill", seed, "pseudo_cnn", "target", report)
            source_cfg = student.config
            trainer = Trainer(source_cfg, tag="TRAIN")
            trainer.fit(s.train.phases, s.train.labels, source_cfg.epochs_s)
            source_only = Checkpoint(source_cfg, trainer.model, "trained", trainer.history)
            self._record("distill", seed, "source_cnn", "target",
                         evaluate(source_only, s.target_heldout, "target", self.workers))
        self.check_distillation()

    def dimensions(self, dims=DEFAULT_DIMS):
        completed = []
        for d in dims:
            for seed in self.seeds:
                s = self.splits(seed)
                changes = {"head": "prototype"}
                if d != self.base.proto_dim:
                    changes["proto_dim"] = d
                try:
                    ckpt = self.trained(seed, **changes)
                except NumericalAbort as e:
                    self.logger.error(">>> [ERROR] d=%d seed=%d aborted: %s", d, seed, e)
                    continue
                self._record("dims", seed, f"d={d}", "target",
                             evaluate(ckpt, s.target_heldout, "target", self.workers))
                completed.append(d)
        for d in dims:
            self._note(f"dims: d={d} mean target accuracy {self.mean('dims', f'd={d}', 'target'):.2f}% "
                       f"({completed.count(d)}/{len(self.seeds)} runs completed)")
        if len(dims) >= 2:
            lo, hi = dims[0], dims[-1]
            order = self.mean("dims", f"d={lo}", "target") >= self.mean("dims", f"d={hi}", "target")
            self._note(f"dims: d={lo} >= d={hi} observed: {order}")
        return completed

    def run(self, names):
        for name in names:
            if name == "heads":
                self.heads()
            elif name == "adapt":
                self.adaptation()
            elif name == "distill":
                self.distillation()
            elif name == "dims":
                self.dimensions()
            else:
                raise ConfigurationError(f"unknown experiment '{name}'")
        return self.rows

    # --------------------------------------------------------------- report
    def report(self):
        line = "=" * 56
        out = [line, f"HASIL EKSPERIMEN ({self.scale} scale, seeds {list(self.seeds)})", line,
               f"Config : {self.base.fingerprint()[:16]}",
               f"{'experiment':<10} {'seed':>4}  {'variant':<12} {'domain':<7} {'acc':>7}"]
        for r in self.rows:
            out.append(f"{r.experiment:<10} {r.seed:>4}  {r.variant:<12} {r.domain:<7} {r.acc:>6.2f}%")
        out.append(line)
        out.extend(self.notes)
        out.append(f"Verdict : {'GAGAL' if self.failures else 'LULUS'} ({len(self.failures)} threshold gagal)")
        out.append(line)
        return "\n".join(out) + "\n"

    def write_report(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.report())
        self.logger.info(">>> [EXPORT] experiment report -> %s", path)
