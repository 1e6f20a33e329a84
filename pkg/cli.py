"""Command line: generate / train / adapt / eval / distill / exports / experiments.

Usage: python cli.py <command> [flags]   (python cli.py <command> -h for flags)
"""

import argparse
import logging
import sys

from adapt import adapt, save_pseudo_labels
from config import ENCODERS, ENCODINGS, HEADS, PL_TARGETS, load_config
from errors import ConfigurationError, ContractError, DataError, PinsarError
from experiments import EXPERIMENTS, SCALES, ExperimentRunner
from pipeline import (Checkpoint, distill_to_cnn, evaluate, export_attention, export_protospace,
                      nearest_to_prototype, train, write_attention_csv)
from storage import load_dataset, save_dataset
from syngen import FULL_SCALE_COUNTS, PROFILES, SceneParams, generate_dataset

LOG = logging.getLogger("pinsar")


def build_parser():
    parser = argparse.ArgumentParser(description="Prototype learning on synthetic interferograms")
    parser.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"],
                        help="Level logging")
    parser.add_argument("--workers", type=int, default=1, help="Thread pool size untuk generate/inferensi")
    parser.add_argument("--config", help="File key=value (TrainConfig); flag CLI menimpa nilai file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Sintesis dataset interferogram")
    p.add_argument("--pos", type=int, default=1440)
    p.add_argument("--neg", type=int, default=560)
    p.add_argument("--profile", choices=sorted(PROFILES), default="source")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--full-scale", choices=sorted(FULL_SCALE_COUNTS),
                   help="Pakai jumlah sampel skala penuh untuk split ini (menimpa --pos/--neg)")
    p.add_argument("--unlabeled", action="store_true", help="Tulis tanpa label (target domain)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Training encoder + head")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="Dataset validasi (akurasi per epoch di log)")
    p.add_argument("--encoder", choices=ENCODERS)
    p.add_argument("--head", choices=HEADS)
    p.add_argument("--proto-dim", type=int)
    p.add_argument("--epochs", type=int, dest="epochs_s")
    p.add_argument("--lr", type=float, dest="lr0")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", help="Bobot PL loss, atau 'auto' (3/d)")
    p.add_argument("--pl-target", choices=PL_TARGETS)
    p.add_argument("--encoding", choices=ENCODINGS, dest="input_encoding")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("adapt", help="Pseudo-label + freeze + retrain MLP projection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--epochs-p", type=int)
    p.add_argument("--pseudo-out", help="Simpan pseudo-label sebagai dataset + manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="Evaluasi checkpoint pada dataset berlabel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="source")

    p = sub.add_parser("distill", help="Latih tiny_cnn dari pseudo-label checkpoint")
    p.add_argument("--teacher", required=True, dest="labeler")
    p.add_argument("--target", required=True)
    p.add_argument("--heldout", help="Target berlabel untuk evaluasi (default: separuh --target)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-protospace", help="CSV koordinat prototype space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-attention", help="CSV attention map layer terakhir per head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("nearest", help="Sampel terdekat ke prototype suatu kelas")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--class", type=int, required=True, dest="cls")
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("experiment", help="Eksperimen berpasangan + laporan")
    p.add_argument("name", choices=list(EXPERIMENTS) + ["all"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--out", required=True)
    return parser


def _train_overrides(args):
    keys = ("encoder", "head", "epochs_s", "lr0", "batch_size", "gamma", "lam", "pl_target",
            "input_encoding", "seed")
    overrides = {k: getattr(args, k, None) for k in keys}
    overrides["proto_dim"] = getattr(args, "proto_dim", None)
    if overrides.pop("lam") is not None:
        overrides["lambda"] = args.lam
    return overrides


def cmd_generate(args):
    pos, neg = FULL_SCALE_COUNTS[args.full_scale] if args.full_scale else (args.pos, args.neg)
    dataset = generate_dataset(pos, neg, args.profile, args.seed, SceneParams(grid_size=args.grid_size),
                               workers=args.workers)
    if args.unlabeled:
        dataset = dataset.without_labels()
    save_dataset(args.out, dataset, header={"seed": args.seed})


def cmd_train(args):
    data = load_dataset(args.data)
    overrides = _train_overrides(args)
    overrides["grid_size"] = data.grid_size
    config = load_config(args.config, overrides)
    val = load_dataset(args.val) if args.val else None
    checkpoint = train(data, config, val=val)
    checkpoint.save(args.out)


def cmd_adapt(args):
    checkpoint = Checkpoint.load(args.checkpoint)
    target = load_dataset(args.target)
    config = checkpoint.config
    if args.epochs_p is not None:
        config = config.replace(epochs_p=args.epochs_p)
    adapted, pseudo = adapt(checkpoint, target.without_labels(), config, workers=args.workers)
    if target.has_labels:
        LOG.info(">>> [ADAPT] pseudo-label accuracy vs stored labels: %.2f%%",
                 100.0 * pseudo.accuracy_against(target.labels))
    if args.pseudo_out:
        save_pseudo_labels(args.pseudo_out, target, pseudo)
    adapted.save(args.out)


def cmd_eval(args):
    report = evaluate(Checkpoint.load(args.checkpoint), load_dataset(args.data), args.domain, args.workers)
    print(report.summary())


def cmd_distill(args):
    labeler = Checkpoint.load(args.labeler)
    target = load_dataset(args.target)
    heldout = load_dataset(args.heldout) if args.heldout else None
    if heldout is None and not target.has_labels:
        raise ContractError("distill needs --heldout when --target carries no labels")
    config = load_config(args.config, {}) if args.config else None
    student, report = distill_to_cnn(labeler, target.without_labels() if heldout is not None else target, config,
                                     heldout=heldout, epochs=args.epochs, workers=args.workers)
    student.save(args.out)
    if report is not None:
        print(report.summary())


def cmd_export_protospace(args):
    export_protospace(Checkpoint.load(args.checkpoint), load_dataset(args.data), args.out, args.workers)


def cmd_export_attention(args):
    data = load_dataset(args.data)
    if not 0 <= args.index < len(data):
        raise ConfigurationError(f"--index {args.index} outside dataset of {len(data)} samples")
    grids = export_attention(Checkpoint.load(args.checkpoint), data.phases[args.index])
    for path in write_attention_csv(args.out, grids):
        print(path)


def cmd_nearest(args):
    ranking = nearest_to_prototype(Checkpoint.load(args.checkpoint), load_dataset(args.data), args.cls,
                                   top=args.top, workers=args.workers)
    print("sample_id,distance")
    for sample_id, dist in ranking:
        print(f"{sample_id},{dist:.9g}")


def cmd_experiment(args):
    runner = ExperimentRunner(load_config(args.config, {}), seeds=args.seeds, scale=args.scale,
                              workers=args.workers)
    runner.run(EXPERIMENTS if args.name == "all" else [args.name])
    runner.write_report(args.out)
    print(runner.report())
    runner.verify()


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "distill": cmd_distill,
    "export-protospace": cmd_export_protospace,
    "export-attention": cmd_export_attention,
    "nearest": cmd_nearest,
    "experiment": cmd_experiment,
}


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (PinsarError, OSError) as e:
        LOG.error(">>> [ERROR] %s: %s", type(e).__name__, e)
        return getattr(e, "exit_code", DataError.exit_code)
    return 0


if __name__ == '__main__':
    sys.exit(run())
