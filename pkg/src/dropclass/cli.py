"""Command-line front end: gen-data, train, adapt, evaluate, diagnose.

Exit codes: 0 success, 2 config/validation error, 3 IO error, 4 numeric
abort (the last-good checkpoint is retained).  ``DCK_THREADS`` is accepted
as an optional cap on intra-step parallelism; the numpy implementation is
effectively single-threaded, so it is validated but otherwise a no-op.
"""

import argparse
import hashlib
import json
import os
import sys

from . import corpus as corpus_mod
from . import evaluation, schedule, trainer
from .config import RunConfig, schema_help
from .errors import DropClassError, FormatError, NumericError, ValidationError
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _split_overrides(extra):
    """Turn leftover ['--drop.mode', 'dropclass', ...] args into pairs."""
    overrides = []
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise ValidationError(f"unrecognized argument {arg!r} (overrides look like --section.key value)")
        if "=" in arg:
            dotted, value = arg[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ValidationError(f"override {arg!r} is missing a value")
            dotted, value = arg[2:], extra[i + 1]
            i += 1
        overrides.append((dotted, value))
        i += 1
    return overrides


def _load_splits(corpus_dir):
    """Read corpus.dck + manifest.tsv and rebuild the tagged splits."""
    corpus_path = os.path.join(corpus_dir, "corpus.dck")
    manifest_path = os.path.join(corpus_dir, "manifest.tsv")
    full = corpus_mod.read_corpus(corpus_path)
    entries = corpus_mod.read_manifest(manifest_path)
    by_id = full.by_id()
    splits = {}
    for utt_id, (_class_id, tag) in entries.items():
        if utt_id not in by_id:
            raise FormatError(f"manifest references unknown utterance {utt_id!r}")
        splits.setdefault(tag, []).append(by_id[utt_id])
    return {tag: corpus_mod.LabeledCorpus(utts, n_classes=full.n_classes, split_tag=tag)
            for tag, utts in splits.items()}


def _write_run_manifest(path, cfg: RunConfig, command, source_checkpoint=None):
    record = {"command": command, "config": cfg.to_dict(),
              "train_seed": cfg.train_seed(), "eval_seed": cfg.eval_seed()}
    if source_checkpoint is not None:
        with open(source_checkpoint, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        record["source_checkpoint"] = {"path": os.path.abspath(source_checkpoint),
                                       "sha256": digest}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    spec = cfg.corpus_spec()
    full = corpus_mod.generate_corpus(spec)
    train, enrol, test = corpus_mod.split_corpus(full, cfg.get("corpus", "train_class_fraction"),
                                                 seed=spec.seed)
    trials = corpus_mod.make_trials(test, cfg.get("corpus", "n_target_trials"),
                                    cfg.get("corpus", "n_nontarget_trials"), seed=spec.seed)
    corpus_mod.write_corpus(full, os.path.join(out_dir, "corpus.dck"))
    corpus_mod.write_manifest([train, enrol, test], os.path.join(out_dir, "manifest.tsv"))
    corpus_mod.write_trials(trials, os.path.join(out_dir, "trials.tsv"))
    print(f"wrote corpus ({len(full)} utts, {full.n_classes} classes) to {out_dir}")
    return EXIT_OK


def _finish_training(out_dir, model, metrics):
    metrics.to_csv(os.path.join(out_dir, "metrics.csv"))
    metrics.write_refresh_log(os.path.join(out_dir, "refresh.log"))


def cmd_train(cfg: RunConfig, corpus_dir, out_dir):
    tc = cfg.train_config()
    if tc.drop_mode not in ("none", "dropclass"):
        raise ValidationError(f"mode {tc.drop_mode!r} is a fine-tuning mode; use the adapt command")
    os.makedirs(out_dir, exist_ok=True)
    splits = _load_splits(corpus_dir)
    train_split, _ = corpus_mod.reindex_classes(splits["train"])
    enrol = splits.get("enrol")
    checkpoint = os.path.join(out_dir, "checkpoint.dckm")
    model, metrics = trainer.train(tc, train_split, enrol_data=enrol,
                                   checkpoint_path=checkpoint)
    _finish_training(out_dir, model, metrics)
    _write_run_manifest(os.path.join(out_dir, "run.json"), cfg, "train")
    print(f"trained {tc.total_iterations} iterations; final loss "
          f"{metrics.losses[-1]:.4f}; checkpoint at {checkpoint}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, checkpoint_path, corpus_dir, out_dir):
    tc = cfg.train_config(adapt=True)
    allowed = ("dropadapt", "dropadapt_combine", "drop_random", "drop_only_data", "none")
    if tc.drop_mode not in allowed:
        raise ValidationError(f"mode {tc.drop_mode!r} is a training mode; use the train command")
    os.makedirs(out_dir, exist_ok=True)
    splits = _load_splits(corpus_dir)
    train_split, _ = corpus_mod.reindex_classes(splits["train"])
    enrol = splits.get("enrol")
    if tc.drop_mode in schedule.PROBABILITY_MODES and enrol is None:
        raise ValidationError(f"mode {tc.drop_mode!r} requires an enrol split in the manifest")
    source = load_checkpoint(checkpoint_path)
    out_checkpoint = os.path.join(out_dir, "checkpoint.dckm")
    model, metrics = trainer.adapt(source, tc, train_split, enrol_data=enrol,
                                   checkpoint_path=out_checkpoint)
    _finish_training(out_dir, model, metrics)
    _write_run_manifest(os.path.join(out_dir, "run.json"), cfg, "adapt",
                        source_checkpoint=checkpoint_path)
    print(f"adapted for {tc.total_iterations} iterations (mode {tc.drop_mode}); "
          f"active classes {model.active.size}; checkpoint at {out_checkpoint}")
    return EXIT_OK


def _resolve_corpus_file(manifest_path, corpus_file):
    if corpus_file is not None:
        return corpus_file
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "corpus.dck")


def cmd_evaluate(checkpoint_path, manifest_path, trials_path, out_dir, corpus_file=None):
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(checkpoint_path)
    entries = corpus_mod.read_manifest(manifest_path)
    full = corpus_mod.read_corpus(_resolve_corpus_file(manifest_path, corpus_file))
    trials = corpus_mod.read_trials(trials_path)
    needed = {a for a, _, _ in trials.trials} | {b for _, b, _ in trials.trials}
    missing = needed - set(entries)
    if missing:
        raise ValidationError(f"trials reference utterances missing from the manifest: {sorted(missing)[:3]}...")
    by_id = full.by_id()
    utts = [by_id[i] for i in sorted(needed)]
    scored = evaluation.score_trials(model, utts, trials)
    result = evaluation.eer_from_scored(scored)
    evaluation.write_scores(scored, os.path.join(out_dir, "scores.tsv"))
    n_tar = sum(1 for t in trials.trials if t[2])
    evaluation.write_eer_json(result, n_tar, len(trials.trials) - n_tar,
                              os.path.join(out_dir, "eer.json"))
    print(f"EER {100 * result.eer:.2f}% at threshold {result.threshold:.4f} "
          f"({len(trials.trials)} trials)")
    return EXIT_OK


def cmd_diagnose(checkpoint_path, manifest_path, out_dir, split="test",
                 n_bootstrap=300, seed=0, corpus_file=None):
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(checkpoint_path)
    entries = corpus_mod.read_manifest(manifest_path)
    full = corpus_mod.read_corpus(_resolve_corpus_file(manifest_path, corpus_file))
    by_id = full.by_id()
    utts = [by_id[i] for i, (_c, tag) in entries.items() if tag == split and i in by_id]
    if not utts:
        raise ValidationError(f"manifest has no utterances with split tag {split!r}")
    data = corpus_mod.LabeledCorpus(utts, n_classes=full.n_classes, split_tag=split)
    p = schedule.p_average(model, data)
    kl = evaluation.kl_to_uniform(p)
    report = evaluation.bootstrap_ranked_probabilities(model, data, n_bootstrap=n_bootstrap,
                                                       seed=seed)
    report.to_csv(os.path.join(out_dir, "ranked_probs.csv"))
    with open(os.path.join(out_dir, "kl.json"), "w", encoding="utf-8") as fh:
        json.dump({"kl_to_uniform": kl}, fh, indent=2)
        fh.write("\n")
    print(f"KL to uniform on split {split!r}: {kl:.4f} nats ({len(utts)} utterances)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dropclass",
        description="Class-dropping training and adaptation for embedding extractors.",
        epilog="Config keys (override any with --section.key value):\n\n" + schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus, splits, and trials")
    p.add_argument("--config", help="run config file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model (modes: none, dropclass)")
    p.add_argument("--config", help="run config file")
    p.add_argument("--corpus", required=True, help="directory with corpus.dck and manifest.tsv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("adapt", help="fine-tune a trained model (dropadapt family and controls)")
    p.add_argument("--config", help="run config file")
    p.add_argument("--checkpoint", required=True, help="source checkpoint")
    p.add_argument("--corpus", required=True, help="directory with corpus.dck and manifest.tsv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score trials and compute EER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--corpus-file", help="corpus.dck (default: next to the manifest)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="ranked-probability bootstrap and KL-to-uniform")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="manifest split tag to diagnose (default test)")
    p.add_argument("--n-bootstrap", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus-file", help="corpus.dck (default: next to the manifest)")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    os.environ.get("DCK_THREADS")  # accepted; implementation is single-threaded
    try:
        overrides = _split_overrides(extra)
        if args.command in ("gen-data", "train", "adapt"):
            cfg = RunConfig.load(getattr(args, "config", None), overrides)
        elif overrides:
            raise ValidationError(f"command {args.command!r} takes no config overrides")

        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.corpus, args.out)
        if args.command == "adapt":
            return cmd_adapt(cfg, args.checkpoint, args.corpus, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint, args.manifest, args.trials, args.out,
                                corpus_file=args.corpus_file)
        if args.command == "diagnose":
            cfg = RunConfig.load(None, [])
            n_boot = args.n_bootstrap if args.n_bootstrap is not None else cfg.get("eval", "n_bootstrap")
            seed = args.seed if args.seed is not None else cfg.eval_seed()
            return cmd_diagnose(args.checkpoint, args.manifest, args.out, split=args.split,
                                n_bootstrap=n_boot, seed=seed, corpus_file=args.corpus_file)
        raise ValidationError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, DropClassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
