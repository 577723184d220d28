"""Command line: featurize | synth | train | eval | sweep.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Every command is deterministic given its inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (Dataset, FoldingTable, SequenceExample, fold_symbols,
                   load_dataset, make_supervised_subset, save_dataset,
                   split_dataset)
from .errors import ConfigError, CtcInfeasibleError, DataError, NumericError
from .features import (FEATURE_PARAMS, FeatureStats, featurize_waveform,
                       normalize, read_wav)
from .tensor import Rng
from .trainer import evaluate, load_checkpoint, train

# offset so CLI-side draws (splits, subsets) do not replay the training
# stream, which train() seeds with the bare training.seed
DATA_SEED_OFFSET = 0x9E3779B9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recladder",
                     description="semi-supervised recurrent ladder networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_feat = sub.add_parser("featurize",
                            help="WAVs + transcripts -> dataset file")
    p_feat.add_argument("--wavs", required=True)
    p_feat.add_argument("--transcripts", required=True,
                        help="dir of *.txt with 'id phone phone...' lines")
    p_feat.add_argument("--folding", required=True)
    p_feat.add_argument("--out", required=True)
    p_feat.add_argument("--expected-classes", type=int, default=39,
                        help="target class count the folding table must "
                             "yield; 0 disables the check")
    p_feat.add_argument("--stats-out", default=None,
                        help="write fitted normalization stats (train mode)")
    p_feat.add_argument("--stats-in", default=None,
                        help="apply existing stats instead of fitting")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--classes", type=int, required=True)
    p_synth.add_argument("--sequences", type=int, required=True)
    p_synth.add_argument("--min-len", type=int, default=20)
    p_synth.add_argument("--max-len", type=int, default=40)
    p_synth.add_argument("--dim", type=int, default=39)
    p_synth.add_argument("--noise", type=float, default=0.3)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train from a config file")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--set", action="append", default=[],
                         metavar="KEY=VALUE", help="override a config key")
    p_train.add_argument("--dump-defaults", action="store_true",
                         help="print all defaults and exit")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", default=None,
                        help="also write PER + distances as JSON")

    p_sweep = sub.add_parser("sweep",
                             help="grid of train runs over sigma x fraction")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--sigmas", required=True,
                         help="comma-separated noise levels")
    p_sweep.add_argument("--fractions", required=True,
                         help="comma-separated label fractions")
    p_sweep.add_argument("--set", action="append", default=[],
                         metavar="KEY=VALUE")
    p_sweep.add_argument("--out", required=True)
    return parser


def cmd_featurize(args) -> int:
    wav_dir = Path(args.wavs)
    wav_paths = sorted(wav_dir.glob("*.wav"))
    if not wav_paths:
        raise DataError(f"no WAV files in {wav_dir}")

    transcripts = {}
    txt_paths = sorted(Path(args.transcripts).glob("*.txt"))
    if not txt_paths:
        raise DataError(f"no transcript files in {args.transcripts}")
    for path in txt_paths:
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) < 2:
                raise DataError(f"{path}:{lineno}: expected 'id phone "
                                f"phone...', got {raw!r}")
            if tokens[0] in transcripts:
                raise DataError(f"{path}:{lineno}: duplicate utterance id "
                                f"{tokens[0]!r}")
            transcripts[tokens[0]] = tokens[1:]

    expected = args.expected_classes if args.expected_classes > 0 else None
    table = FoldingTable.load(args.folding, expected_targets=expected)
    class_names = table.targets
    index = {name: i for i, name in enumerate(class_names)}

    wav_ids = [p.stem for p in wav_paths]
    missing_txt = [i for i in wav_ids if i not in transcripts]
    if missing_txt:
        raise DataError(f"missing transcripts for {missing_txt}")
    missing_wav = sorted(set(transcripts) - set(wav_ids))
    if missing_wav:
        raise DataError(f"transcripts without WAV files: {missing_wav}")

    raw_features = []
    labels = []
    for path, utt_id in zip(wav_paths, wav_ids):
        raw_features.append(featurize_waveform(read_wav(path)))
        folded = fold_symbols(transcripts[utt_id], table)
        if not folded:
            raise DataError(f"{utt_id}: transcript folds to an empty label "
                            "sequence")
        labels.append([index[s] for s in folded])

    if args.stats_in:
        stats = FeatureStats.from_dict(
            json.loads(Path(args.stats_in).read_text()))
        normalized, _ = normalize(raw_features, stats)
        stats_source = str(args.stats_in)
    else:
        normalized, stats = normalize(raw_features)
        stats_source = "fitted"
        if args.stats_out:
            Path(args.stats_out).write_text(json.dumps(stats.to_dict()))

    examples = [SequenceExample(features=f.astype(np.float32), labels=l,
                                id=i)
                for f, l, i in zip(normalized, labels, wav_ids)]
    metadata = dict(FEATURE_PARAMS)
    metadata["normalization"] = stats_source
    dataset = Dataset(examples, class_names, metadata)
    save_dataset(dataset, args.out)
    print(f"wrote {len(examples)} examples, width {dataset.feature_dim}, "
          f"{len(class_names)} classes -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .data import synth_dataset

    if args.min_len > args.max_len:
        raise ConfigError(f"--min-len {args.min_len} > --max-len "
                          f"{args.max_len}")
    d = synth_dataset(args.classes, args.sequences,
                      (args.min_len, args.max_len), proto_dim=args.dim,
                      noise_level=args.noise, seed=args.seed)
    save_dataset(d, args.out)
    print(f"wrote {len(d)} synthetic examples ({args.classes} classes) "
          f"-> {args.out}")
    return 0


def _resolve_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required (or use --dump-defaults)")
    cfg = RunConfig.load(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def run_training(cfg: RunConfig, out_dir) -> tuple:
    v = cfg.values
    if not v["data.train"]:
        raise ConfigError("config is missing data.train")
    full = load_dataset(v["data.train"])
    data_rng = Rng(v["training.seed"] + DATA_SEED_OFFSET)
    if v["data.valid"]:
        train_part = full
        valid = load_dataset(v["data.valid"])
    else:
        train_part, valid = split_dataset(full, v["data.valid_fraction"],
                                          data_rng)
    supervised = make_supervised_subset(
        train_part.labeled(), v["data.label_fraction"], v["data.min_count"],
        data_rng)
    config = cfg.ladder_config(train_part.feature_dim, train_part.n_classes)
    settings = cfg.train_settings()
    header = cfg.dump().splitlines()
    header.append(f"# resolved: input_dim={config.input_dim} "
                  f"n_classes={config.n_classes} "
                  f"supervised={len(supervised)} "
                  f"unsupervised={len(train_part)} valid={len(valid)}")
    ckpt, metrics = train(config, settings, supervised, train_part, valid,
                          out_dir, header_lines=header)
    return ckpt, metrics, supervised


def cmd_train(args) -> int:
    if args.dump_defaults:
        print(RunConfig.defaults().dump(), end="")
        return 0
    if args.out is None:
        raise ConfigError("--out is required")
    cfg = _resolve_config(args)
    ckpt, metrics, supervised = run_training(cfg, args.out)
    best = ckpt.metadata["best_valid_per"]
    print(f"supervised subset: {len(supervised)} sequences")
    print(f"best validation PER {best:.4f} at epoch "
          f"{ckpt.metadata['epoch']} ({len(metrics)} epochs run)")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.bin'}")
    print(f"metrics: {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    value, distances = evaluate(ckpt, dataset)
    print(f"PER {value:.6f} over {len(distances)} sequences")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"per": value, "distances": distances}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    base = _resolve_config(args)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    fractions = [float(f) for f in args.fractions.split(",")]
    out_root = Path(args.out)
    results = []
    for sigma in sigmas:
        for fraction in fractions:
            cell = RunConfig(dict(base.values))
            cell.set("model.sigma", repr(sigma))
            cell.set("data.label_fraction", repr(fraction))
            cell_dir = out_root / f"sigma{sigma:g}_frac{fraction:g}"
            ckpt, _, _ = run_training(cell, cell_dir)
            best = ckpt.metadata["best_valid_per"]
            results.append((sigma, fraction, best))
            print(f"sigma={sigma:g} fraction={fraction:g} "
                  f"best_per={best:.4f} -> {cell_dir / 'metrics.csv'}")
    best = min(results, key=lambda r: r[2])
    print(f"best cell: sigma={best[0]:g} fraction={best[1]:g} "
          f"per={best[2]:.4f}")
    return 0


COMMANDS = {
    "featurize": cmd_featurize,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, CtcInfeasibleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # bad argument values (e.g. --classes 1)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
