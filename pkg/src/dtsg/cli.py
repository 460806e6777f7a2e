"""Operator entry point.

Subcommands: generate (synthetic corpora), mine (offline negative mining),
train, eval, export, bench, ablate.  Every command reads an optional flat
config file, applies repeatable ``--set key=value`` overrides, dumps the
effective configuration next to its outputs, and is deterministic given
``--seed``.  The loader thread pool is bounded by DTSG_NUM_WORKERS.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import evaluation as ev
from .config import (DataConfig, LossToggles, ModelConfig, TrainConfig,
                     apply_overrides, build_configs, flatten_configs,
                     read_config_file, write_config_file)
from .data import (Dataset, DatasetError, Vocabulary, load_dataset,
                   split_rare_common, word_frequency_table)
from .model import FeatureCache, np_dtype
from .sampling import NegativeTable, mine_negatives
from .synthetic import (InfeasibleSpec, SyntheticSpec, corpus_to_disk,
                        generate_corpus, spec_from_flat)
from .training import model_from_checkpoint, train

logger = logging.getLogger("dtsg")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID_SPEC = 2

ABLATION_ROWS = {
    "backbone": dict(bias1=False, bias2=False, bias3=False, debias=False,
                     contras=False, sample=False),
    "sample": dict(bias1=False, bias2=False, bias3=False, debias=False,
                   contras=False, sample=True),
    "bias1": dict(bias1=True, bias2=False, bias3=False, debias=True,
                  contras=True, sample=True),
    "bias2": dict(bias1=False, bias2=True, bias3=False, debias=True,
                  contras=True, sample=True),
    "bias3": dict(bias1=False, bias2=False, bias3=True, debias=True,
                  contras=True, sample=True),
    "full": dict(bias1=True, bias2=True, bias3=True, debias=True,
                 contras=True, sample=True),
}


def _load_effective(args) -> dict:
    values = read_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set or [])
    if getattr(args, "seed", None) is not None:
        values["train.seed"] = args.seed
    return values


def _configs(args) -> tuple[dict, ModelConfig, TrainConfig, DataConfig]:
    values = _load_effective(args)
    cfgs = build_configs(values)
    return values, cfgs["model"], cfgs["train"], cfgs["data"]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_effective(values: dict, out: Path, name: str = "effective.cfg"):
    write_config_file(values, out / name)


def _load_split(data_dir: Path, split: str, dcfg: DataConfig) -> Dataset:
    return load_dataset(data_dir / "features", data_dir / f"{split}.jsonl",
                        dcfg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = _out_dir(args)
    try:
        values = read_config_file(args.spec) if args.spec else {}
        values = apply_overrides(values, args.set or [])
        if args.seed is not None:
            values["seed"] = args.seed
        spec = spec_from_flat(values)
        corpus = generate_corpus(spec)
    except InfeasibleSpec as exc:
        print(f"generate: infeasible spec: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    except (ValueError, KeyError) as exc:
        print(f"generate: invalid spec: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    corpus_to_disk(corpus, out)
    write_config_file(dataclasses.asdict(spec), out / "spec.cfg")
    print(f"generate: wrote {len(corpus.train)}/{len(corpus.val)}/"
          f"{len(corpus.test)} train/val/test samples to {out}")
    return EXIT_OK


def cmd_mine(args) -> int:
    out = _out_dir(args)
    values, _, _, dcfg = _configs(args)
    try:
        train_set = _load_split(Path(args.data), "train", dcfg)
    except DatasetError as exc:
        print(f"mine: data-model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    table = mine_negatives(train_set)
    table.save(out / "negatives.json")
    _dump_effective(values, out, "mine.effective.cfg")
    with_negs = sum(1 for sid in table.entries
                    if table.neg_videos(sid) or table.neg_queries(sid))
    print(f"mine: {with_negs}/{len(train_set)} samples have negatives; "
          f"table at {out / 'negatives.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    values, mcfg, tcfg, dcfg = _configs(args)
    try:
        data_dir = Path(args.data)
        train_set = _load_split(data_dir, "train", dcfg)
        val_set = _load_split(data_dir, "val", dcfg)
    except DatasetError as exc:
        print(f"train: data-model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    table = None
    if tcfg.toggles.sample:
        neg_path = Path(args.negatives) if args.negatives \
            else data_dir / "negatives.json"
        if not neg_path.exists():
            print(f"train: contrastive-sampler: no negative table at "
                  f"{neg_path}; run `dtsg mine` first", file=sys.stderr)
            return EXIT_ERROR
        table = NegativeTable.load(neg_path)
    mcfg = dataclasses.replace(mcfg, clip_count=dcfg.clip_count,
                               query_len=dcfg.query_len)
    _dump_effective(values, out)
    result = train(train_set, val_set, mcfg, tcfg, table, out_dir=out)
    print(f"train: best val R@1,IoU=0.5 {100 * result.best_val_recall:.2f}% "
          f"at epoch {result.best_epoch}; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def _rare_common_splits(data_dir: Path, dataset: Dataset,
                        dcfg: DataConfig) -> dict[str, Dataset]:
    train_set = _load_split(data_dir, "train", dcfg)
    table = word_frequency_table(train_set)
    rare, common = split_rare_common(dataset, table, dcfg.rare_threshold)
    return {"rare": rare, "common": common}


def cmd_eval(args) -> int:
    out = _out_dir(args)
    values, _, _, dcfg = _configs(args)
    data_dir = Path(args.data)
    try:
        dataset = _load_split(data_dir, args.split, dcfg)
    except DatasetError as exc:
        print(f"eval: data-model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    grid = tuple((int(n), float(m)) for n, m in
                 (cell.split(":") for cell in args.grid.split(",")))
    try:
        if args.predictions:
            preds = ev.load_predictions(args.predictions)
        else:
            ckpt = ckpt_io.load_checkpoint(args.ckpt)
            vocab = Vocabulary.load(Path(args.vocab)) if args.vocab else \
                Vocabulary.load(Path(args.ckpt).parent / "vocab.json")
            model, mcfg = model_from_checkpoint(ckpt, vocab_size=len(vocab))
            preds = ev.predict_dataset(model, dataset, vocab,
                                       n=max(n for n, _ in grid))
            ev.write_predictions(preds, out / f"predictions_{args.split}.jsonl")
        splits = (_rare_common_splits(data_dir, dataset, dcfg)
                  if args.splits else None)
        cells = ev.evaluate(preds, dataset, grid, splits)
    except ev.PredictionMismatch as exc:
        print(f"eval: evaluation: {exc}", file=sys.stderr)
        return EXIT_ERROR
    ev.write_report_csv(cells, out / f"report_{args.split}.csv")
    ev.write_split_plot(cells, out / f"recall_{args.split}.csv",
                        out / f"recall_{args.split}.png")
    _dump_effective(values, out, "eval.effective.cfg")
    for c in cells:
        print(f"eval: {c.split:7s} R@{c.n},IoU={c.m}: {c.recall:.2f}% "
              f"({c.count} samples)")
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        full = ckpt_io.load_checkpoint(args.ckpt)
    except (OSError, ValueError) as exc:
        print(f"export: checkpoint: {exc}", file=sys.stderr)
        return EXIT_ERROR
    slim = ckpt_io.export_backbone(full)
    out_path = Path(args.out)
    if out_path.is_dir():
        out_path = out_path / "backbone.ckpt"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save_checkpoint(slim, out_path)
    print(f"export: kept {slim.parameter_count()} of "
          f"{full.parameter_count()} parameters "
          f"(tags {sorted(slim.tag_set())}); wrote {out_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _out_dir(args)
    values, _, _, dcfg = _configs(args)
    data_dir = Path(args.data)
    try:
        dataset = _load_split(data_dir, args.split, dcfg)
    except DatasetError as exc:
        print(f"bench: data-model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    ckpt = ckpt_io.load_checkpoint(args.ckpt)
    vocab = Vocabulary.load(Path(args.vocab)) if args.vocab else \
        Vocabulary.load(Path(args.ckpt).parent / "vocab.json")
    model, _ = model_from_checkpoint(ckpt, vocab_size=len(vocab))
    report = ev.benchmark_inference(model, dataset, vocab, reps=args.reps)
    payload = dataclasses.asdict(report)
    (out / "bench.json").write_text(json.dumps(payload, indent=2))
    _dump_effective(values, out, "bench.effective.cfg")
    print(f"bench: {report.mean_latency * 1000:.3f} ms/sample "
          f"(+- {report.std_latency * 1000:.3f}), params by tag "
          f"{report.param_counts}, inference touches "
          f"{report.touched_params} parameters")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    values, mcfg, tcfg, dcfg = _configs(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        print(f"ablate: unknown rows {unknown}; choose from "
              f"{sorted(ABLATION_ROWS)}", file=sys.stderr)
        return EXIT_ERROR
    seeds = [int(s) for s in args.seeds.split(",")]
    data_dir = Path(args.data)
    try:
        train_set = _load_split(data_dir, "train", dcfg)
        val_set = _load_split(data_dir, "val", dcfg)
        test_set = _load_split(data_dir, "test", dcfg)
    except DatasetError as exc:
        print(f"ablate: data-model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    splits = _rare_common_splits(data_dir, test_set, dcfg)
    neg_path = Path(args.negatives) if args.negatives \
        else data_dir / "negatives.json"
    table = NegativeTable.load(neg_path) if neg_path.exists() else None
    mcfg = dataclasses.replace(mcfg, clip_count=dcfg.clip_count,
                               query_len=dcfg.query_len)
    _dump_effective(values, out, "ablate.effective.cfg")

    import csv as _csv
    rows_out = []
    for row_name in rows:
        toggles = LossToggles(**ABLATION_ROWS[row_name])
        row_seeds = seeds if row_name in args.full_seed_rows.split(",") \
            else seeds[:1]
        for seed in row_seeds:
            row_cfg = dataclasses.replace(tcfg, seed=seed, toggles=toggles)
            if toggles.sample and table is None:
                print("ablate: contrastive-sampler: negatives.json missing",
                      file=sys.stderr)
                return EXIT_ERROR
            run_dir = out / f"{row_name}_seed{seed}"
            result = train(train_set, val_set, mcfg, row_cfg,
                           table if toggles.sample else None,
                           out_dir=run_dir)
            model, _ = model_from_checkpoint(result.checkpoint)
            preds = ev.predict_dataset(model, test_set, result.vocab, n=5)
            cells = ev.evaluate(preds, test_set,
                                ((1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7)),
                                splits)
            for c in cells:
                rows_out.append([row_name, seed, c.split, c.n, c.m,
                                 f"{c.recall:.4f}", c.count])
            r1 = next(c for c in cells
                      if c.split == "rare" and c.n == 1 and c.m == 0.5)
            print(f"ablate: {row_name} seed {seed}: rare R@1,IoU=0.5 "
                  f"{r1.recall:.2f}%")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["row", "seed", "split", "n", "m", "recall", "count"])
        writer.writerows(rows_out)
    print(f"ablate: comparison table at {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtsg",
        description="debiased temporal sentence grounding at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true",
                       help="accepted for compatibility; runs are always "
                            "deterministic under a fixed seed")
        if data:
            p.add_argument("--data", required=True,
                           help="corpus directory (features/ + *.jsonl)")

    p = sub.add_parser("generate", help="write a synthetic bias-planted corpus")
    common(p, data=False)
    p.add_argument("--spec", default=None, help="synthetic spec file")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("mine", help="mine contrastive negatives offline")
    common(p)
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("train", help="optimize a model")
    common(p)
    p.add_argument("--negatives", default=None,
                   help="negative table (default <data>/negatives.json)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metric grid over a split")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--predictions", default=None,
                   help="evaluate a prediction dump instead of a checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--grid", default="1:0.5,1:0.7,5:0.5,5:0.7",
                   help="comma list of n:m cells")
    p.add_argument("--splits", action="store_true",
                   help="also report rare/common breakdowns")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="strip a checkpoint to the backbone")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("bench", help="inference latency and parameter parity")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train+eval per loss-toggle row")
    common(p)
    p.add_argument("--negatives", default=None)
    p.add_argument("--rows",
                   default="backbone,sample,bias1,bias2,bias3,full")
    p.add_argument("--seeds", default="0")
    p.add_argument("--full-seed-rows", default="backbone,full",
                   help="rows trained with every seed (others use the first)")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface the failing component in the exit
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
