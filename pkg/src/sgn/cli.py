"""Command-line interface.

Subcommands: make-corpus, train-parser, parse, train-sgn, gen-tree, generate,
evaluate, compare. The artifact directory defaults to $SGN_ARTIFACT_ROOT.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, restore_modules, save_checkpoint
from .config import ExperimentConfig
from .corpus import (
    SyntheticConfig,
    Vocabulary,
    by_partition,
    detokenize,
    make_synthetic_corpus,
    save_corpus,
)
from .errors import SgnError
from .generator import generate_recipe
from .img2tree import generate_tree
from .metrics import EvalReport, compare_reports
from .pipeline import (
    evaluate_split,
    load_corpus,
    parser_config,
    rebuild_system,
    run_pipeline,
)
from .recipe2tree import HierarchicalEncoder, annotate, parse_recipe, train_recipe2tree
from .treekit import encode_tree


def artifact_root(args) -> Path:
    root = args.out_dir or os.environ.get("SGN_ARTIFACT_ROOT", "artifacts")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(args) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.load(args.config)
    if getattr(args, "preset", "desk") == "paper":
        return ExperimentConfig.paper()
    return ExperimentConfig.desk()


def cmd_make_corpus(args) -> int:
    config = load_config(args)
    syn = SyntheticConfig(
        n_train=config.n_train, n_val=config.n_val, n_test=config.n_test,
        min_sentences=config.min_sentences, max_sentences=config.max_sentences,
        n_dishes=config.n_dishes,
    )
    samples = make_synthetic_corpus(syn, args.seed if args.seed is not None else config.seed)
    save_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train_parser(args) -> int:
    config = load_config(args)
    if args.seed is not None:
        config = ExperimentConfig.from_kv({**config.to_kv(), "seed": str(args.seed)})
    samples = load_corpus(config)
    vocab = Vocabulary.build(by_partition(samples)["train"], config.vocab_min_count)
    encoder, vocab, annotations, history = train_recipe2tree(
        samples, parser_config(config), config.seed, vocab=vocab, log=print
    )
    out = artifact_root(args)
    ckpt = out / f"{config.fingerprint()}_parser.pt"
    save_checkpoint(ckpt, config, {"parser": encoder}, {"stage": 1, "epoch": len(history) - 1})
    annotated = out / f"{config.fingerprint()}_annotated_corpus.json"
    save_corpus(samples, annotated, annotations=annotations)
    print(f"parser checkpoint: {ckpt}")
    print(f"annotated corpus: {annotated}")
    return 0


def _load_parser(checkpoint_path):
    payload = load_checkpoint(checkpoint_path)
    config = ExperimentConfig.from_kv(payload["config"])
    samples = load_corpus(config)
    vocab = Vocabulary.build(by_partition(samples)["train"], config.vocab_min_count)
    encoder = HierarchicalEncoder(len(vocab), parser_config(config))
    restore_modules(payload, {"parser": encoder})
    encoder.eval()
    return encoder, vocab, samples


def cmd_parse(args) -> int:
    encoder, vocab, samples = _load_parser(args.checkpoint)
    if args.id:
        samples = [s for s in samples if s.id == args.id]
        if not samples:
            print(f"no sample with id {args.id}", file=sys.stderr)
            return 1
    for sample in samples[: args.limit]:
        sentences = [tuple(vocab.encode(s)) for s in sample.instructions]
        tree = parse_recipe(encoder, sentences)
        print(f"{sample.id}\t{tree.bracket()}")
    return 0


def cmd_train_sgn(args) -> int:
    config = load_config(args)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.baseline:
        config = config.baseline_variant()
    if overrides:
        config = ExperimentConfig.from_kv({**config.to_kv(), **overrides})
    report, artifacts = run_pipeline(
        config, artifact_root(args), resume_from=args.resume, log=print
    )
    print(f"report: {artifacts.report_path}")
    print(f"checkpoint: {artifacts.final_checkpoint}")
    return 0


def cmd_gen_tree(args) -> int:
    system, config = rebuild_system(args.checkpoint)
    features = system.provider.features(args.image_key)
    tree = generate_tree(
        system.tree_gen, features, mode=args.mode,
        seed=args.seed if args.seed is not None else 0,
    )
    canonical = tree.canonical()
    print(encode_tree(canonical).to_string())
    print(canonical.bracket())
    return 0


def cmd_generate(args) -> int:
    system, config = rebuild_system(args.checkpoint)
    features = system.provider.features(args.image_key)
    if config.use_tree:
        tree = generate_tree(system.tree_gen, features).canonical()
    else:
        tree = None
    if args.ingredients:
        ingredient_ids = [
            tuple(system.vocab.encode(part.strip().split()))
            for part in args.ingredients.split(",")
        ]
    else:
        by_key = {s.image_key: s for s in load_corpus(config)}
        sample = by_key.get(args.image_key)
        if sample is None:
            print(f"image key {args.image_key} not in corpus; pass --ingredients",
                  file=sys.stderr)
            return 1
        ingredient_ids = [tuple(system.vocab.encode(t)) for t in sample.ingredients]
    f_ing = system.ingredients(ingredient_ids)
    from .generator import build_bundle  # local to keep the module surface flat

    per_node = config.tree_tokens == "per-node"
    tree_feat = None
    if tree is not None:
        emb = system.tree_enc(tree)
        tree_feat = emb.node_features if per_node else emb.pooled
    bundle = build_bundle(tree_feat, features, f_ing,
                          n_max=config.n_max if per_node else None)
    result = generate_recipe(system.decoder, bundle, config.max_gen_len)[0]
    if tree is not None:
        print(f"tree: {tree.bracket()}")
    for i, sentence in enumerate(result.sentences):
        print(f"{i + 1}. {detokenize(sentence, system.vocab)}")
    if not result.sentences:
        print("(empty recipe)")
    return 0


def cmd_evaluate(args) -> int:
    system, config = rebuild_system(args.checkpoint)
    samples = load_corpus(config)
    report, _ = evaluate_split(system, samples, args.split)
    label = "+SGN" if config.use_tree else "baseline"
    print(report.table_row(label))
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"report written to {args.out}")
    return 0


def cmd_compare(args) -> int:
    a = EvalReport.from_json(Path(args.report_a).read_text())
    b = EvalReport.from_json(Path(args.report_b).read_text())
    delta = compare_reports(a, b)
    print(f"delta perplexity: {delta.perplexity:+.3f}")
    print(f"delta BLEU: {100 * delta.bleu:+.2f}")
    print(f"delta ROUGE-L: {100 * delta.rouge_l:+.2f}")
    print(f"delta avg-length: {delta.avg_length:+.1f}")
    print(
        f"distance to reference length: {delta.length_gap_a:.1f} -> "
        f"{delta.length_gap_b:.1f} ({delta.length_gap_improvement:+.1f})"
    )
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgn",
        description="Structure-aware recipe generation: corpus tools, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate the synthetic corpus JSON")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("train-parser", help="stage 1: train the tree-induction parser")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_train_parser)

    p = sub.add_parser("parse", help="print bracketed trees for corpus samples")
    p.add_argument("--checkpoint", required=True, help="parser checkpoint")
    p.add_argument("--id", default=None, help="parse one sample id")
    p.add_argument("--limit", type=int, default=5)
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("train-sgn", help="run the full pipeline (stages 1-3)")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--baseline", action="store_true",
                   help="train the structure-unaware baseline (lambda2=0, zero tree)")
    p.add_argument("--resume", default=None, help="stage-2 epoch checkpoint to resume")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_train_sgn)

    p = sub.add_parser("gen-tree", help="generate a tree for an image key")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-key", required=True)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_tree)

    p = sub.add_parser("generate", help="generate a recipe for an image key")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-key", required=True)
    p.add_argument("--ingredients", default=None,
                   help="comma-separated ingredient phrases; default: corpus lookup")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="diff two evaluation reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    torch.manual_seed(0)
    try:
        return args.fn(args)
    except SgnError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
