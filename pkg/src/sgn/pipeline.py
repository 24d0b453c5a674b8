"""Training orchestration: corpus -> parser annotations -> joint training of the
tree generator, tree encoder and decoder -> evaluation with generated trees.

Stage 1 induces tree annotations with the quick-thoughts parser. Stage 2
minimizes lambda1 * L_gen + lambda2 * L_tree, feeding the decoder the encoded
annotated tree (teacher-forced structure). Stage 3 evaluates the test split
with trees generated from image features, never the annotations.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import (
    load_checkpoint,
    restore_modules,
    restore_rng,
    save_checkpoint,
)
from .config import ExperimentConfig
from .corpus import (
    EOS,
    SyntheticConfig,
    Vocabulary,
    by_partition,
    load_annotations,
    load_recipe1m,
    make_synthetic_corpus,
    save_corpus,
    target_stream,
)
from .encoders import IngredientEncoder, make_provider
from .errors import ConfigError, InputError, TrainingError
from .generator import (
    build_bundle,
    generate_recipe,
    generation_loss,
    joint_loss,
    pad_targets,
    sequence_log_probs,
    stack_bundles,
)
from .img2tree import TreeGenConfig, TreeGenerator, generate_tree, sequence_log_likelihood
from .layers import TransformerDecoder
from .metrics import EvalReport, avg_length, bleu, perplexity, rouge_l, sentence_bleu
from .recipe2tree import ParserConfig, train_recipe2tree
from .tree2recipe import TreeEncoder, TreeEncoderConfig
from .treekit import encode_tree


def load_corpus(config: ExperimentConfig):
    if config.corpus_source == "synthetic":
        syn = SyntheticConfig(
            n_train=config.n_train,
            n_val=config.n_val,
            n_test=config.n_test,
            min_sentences=config.min_sentences,
            max_sentences=config.max_sentences,
            n_dishes=config.n_dishes,
        )
        return make_synthetic_corpus(syn, config.seed)
    if not config.corpus_path:
        raise ConfigError("corpus_source=file requires corpus_path")
    return load_recipe1m(config.corpus_path, config.min_sentences)


def parser_config(config: ExperimentConfig, epochs=None) -> ParserConfig:
    return ParserConfig(
        embed_dim=config.embed_dim,
        word_hidden=config.word_hidden,
        word_layers=config.word_layers,
        sent_hidden=config.sent_hidden,
        sent_layers=config.sent_layers,
        chunk_size=config.chunk_size,
        distance_layer=config.distance_layer,
        k_distractors=config.qt_k,
        fixed_context=config.fixed_context,
        optimizer=config.parser_optimizer,
        lr=config.parser_lr,
        batch_size=config.parser_batch,
        epochs=config.parser_epochs if epochs is None else epochs,
    )


class SgnSystem:
    """The jointly trained model set, built deterministically from a config."""

    def __init__(self, config: ExperimentConfig, vocab: Vocabulary):
        torch.manual_seed(config.seed)
        self.config = config
        self.vocab = vocab
        self.provider = make_provider(
            config.provider, config.feature_width, config.seed,
            config.feature_path or None,
        )
        self.ingredients = IngredientEncoder(len(vocab), config.feature_width)
        self.tree_gen = TreeGenerator(
            TreeGenConfig(
                feature_width=config.feature_width,
                hidden=config.rnn_hidden,
                layers=config.rnn_layers,
                n_max=config.n_max,
            )
        )
        self.tree_enc = TreeEncoder(
            TreeEncoderConfig(
                n_max=config.n_max,
                hidden=config.gat_hidden,
                out_width=config.feature_width,
                heads=config.gat_heads,
                layers=config.gat_layers,
            )
        )
        self.decoder = TransformerDecoder(
            vocab_size=len(vocab),
            d_model=config.feature_width,
            n_heads=config.dec_heads,
            n_layers=config.dec_layers,
            d_ffn=config.dec_ffn,
            max_len=config.max_gen_len,
        )

    def modules(self) -> dict:
        named = {
            "ingredients": self.ingredients,
            "tree_gen": self.tree_gen,
            "tree_enc": self.tree_enc,
            "decoder": self.decoder,
        }
        if isinstance(self.provider, torch.nn.Module):
            named["provider"] = self.provider
        return named

    def trainable_parameters(self):
        for module in self.modules().values():
            yield from module.parameters()

    def train_mode(self, flag: bool = True):
        for module in self.modules().values():
            module.train(flag)

    def stream(self, sample) -> list[int]:
        ids = target_stream(sample, self.vocab)
        if len(ids) > self.config.max_gen_len:
            ids = ids[: self.config.max_gen_len - 1] + [EOS]
        return ids

    def ingredient_ids(self, sample):
        return [tuple(self.vocab.encode(t)) for t in sample.ingredients]

    def image_features(self, samples) -> torch.Tensor:
        return torch.stack([self.provider.features(s.image_key) for s in samples])

    def bundles(self, samples, trees, f_img=None) -> "ConditioningBundle":
        """trees: per-sample SentenceTree or None (zero tree token)."""
        if f_img is None:
            f_img = self.image_features(samples)
        f_ing = self.ingredients.batch([self.ingredient_ids(s) for s in samples])
        per_node = self.config.tree_tokens == "per-node"
        rows = []
        for b, tree in enumerate(trees):
            tree_feat, slots = None, None
            if tree is not None:
                emb = self.tree_enc(tree)
                tree_feat = emb.node_features if per_node else emb.pooled
                slots = self.config.n_max if per_node else None
            rows.append(build_bundle(tree_feat, f_img[b], f_ing[b], n_max=slots))
        return stack_bundles(rows)


@dataclass
class PipelineArtifacts:
    out_dir: Path
    fingerprint: str

    def path(self, name: str) -> Path:
        return self.out_dir / f"{self.fingerprint}_{name}"

    @property
    def report_path(self) -> Path:
        return self.path("report.json")

    @property
    def annotated_corpus(self) -> Path:
        return self.path("annotated_corpus.json")

    @property
    def final_checkpoint(self) -> Path:
        return self.path("final.pt")

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.path(f"stage2_e{epoch:03d}.pt")


def _write_csv(path, rows, fields) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def joint_step(system: SgnSystem, batch, annotations):
    """One joint forward: (loss, l_gen, l_tree) on a list of samples."""
    config = system.config
    f_img = system.image_features(batch)
    trees = [
        annotations[s.id].canonical() if config.use_tree else None for s in batch
    ]
    bundle = system.bundles(batch, trees, f_img)
    targets = pad_targets([system.stream(s) for s in batch])
    l_gen, _, _ = generation_loss(system.decoder, bundle, targets)
    if config.lambda2 > 0:
        tree_targets = trees if config.use_tree else [
            annotations[s.id].canonical() for s in batch
        ]
        vecs = [encode_tree(t) for t in tree_targets]
        l_tree = -sequence_log_likelihood(system.tree_gen, f_img, vecs).mean()
    else:
        l_tree = torch.zeros(())
    return joint_loss(l_gen, l_tree, config.lambda1, config.lambda2), l_gen, l_tree


def evaluate_split(system: SgnSystem, samples, split: str, chunk_size: int = 64):
    """Evaluate with generated trees (or none for the baseline); returns
    (EvalReport, details dict with generated trees and decoded token lists)."""
    subset = [s for s in samples if s.partition == split]
    if not subset:
        raise InputError(f"no samples in split {split!r}")
    system.train_mode(False)
    config = system.config
    token_log_probs = []
    candidates, references = [], []
    generated_trees = []
    with torch.no_grad():
        for lo in range(0, len(subset), chunk_size):
            chunk = subset[lo : lo + chunk_size]
            f_img = system.image_features(chunk)
            if config.use_tree:
                trees = [
                    generate_tree(system.tree_gen, f_img[b]).canonical()
                    for b in range(len(chunk))
                ]
            else:
                trees = [None] * len(chunk)
            generated_trees.extend(trees)
            bundle = system.bundles(chunk, trees, f_img)
            streams = [system.stream(s) for s in chunk]
            targets = pad_targets(streams)
            picked = sequence_log_probs(system.decoder, bundle, targets)
            for b, stream in enumerate(streams):
                token_log_probs.extend(picked[b, : len(stream)].tolist())
            results = generate_recipe(system.decoder, bundle, config.max_gen_len)
            candidates.extend(r.token_ids for r in results)
            references.extend(stream[:-1] for stream in streams)  # drop final EOS
    report = EvalReport(
        perplexity=perplexity(token_log_probs),
        bleu=bleu(candidates, references),
        rouge_l=rouge_l(candidates, references),
        avg_length=avg_length(candidates),
        sample_count=len(subset),
        split=split,
        ref_avg_length=avg_length(references),
        bleu_sentence=sentence_bleu(candidates, references),
    )
    details = {"trees": generated_trees, "candidates": candidates, "references": references}
    return report, details


def run_pipeline(config: ExperimentConfig, out_dir, resume_from=None, log=print):
    """Run the full flow; returns (EvalReport, PipelineArtifacts).

    resume_from names a stage-2 epoch checkpoint written by a previous run of
    the same config; training continues from the following epoch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = PipelineArtifacts(out, config.fingerprint())
    config.save(artifacts.path("config.kv"))

    samples = load_corpus(config)
    parts = by_partition(samples)
    vocab = Vocabulary.build(parts["train"], config.vocab_min_count)

    payload = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["fingerprint"] != config.fingerprint():
            raise ConfigError(
                "checkpoint was produced by a different configuration "
                f"({payload['fingerprint']} != {config.fingerprint()})"
            )

    # stage 1: induce tree annotations (skipped by the structure-unaware baseline)
    annotations = {}
    if config.use_tree:
        if payload is not None:
            source = Path(resume_from).parent / artifacts.annotated_corpus.name
            annotations = load_annotations(source)
            if log:
                log(f"resumed annotations for {len(annotations)} samples")
        else:
            epochs = config.parser_epochs if config.train_parser else 0
            _, _, annotations, history = train_recipe2tree(
                samples, parser_config(config, epochs), config.seed,
                vocab=vocab, log=log,
            )
            if history:
                _write_csv(
                    artifacts.path("parser_curve.csv"), history,
                    ["epoch", "train_loss", "val_loss", "val_accuracy"],
                )
            save_corpus(samples, artifacts.annotated_corpus, annotations=annotations)

    # stage 2: joint training
    system = SgnSystem(config, vocab)
    optimizer = torch.optim.Adam(system.trainable_parameters(), lr=config.lr)
    start_epoch = 0
    if payload is not None:
        restore_modules(payload, system.modules())
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        restore_rng(payload)
        start_epoch = payload["counters"]["epoch"] + 1

    train = parts["train"]
    curve = []
    total_epochs = config.joint_epochs if config.train_joint else 0
    for epoch in range(start_epoch, total_epochs):
        lr_now = config.lr * config.lr_decay**epoch
        for group in optimizer.param_groups:
            group["lr"] = lr_now
        system.train_mode(True)
        rng = random.Random(config.seed * 31 + 1000 + epoch)
        order = list(range(len(train)))
        rng.shuffle(order)
        sums = {"loss": 0.0, "l_gen": 0.0, "l_tree": 0.0}
        count = 0
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = [train[j] for j in order[lo : lo + config.batch_size]]
                loss, l_gen, l_tree = joint_step(system, batch, annotations)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                sums["loss"] += float(loss.detach()) * len(batch)
                sums["l_gen"] += float(l_gen.detach()) * len(batch)
                sums["l_tree"] += float(l_tree.detach()) * len(batch)
                count += len(batch)
        except TrainingError as err:
            save_checkpoint(
                artifacts.path("resume_state.pt"), config, system.modules(),
                {"stage": 2, "epoch": epoch - 1}, optimizer,
            )
            raise TrainingError(
                f"stage 2 aborted in epoch {epoch}; resumable state written to "
                f"{artifacts.path('resume_state.pt')}",
                last_good_state=err.last_good_state,
            ) from err
        row = {
            "epoch": epoch,
            "loss": sums["loss"] / max(count, 1),
            "l_gen": sums["l_gen"] / max(count, 1),
            "l_tree": sums["l_tree"] / max(count, 1),
            "lr": lr_now,
        }
        curve.append(row)
        if log:
            log(
                f"joint epoch {epoch}: loss {row['loss']:.4f} "
                f"gen {row['l_gen']:.4f} tree {row['l_tree']:.4f}"
            )
        save_checkpoint(
            artifacts.epoch_checkpoint(epoch), config, system.modules(),
            {"stage": 2, "epoch": epoch}, optimizer,
        )
    if curve:
        _write_csv(
            artifacts.path("joint_curve.csv"), curve,
            ["epoch", "loss", "l_gen", "l_tree", "lr"],
        )

    # stage 3: evaluate the test split with generated trees
    report, _ = evaluate_split(system, samples, "test")
    artifacts.report_path.write_text(report.to_json())
    save_checkpoint(
        artifacts.final_checkpoint, config, system.modules(),
        {"stage": 3, "epoch": total_epochs - 1}, optimizer,
    )
    if log:
        log(report.table_row("+SGN" if config.use_tree else "baseline"))
    return report, artifacts


def rebuild_system(checkpoint_path) -> tuple[SgnSystem, ExperimentConfig]:
    """Reconstruct a system (with its vocabulary) from any pipeline checkpoint."""
    payload = load_checkpoint(checkpoint_path)
    config = ExperimentConfig.from_kv(payload["config"])
    samples = load_corpus(config)
    vocab = Vocabulary.build(by_partition(samples)["train"], config.vocab_min_count)
    system = SgnSystem(config, vocab)
    restore_modules(payload, system.modules())
    system.train_mode(False)
    return system, config
