"""Unsupervised sentence-level tree induction.

A hierarchical ordered-neurons encoder (word-level stack feeding a
sentence-level stack) is trained with the quick-thoughts objective: identify
the true next sentence among distractors by inner product between the context
state and candidate sentence encodings. Trees are then read off the
sentence-level master-forget trace with top-down greedy splitting.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import PAD, Vocabulary, by_partition
from .errors import InputError, TrainingError
from .layers import ONLSTMStack, syntactic_distance
from .treekit import SentenceTree, canonical_order


@dataclass(frozen=True)
class ParserConfig:
    embed_dim: int = 64
    word_hidden: int = 64
    word_layers: int = 3
    sent_hidden: int = 64
    sent_layers: int = 2
    chunk_size: int = 4
    distance_layer: int = 0   # sentence-level layer whose trace yields distances
    k_distractors: int = 3
    fixed_context: bool = False  # context = first N-1 sentences instead of a random run
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 5


@dataclass(frozen=True)
class QTBatch:
    """One quick-thoughts instance: context sentences, K+1 candidates, true index."""

    context: tuple[tuple[int, ...], ...]
    candidates: tuple[tuple[int, ...], ...]
    true_index: int

    def __post_init__(self):
        if not self.context or not self.candidates:
            raise InputError("context and candidate set must be non-empty")
        if not 0 <= self.true_index < len(self.candidates):
            raise InputError("true candidate index out of range")


class HierarchicalEncoder(nn.Module):
    """Word-level stack g(.) for sentences, sentence-level stack f(.) for contexts."""

    def __init__(self, vocab_size: int, config: ParserConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(vocab_size, config.embed_dim, padding_idx=PAD)
        self.word_stack = ONLSTMStack(
            [config.embed_dim] + [config.word_hidden] * config.word_layers,
            config.chunk_size,
        )
        self.sent_stack = ONLSTMStack(
            [config.word_hidden] + [config.sent_hidden] * config.sent_layers,
            config.chunk_size,
        )

    def encode_sentences(self, sentences) -> torch.Tensor:
        """Token-id sequences -> (S, H) final top-layer word states."""
        if not sentences:
            raise InputError("no sentences to encode")
        lengths = torch.tensor([len(s) for s in sentences])
        if int(lengths.min()) == 0:
            raise InputError("empty sentence")
        width = int(lengths.max())
        ids = torch.full((len(sentences), width), PAD, dtype=torch.long)
        for row, sent in enumerate(sentences):
            ids[row, : len(sent)] = torch.tensor(sent, dtype=torch.long)
        _, states, _ = self.word_stack(self.embedding(ids), lengths)
        return states[-1][0]

    def context_states(self, sent_embs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(B, N, H) padded context sentence embeddings -> (B, H) final states."""
        _, states, _ = self.sent_stack(sent_embs, lengths)
        return states[-1][0]

    def sentence_trace(self, sent_embs: torch.Tensor) -> torch.Tensor:
        """(1, N, H) -> (N, n_levels) master-forget trace of the distance layer."""
        _, _, traces = self.sent_stack(sent_embs)
        return traces[self.config.distance_layer][0]


def qt_scores(encoder: HierarchicalEncoder, batches) -> torch.Tensor:
    """Log-probabilities (B, K+1) over each batch's candidate set."""
    if not batches:
        raise InputError("no quick-thoughts batches")
    k_plus_1 = len(batches[0].candidates)
    sentences = []
    for b in batches:
        if len(b.candidates) != k_plus_1:
            raise InputError("candidate sets must share one size")
        sentences.extend(b.context)
        sentences.extend(b.candidates)
    encoded = encoder.encode_sentences(sentences)

    hidden = encoded.shape[-1]
    ctx_lengths = torch.tensor([len(b.context) for b in batches])
    max_ctx = int(ctx_lengths.max())
    ctx = torch.zeros(len(batches), max_ctx, hidden, dtype=encoded.dtype)
    cands = torch.zeros(len(batches), k_plus_1, hidden, dtype=encoded.dtype)
    pos = 0
    for row, b in enumerate(batches):
        n = len(b.context)
        ctx[row, :n] = encoded[pos : pos + n]
        pos += n
        cands[row] = encoded[pos : pos + k_plus_1]
        pos += k_plus_1
    f = encoder.context_states(ctx, ctx_lengths)          # (B, H)
    scores = torch.einsum("bh,bkh->bk", f, cands)         # inner products
    return F.log_softmax(scores, dim=-1)


def qt_probability(encoder: HierarchicalEncoder, batch: QTBatch) -> torch.Tensor:
    """Distribution over the batch's candidates (sums to 1)."""
    return qt_scores(encoder, [batch])[0].exp()


def qt_loss(encoder: HierarchicalEncoder, batches) -> torch.Tensor:
    """Negative mean log-probability of the true next sentence."""
    log_probs = qt_scores(encoder, batches)
    truth = torch.tensor([b.true_index for b in batches])
    return -log_probs[torch.arange(len(batches)), truth].mean()


def qt_accuracy(encoder: HierarchicalEncoder, batches) -> float:
    with torch.no_grad():
        log_probs = qt_scores(encoder, batches)
        picks = log_probs.argmax(dim=-1)
        truth = torch.tensor([b.true_index for b in batches])
        return float((picks == truth).float().mean())


def greedy_split(distances) -> tuple:
    """Nested (left, right) spans from boundary distances.

    distances[i] scores the boundary before sentence i+1; the maximal boundary
    (leftmost on ties) splits the range, recursively.
    """

    def split(lo, hi):
        if lo == hi:
            return lo
        best = max(range(lo + 1, hi + 1), key=lambda i: distances[i - 1])
        # max() keeps the first maximal element, i.e. the leftmost boundary
        return (split(lo, best - 1), split(best, hi))

    return split(0, len(distances))


def tree_from_nest(nest) -> SentenceTree:
    """Binary nest of sentence indices -> canonical SentenceTree."""
    edges, labels = set(), {}
    counter = [0]

    def walk(node):
        node_id = counter[0]
        counter[0] += 1
        if isinstance(node, int):
            labels[node_id] = node
        else:
            for child in node:
                edges.add((node_id, walk(child)))
        return node_id

    walk(nest)
    if not edges:
        return SentenceTree((-1,), ((0, 0),))
    return canonical_order(edges, 0, labels)


def parse_recipe(encoder: HierarchicalEncoder, sentences) -> SentenceTree:
    """Induce the sentence-level tree for one recipe's token-id sentences."""
    if not sentences:
        raise InputError("cannot parse an empty recipe")
    if len(sentences) == 1:
        return SentenceTree((-1,), ((0, 0),))
    with torch.no_grad():
        embs = encoder.encode_sentences(sentences).unsqueeze(0)
        trace = encoder.sentence_trace(embs)
        distances = syntactic_distance(trace).tolist()
    return tree_from_nest(greedy_split(distances[1:]))


def build_qt_batches(samples, vocab: Vocabulary, rng: random.Random, k: int,
                     fixed_context: bool):
    """One instance per sample; short recipes borrow distractors from neighbours."""
    tokenized = [
        [tuple(vocab.encode(s)) for s in sample.instructions] for sample in samples
    ]
    batches = []
    for i, sentences in enumerate(tokenized):
        n = len(sentences)
        if n < 2:
            continue
        if fixed_context:
            t = n - 1
            context = sentences[:t]
        else:
            t = rng.randint(1, n - 1)
            start = rng.randint(0, t - 1)
            context = sentences[start:t]
        pool = [sentences[j] for j in range(n) if j != t]
        while len(pool) < k and len(tokenized) > 1:
            other = tokenized[rng.randrange(len(tokenized))]
            if other is sentences:
                continue
            pool.append(other[rng.randrange(len(other))])
        if len(pool) < k:
            continue
        distractors = rng.sample(pool, k)
        candidates = distractors + [sentences[t]]
        rng.shuffle(candidates)
        batches.append(QTBatch(tuple(context), tuple(candidates),
                               candidates.index(sentences[t])))
    return batches


def train_recipe2tree(samples, config: ParserConfig, seed: int,
                      vocab: Vocabulary | None = None, log=None):
    """Train the encoder with quick thoughts and parse every sample.

    Returns (encoder, vocab, annotations: id -> SentenceTree, history). History
    rows carry per-epoch train loss and validation loss/accuracy. A non-finite
    loss aborts with TrainingError carrying the last finite model state.
    """
    parts = by_partition(samples)
    train, val = parts["train"], parts["val"] or parts["train"][:64]
    if not train:
        raise InputError("no training samples")
    if vocab is None:
        vocab = Vocabulary.build(train, min_count=5)

    torch.manual_seed(seed)
    encoder = HierarchicalEncoder(len(vocab), config)
    opt_cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.SGD
    optimizer = opt_cls(encoder.parameters(), lr=config.lr)

    eval_rng = random.Random(seed ^ 0x5EED)
    val_batches = build_qt_batches(val, vocab, eval_rng, config.k_distractors, True)
    history = []
    last_good = copy.deepcopy(encoder.state_dict())
    for epoch in range(config.epochs):
        rng = random.Random(seed * 9973 + epoch)
        instances = build_qt_batches(train, vocab, rng, config.k_distractors,
                                     config.fixed_context)
        rng.shuffle(instances)
        encoder.train()
        total, count = 0.0, 0
        for lo in range(0, len(instances), config.batch_size):
            chunk = instances[lo : lo + config.batch_size]
            loss = qt_loss(encoder, chunk)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"quick-thoughts loss became non-finite in epoch {epoch}",
                    last_good_state=last_good,
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        encoder.eval()
        with torch.no_grad():
            val_loss = qt_loss(encoder, val_batches).item() if val_batches else 0.0
        row = {
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "val_loss": val_loss,
            "val_accuracy": qt_accuracy(encoder, val_batches) if val_batches else 0.0,
        }
        history.append(row)
        last_good = copy.deepcopy(encoder.state_dict())
        if log:
            log(f"parser epoch {epoch}: loss {row['train_loss']:.4f} "
                f"val {row['val_loss']:.4f} acc {row['val_accuracy']:.3f}")

    encoder.eval()
    annotations = annotate(encoder, samples, vocab)
    return encoder, vocab, annotations, history


def annotate(encoder: HierarchicalEncoder, samples, vocab: Vocabulary):
    """Parse every sample with the (possibly untrained) encoder."""
    return {
        sample.id: parse_recipe(
            encoder, [tuple(vocab.encode(s)) for s in sample.instructions]
        )
        for sample in samples
    }
