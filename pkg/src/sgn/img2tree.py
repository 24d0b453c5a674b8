"""Conditional autoregressive tree generation from image features.

Trees are generated as their lower-triangular adjacency rows: a recurrent
network whose initial hidden state is the image feature consumes the previous
row and emits per-position link probabilities plus a stop unit. Training
maximizes the Bernoulli log-likelihood of the rows (masked to each row's valid
positions); decoding picks exactly one parent per row, so every generated
sequence is a valid tree.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, InputError, ShapeError, TrainingError
from .treekit import AdjacencyVector, SentenceTree, encode_tree

N_MAX_DEFAULT = 39  # 19 sentences under binary branching: at most 37 nodes, plus slack


@dataclass(frozen=True)
class TreeGenConfig:
    feature_width: int = 128
    hidden: int = 128
    layers: int = 2
    n_max: int = N_MAX_DEFAULT
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10


class TreeGenerator(nn.Module):
    def __init__(self, config: TreeGenConfig):
        super().__init__()
        if config.hidden != config.feature_width:
            raise ShapeError(
                f"hidden width {config.hidden} must equal image feature width "
                f"{config.feature_width} (the feature initializes the hidden state)"
            )
        self.config = config
        self.row_proj = nn.Linear(config.n_max, config.hidden)
        self.rnn = nn.GRU(config.hidden, config.hidden, num_layers=config.layers,
                          batch_first=True)
        self.head = nn.Linear(config.hidden, config.n_max + 1)  # link logits + stop unit

    @property
    def n_max(self) -> int:
        return self.config.n_max

    def initial_state(self, f_img: torch.Tensor) -> torch.Tensor:
        """(B, W) image features -> (layers, B, H) initial hidden state."""
        if f_img.shape[-1] != self.config.hidden:
            raise ShapeError(
                f"feature width {f_img.shape[-1]} != hidden {self.config.hidden}"
            )
        return f_img.unsqueeze(0).expand(self.config.layers, -1, -1).contiguous()

    def step_logits(self, inputs: torch.Tensor, hidden: torch.Tensor):
        """inputs (B, T, n_max) padded rows -> (logits (B, T, n_max+1), hidden)."""
        out, hidden = self.rnn(self.row_proj(inputs), hidden)
        return self.head(out), hidden


def _padded_rows(vec: AdjacencyVector, n_max: int, dtype) -> torch.Tensor:
    """(n, n_max) inputs: zeros start row followed by the n-1 adjacency rows."""
    rows = torch.zeros(vec.n, n_max, dtype=dtype)
    for i, row in enumerate(vec.rows(), start=1):
        rows[i, : len(row)] = torch.tensor(row, dtype=dtype)
    return rows


def sequence_log_likelihood(gen: TreeGenerator, f_img: torch.Tensor, vecs) -> torch.Tensor:
    """(B,) log-likelihoods of adjacency vectors under teacher forcing.

    Per sample: sum over rows i = 1..n-1 of per-position Bernoulli
    log-likelihoods (masked to the i valid positions) and the continue
    log-probability, plus the stop log-probability at step n.
    """
    if len(vecs) == 0:
        raise InputError("no adjacency vectors")
    n_max = gen.n_max
    for vec in vecs:
        if vec.n > n_max:
            raise CapacityError(f"tree with {vec.n} nodes exceeds capacity {n_max}")
    batch = len(vecs)
    steps = max(vec.n for vec in vecs)
    dtype = gen.head.weight.dtype
    inputs = torch.zeros(batch, steps, n_max, dtype=dtype)
    targets = torch.zeros(batch, steps, n_max, dtype=dtype)
    pos_mask = torch.zeros(batch, steps, n_max, dtype=dtype)
    stop_target = torch.zeros(batch, steps, dtype=dtype)
    step_mask = torch.zeros(batch, steps, dtype=dtype)
    for b, vec in enumerate(vecs):
        padded = _padded_rows(vec, n_max, dtype)
        inputs[b, : vec.n] = padded
        step_mask[b, : vec.n] = 1.0
        stop_target[b, vec.n - 1] = 1.0
        for k in range(vec.n - 1):  # step index k predicts row k+1 (k+1 positions)
            targets[b, k, : k + 1] = padded[k + 1, : k + 1]
            pos_mask[b, k, : k + 1] = 1.0

    logits, _ = gen.step_logits(inputs, gen.initial_state(f_img))
    link_logits = logits[..., :n_max]
    stop_logits = logits[..., n_max]
    link_ll = targets * F.logsigmoid(link_logits) + (1 - targets) * F.logsigmoid(-link_logits)
    stop_ll = stop_target * F.logsigmoid(stop_logits) + (1 - stop_target) * F.logsigmoid(-stop_logits)
    return (link_ll * pos_mask).sum(dim=(1, 2)) + (stop_ll * step_mask).sum(dim=1)


def tree_log_likelihood(gen: TreeGenerator, f_img: torch.Tensor,
                        vec: AdjacencyVector) -> torch.Tensor:
    """Scalar log-probability of one adjacency vector given one image feature."""
    return sequence_log_likelihood(gen, f_img.unsqueeze(0), [vec])[0]


def generate_tree(gen: TreeGenerator, f_img: torch.Tensor, mode: str = "greedy",
                  seed: int | None = None, return_log_prob: bool = False):
    """Decode a tree from an image feature.

    Each new node's parent is the argmax (greedy) or a categorical sample over
    the normalized link probabilities of the previous positions, so every row
    has exactly one set bit. Generation ends when the stop unit fires (greedy:
    p > 0.5) or at the node capacity. The returned log-probability accumulates
    the same Bernoulli/stop terms the teacher-forced likelihood uses.
    """
    if mode not in ("greedy", "sample"):
        raise InputError(f"unknown decode mode {mode!r}")
    n_max = gen.n_max
    dtype = gen.head.weight.dtype
    rng = torch.Generator()
    rng.manual_seed(0 if seed is None else seed)
    parents = [-1]
    log_prob = 0.0
    with torch.no_grad():
        hidden = gen.initial_state(f_img.unsqueeze(0))
        step_input = torch.zeros(1, 1, n_max, dtype=dtype)
        for i in range(1, n_max + 1):
            logits, hidden = gen.step_logits(step_input, hidden)
            logits = logits[0, 0]
            stop_logit = logits[n_max]
            if mode == "greedy":
                stop = bool(torch.sigmoid(stop_logit) > 0.5)
            else:
                stop = bool(torch.bernoulli(torch.sigmoid(stop_logit), generator=rng))
            if i == n_max:
                stop = True  # capacity reached
            if stop:
                log_prob += F.logsigmoid(stop_logit).item()
                break
            log_prob += F.logsigmoid(-stop_logit).item()
            link = logits[:i]
            if mode == "greedy":
                parent = int(link.argmax())
            else:
                probs = torch.sigmoid(link)
                parent = int(torch.multinomial(probs / probs.sum(), 1, generator=rng))
            row_sign = -torch.ones(i, dtype=dtype)
            row_sign[parent] = 1.0
            log_prob += F.logsigmoid(row_sign * link).sum().item()
            parents.append(parent)
            step_input = torch.zeros(1, 1, n_max, dtype=dtype)
            step_input[0, 0, parent] = 1.0
    tree = SentenceTree.from_parents(parents)
    return (tree, log_prob) if return_log_prob else tree


def train_img2tree(gen: TreeGenerator, samples, annotations, feature_provider,
                   config: TreeGenConfig, seed: int, log=None):
    """Fit the generator to annotated trees; returns per-epoch history.

    samples supplies train/val partitions and image keys; annotations maps
    sample id -> SentenceTree (the induced supervision targets). Reports the
    held-out mean log-likelihood each epoch.
    """
    train = [s for s in samples if s.partition == "train" and s.id in annotations]
    val = [s for s in samples if s.partition == "val" and s.id in annotations]
    if not train:
        raise InputError("no annotated training samples")

    def tensors(subset):
        feats = torch.stack([feature_provider.features(s.image_key) for s in subset])
        vecs = [encode_tree(annotations[s.id].canonical()) for s in subset]
        return feats, vecs

    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(gen.parameters(), lr=config.lr)
    history = []
    last_good = copy.deepcopy(gen.state_dict())
    val_feats, val_vecs = tensors(val) if val else (None, None)
    for epoch in range(config.epochs):
        rng = random.Random(seed * 6151 + epoch)
        order = list(range(len(train)))
        rng.shuffle(order)
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [train[j] for j in order[lo : lo + config.batch_size]]
            feats, vecs = tensors(chunk)
            loss = -sequence_log_likelihood(gen, feats, vecs).mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"tree loss became non-finite in epoch {epoch}",
                    last_good_state=last_good,
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        row = {"epoch": epoch, "train_loss": total / max(count, 1)}
        if val:
            with torch.no_grad():
                row["val_log_likelihood"] = sequence_log_likelihood(
                    gen, val_feats, val_vecs
                ).mean().item()
        history.append(row)
        last_good = copy.deepcopy(gen.state_dict())
        if log:
            log(f"img2tree epoch {epoch}: loss {row['train_loss']:.4f}"
                + (f" val-ll {row['val_log_likelihood']:.4f}" if val else ""))
    return history


def held_out_log_likelihood(gen: TreeGenerator, samples, annotations,
                            feature_provider) -> float:
    subset = [s for s in samples if s.id in annotations]
    if not subset:
        raise InputError("no annotated samples")
    feats = torch.stack([feature_provider.features(s.image_key) for s in subset])
    vecs = [encode_tree(annotations[s.id].canonical()) for s in subset]
    with torch.no_grad():
        return sequence_log_likelihood(gen, feats, vecs).mean().item()
