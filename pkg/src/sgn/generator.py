"""Conditioning-bundle assembly and the recipe decoder.

The decoder consumes the tree/image/ingredient features as cross-attention
memory tokens. The tree contribution is either the pooled embedding (one
token) or the per-node features (padded, masked); a zero token replaces it in
the structure-unaware baseline configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .corpus import BOS, EOS, PAD, SEP
from .errors import InputError, ShapeError, TrainingError
from .layers import TransformerDecoder

MAX_GENERATION_LENGTH = 150


@dataclass
class ConditioningBundle:
    """Memory tokens (B, M, D) with a validity mask (B, M)."""

    memory: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.memory.ndim != 3 or self.memory.shape[1] == 0:
            raise ShapeError("memory must be (batch, tokens>0, width)")
        if self.mask.shape != self.memory.shape[:2]:
            raise ShapeError("mask shape must match memory tokens")
        if not bool(self.mask.any(dim=1).all()):
            raise ShapeError("every bundle needs at least one valid memory token")


def build_bundle(tree_features, f_img: torch.Tensor, f_ing: torch.Tensor,
                 n_max: int | None = None) -> ConditioningBundle:
    """Assemble [tree tokens..., image, ingredients] for one sample.

    tree_features: (D,) pooled, (n, D) per-node, or None for the zero-token
    baseline. Per-node features are padded to n_max when given.
    """
    if f_img.shape != f_ing.shape or f_img.ndim != 1:
        raise ShapeError(
            f"image {tuple(f_img.shape)} and ingredient {tuple(f_ing.shape)} "
            "features must be equal-width vectors"
        )
    width = f_img.shape[0]
    if tree_features is None:
        tree_features = torch.zeros(1, width, dtype=f_img.dtype)
    elif tree_features.ndim == 1:
        tree_features = tree_features.unsqueeze(0)
    if tree_features.shape[-1] != width:
        raise ShapeError(
            f"tree feature width {tree_features.shape[-1]} != {width}"
        )
    n_tree = tree_features.shape[0]
    slots = n_tree if n_max is None else max(n_max, n_tree)
    memory = torch.zeros(slots + 2, width, dtype=f_img.dtype)
    mask = torch.zeros(slots + 2, dtype=torch.bool)
    memory[:n_tree] = tree_features
    mask[:n_tree] = True
    memory[slots] = f_img
    memory[slots + 1] = f_ing
    mask[slots] = mask[slots + 1] = True
    return ConditioningBundle(memory.unsqueeze(0), mask.unsqueeze(0))


def stack_bundles(bundles) -> ConditioningBundle:
    widths = {b.memory.shape[1] for b in bundles}
    if len(widths) != 1:
        raise ShapeError("bundles must share a memory layout to be batched")
    return ConditioningBundle(
        torch.cat([b.memory for b in bundles], dim=0),
        torch.cat([b.mask for b in bundles], dim=0),
    )


@dataclass
class GenerationResult:
    """Greedy decode output: content token ids, SEP-split sentences, and the
    log-probability of every emitted token (final EOS included when present)."""

    token_ids: list[int]
    sentences: list[list[int]]
    log_probs: list[float]
    ended_with_eos: bool

    def __post_init__(self):
        if len(self.token_ids) > MAX_GENERATION_LENGTH:
            raise ShapeError("generated sequence exceeds the length cap")


def split_sentences(token_ids) -> list[list[int]]:
    sentences, current = [], []
    for tok in token_ids:
        if tok == SEP:
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(tok)
    if current:
        sentences.append(current)
    return sentences


def pad_targets(streams, device=None) -> torch.Tensor:
    width = max(len(s) for s in streams)
    out = torch.full((len(streams), width), PAD, dtype=torch.long, device=device)
    for row, stream in enumerate(streams):
        out[row, : len(stream)] = torch.tensor(stream, dtype=torch.long)
    return out


def sequence_log_probs(decoder, bundle, targets) -> torch.Tensor:
    """Teacher-forced per-token log-probabilities (B, T), zero at padding."""
    if targets.shape[1] > decoder.max_len:
        raise ShapeError(
            f"target length {targets.shape[1]} exceeds maximum {decoder.max_len}"
        )
    inputs = torch.cat(
        [torch.full_like(targets[:, :1], BOS), targets[:, :-1]], dim=1
    )
    logits = decoder(inputs, bundle.memory, bundle.mask)
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return picked * (targets != PAD)


def generation_loss(decoder: TransformerDecoder, bundle: ConditioningBundle,
                    targets: torch.Tensor):
    """Teacher-forced negative log-likelihood of the target streams.

    targets: (B, T) token ids padded with PAD. Returns (mean per-token loss,
    summed nll, token count); exp(mean) is the batch perplexity.
    """
    picked = sequence_log_probs(decoder, bundle, targets)
    count = int((targets != PAD).sum())
    if count == 0:
        raise InputError("no target tokens")
    nll = -picked.sum()
    return nll / count, nll, count


def generate_recipe(decoder: TransformerDecoder, bundle: ConditioningBundle,
                    max_len: int = MAX_GENERATION_LENGTH):
    """Greedy decoding; deterministic. Returns one GenerationResult per bundle row.

    Stops a row at EOS or after max_len content tokens; records the chosen
    token's log-probability at every step (the EOS step included).
    """
    if max_len > MAX_GENERATION_LENGTH:
        raise ShapeError(f"max_len {max_len} exceeds the cap {MAX_GENERATION_LENGTH}")
    batch = bundle.memory.shape[0]
    device = bundle.memory.device
    tokens = torch.full((batch, 1), BOS, dtype=torch.long, device=device)
    finished = [False] * batch
    out_tokens = [[] for _ in range(batch)]
    out_logps = [[] for _ in range(batch)]
    ended = [False] * batch
    with torch.no_grad():
        for _ in range(max_len + 1):  # content tokens plus the final EOS step
            if all(finished):
                break
            logits = decoder(tokens, bundle.memory, bundle.mask)[:, -1]
            log_probs = F.log_softmax(logits, dim=-1)
            next_tokens = logits.argmax(dim=-1)
            for b in range(batch):
                if finished[b]:
                    continue
                tok = int(next_tokens[b])
                lp = float(log_probs[b, tok])
                if tok == EOS:
                    out_logps[b].append(lp)
                    ended[b] = True
                    finished[b] = True
                else:
                    out_tokens[b].append(tok)
                    out_logps[b].append(lp)
                    if len(out_tokens[b]) == max_len:
                        finished[b] = True
            tokens = torch.cat([tokens, next_tokens.unsqueeze(1)], dim=1)
    return [
        GenerationResult(
            token_ids=out_tokens[b],
            sentences=split_sentences(out_tokens[b]),
            log_probs=out_logps[b],
            ended_with_eos=ended[b],
        )
        for b in range(batch)
    ]


def joint_loss(l_gen, l_tree, lambda1: float = 1.0, lambda2: float = 0.5):
    """Weighted sum of the generation and tree losses."""
    for name, value in (("generation", l_gen), ("tree", l_tree)):
        scalar = float(value) if not torch.is_tensor(value) else value
        if torch.is_tensor(scalar):
            if not torch.isfinite(scalar).all():
                raise TrainingError(f"{name} loss is not finite")
        elif not math.isfinite(scalar):
            raise TrainingError(f"{name} loss is not finite")
    return lambda1 * l_gen + lambda2 * l_tree
