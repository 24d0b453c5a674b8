"""Differentiable building blocks: ordered-neurons recurrence, scaled dot-product
attention, and a transformer decoder with cross-attention over memory tokens."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def cumax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cumulative sum of a softmax; monotone non-decreasing along dim."""
    return torch.cumsum(torch.softmax(logits, dim=dim), dim=dim)


class ONLSTMCell(nn.Module):
    """LSTM cell with ordered neurons.

    The hidden state is organized into hidden_size/chunk_size levels. Master
    forget/input gates are computed per level via cumax, expanded across each
    chunk, and tie the per-neuron gates together so that high levels hold
    long-term state. The returned master-forget activations (level resolution)
    are what syntactic distances are read from.
    """

    def __init__(self, input_size: int, hidden_size: int, chunk_size: int):
        super().__init__()
        if hidden_size % chunk_size:
            raise ShapeError(f"hidden size {hidden_size} not divisible by chunk {chunk_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.chunk_size = chunk_size
        self.n_levels = hidden_size // chunk_size
        width = 4 * hidden_size + 2 * self.n_levels
        self.ih = nn.Linear(input_size, width)
        self.hh = nn.Linear(hidden_size, width)

    def initial_state(self, batch: int, *, dtype=None, device=None):
        kw = {"dtype": dtype or self.ih.weight.dtype, "device": device or self.ih.weight.device}
        return (torch.zeros(batch, self.hidden_size, **kw),
                torch.zeros(batch, self.hidden_size, **kw))

    def forward(self, x, state):
        h, c = state
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"expected input width {self.input_size}, got {x.shape[-1]}")
        if h.shape[-1] != self.hidden_size or c.shape[-1] != self.hidden_size:
            raise ShapeError("state width does not match hidden size")
        gates = self.ih(x) + self.hh(h)
        hs, nl = self.hidden_size, self.n_levels
        f, i, o, g = torch.split(gates[..., : 4 * hs], hs, dim=-1)
        mf_logits, mi_logits = torch.split(gates[..., 4 * hs :], nl, dim=-1)
        f, i, o, g = torch.sigmoid(f), torch.sigmoid(i), torch.sigmoid(o), torch.tanh(g)
        master_forget = cumax(mf_logits)
        master_input = 1.0 - cumax(mi_logits)
        mf = master_forget.repeat_interleave(self.chunk_size, dim=-1)
        mi = master_input.repeat_interleave(self.chunk_size, dim=-1)
        overlap = mf * mi
        f_hat = f * overlap + (mf - overlap)
        i_hat = i * overlap + (mi - overlap)
        c_next = f_hat * c + i_hat * g
        h_next = o * torch.tanh(c_next)
        return h_next, c_next, master_forget


class ONLSTMStack(nn.Module):
    """Stack of ordered-neurons cells run step by step over padded sequences."""

    def __init__(self, sizes, chunk_size: int):
        super().__init__()
        self.cells = nn.ModuleList(
            ONLSTMCell(sizes[k], sizes[k + 1], chunk_size) for k in range(len(sizes) - 1)
        )

    @property
    def output_size(self) -> int:
        return self.cells[-1].hidden_size

    def forward(self, x, lengths=None):
        """x: (B, T, E); lengths: (B,) or None.

        Returns (outputs (B, T, H_top), final per-layer (h, c) list, traces:
        list of (B, T, n_levels) master-forget activations per layer). States
        freeze once t reaches a sequence's length, so the final state is the
        state at each sequence's last real step.
        """
        batch, steps, _ = x.shape
        states = [cell.initial_state(batch, dtype=x.dtype, device=x.device) for cell in self.cells]
        outputs = []
        traces = [[] for _ in self.cells]
        for t in range(steps):
            inp = x[:, t]
            if lengths is not None:
                active = (t < lengths).to(x.dtype).unsqueeze(-1)
            for k, cell in enumerate(self.cells):
                h, c, mf = cell(inp, states[k])
                if lengths is not None:
                    h = active * h + (1 - active) * states[k][0]
                    c = active * c + (1 - active) * states[k][1]
                states[k] = (h, c)
                traces[k].append(mf)
                inp = h
            outputs.append(inp)
        stacked_traces = [torch.stack(tr, dim=1) for tr in traces]
        return torch.stack(outputs, dim=1), states, stacked_traces


def syntactic_distance(trace: torch.Tensor) -> torch.Tensor:
    """Per-step split strength from master-forget activations.

    trace: (..., T, n_levels) -> (..., T); distance = n_levels - sum of the
    activation profile (the expected number of forgotten levels).
    """
    return trace.shape[-1] - trace.sum(dim=-1)


def scaled_dot_attention(q, k, v, mask=None):
    """q: (..., Tq, d), k/v: (..., Tk, d); mask: bool, True = attend."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, mask=None):
        batch = query.shape[0]

        def split(x, proj):
            return proj(x).view(batch, -1, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(query, self.q_proj), split(key, self.k_proj), split(value, self.v_proj)
        out, weights = scaled_dot_attention(q, k, v, mask)
        out = out.transpose(1, 2).contiguous().view(batch, -1, self.n_heads * self.d_head)
        self.last_weights = weights
        return self.out_proj(out)


class DecoderBlock(nn.Module):
    """Pre-norm block: causal self-attention, cross-attention over memory, FFN."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, d_ffn), nn.ReLU(), nn.Linear(d_ffn, d_model)
        )
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, self_mask, memory_mask=None):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, self_mask))
        h = self.norm2(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory, memory_mask))
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class TransformerDecoder(nn.Module):
    """Token + learned position embeddings, decoder blocks, vocabulary head.

    There is no final layer norm: with all residual-branch output projections
    zeroed the stack is exactly the identity, so logits reduce to the
    vocabulary projection of the embedded inputs.
    """

    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int,
                 d_ffn: int, max_len: int, dropout: float = 0.0):
        super().__init__()
        self.max_len = max_len
        self.d_model = d_model
        self.token_embedding = nn.Embedding(vocab_size, d_model)
        self.position_embedding = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(
            DecoderBlock(d_model, n_heads, d_ffn, dropout) for _ in range(n_layers)
        )
        self.vocab_head = nn.Linear(d_model, vocab_size)

    def forward(self, tokens, memory, memory_mask=None):
        """tokens: (B, T) ids; memory: (B, M, d); memory_mask: (B, M) bool or None.

        Returns logits (B, T, vocab). Position t sees only positions <= t.
        """
        batch, steps = tokens.shape
        if steps > self.max_len:
            raise ShapeError(f"sequence length {steps} exceeds maximum {self.max_len}")
        if memory.shape[-1] != self.d_model:
            raise ShapeError(f"memory width {memory.shape[-1]} != d_model {self.d_model}")
        if memory.shape[1] == 0:
            raise ShapeError("memory must contain at least one token")
        positions = torch.arange(steps, device=tokens.device)
        x = self.token_embedding(tokens) + self.position_embedding(positions)
        causal = torch.tril(torch.ones(steps, steps, dtype=torch.bool, device=tokens.device))
        causal = causal.view(1, 1, steps, steps)
        mem_mask = None
        if memory_mask is not None:
            mem_mask = memory_mask.view(batch, 1, 1, -1)
        for block in self.blocks:
            x = block(x, memory, causal, mem_mask)
        return self.vocab_head(x)
