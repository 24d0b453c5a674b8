"""Tree encoding with masked multi-head graph attention.

Node inputs are the rows of the symmetric adjacency matrix (self-loops added),
zero-padded to the node capacity. Attention scores exist only between
neighbours; each node's scores are normalized over its neighbourhood, heads
are averaged, and a nonlinearity produces the layer output. The pooled tree
feature is the mean over node outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, ShapeError
from .treekit import SentenceTree


@dataclass(frozen=True)
class TreeEncoderConfig:
    n_max: int = 39
    hidden: int = 64
    out_width: int = 128
    heads: int = 4
    layers: int = 2
    negative_slope: float = 0.2


def node_features_from_tree(tree: SentenceTree, n_max: int,
                            dtype=torch.float32) -> torch.Tensor:
    """(n, n_max) rows of the symmetric adjacency matrix with self-loops."""
    if tree.n > n_max:
        raise CapacityError(f"tree with {tree.n} nodes exceeds capacity {n_max}")
    z = torch.zeros(tree.n, n_max, dtype=dtype)
    for i in range(tree.n):
        z[i, i] = 1.0
    for child in range(1, tree.n):
        parent = tree.parents[child]
        z[child, parent] = 1.0
        z[parent, child] = 1.0
    return z


def neighborhoods(tree: SentenceTree) -> list[list[int]]:
    """Neighbour lists including the node itself."""
    neigh = [[i] for i in range(tree.n)]
    for child in range(1, tree.n):
        parent = tree.parents[child]
        neigh[child].append(parent)
        neigh[parent].append(child)
    return neigh


class GATLayer(nn.Module):
    """One masked graph-attention layer; heads averaged, then the nonlinearity."""

    def __init__(self, in_dim: int, out_dim: int, heads: int,
                 negative_slope: float = 0.2):
        super().__init__()
        if out_dim % heads:
            raise ShapeError(f"output width {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.out_dim = out_dim
        self.negative_slope = negative_slope
        self.W = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.a_src = nn.Parameter(torch.empty(heads, out_dim))
        self.a_dst = nn.Parameter(torch.empty(heads, out_dim))
        nn.init.xavier_uniform_(self.W.weight)
        nn.init.xavier_uniform_(self.a_src)
        nn.init.xavier_uniform_(self.a_dst)

    def forward(self, z: torch.Tensor, tree: SentenceTree, return_weights: bool = False):
        n = tree.n
        if z.shape[0] != n:
            raise ShapeError(f"{z.shape[0]} feature rows for {n} nodes")
        wz = self.W(z).view(n, self.heads, self.out_dim)
        s_src = (wz * self.a_src).sum(-1)  # (n, H): contribution of the attending node
        s_dst = (wz * self.a_dst).sum(-1)  # (n, H): contribution of the attended node

        neigh = neighborhoods(tree)
        width = max(len(m) for m in neigh)
        index = torch.zeros(n, width, dtype=torch.long)
        mask = torch.zeros(n, width, dtype=torch.bool)
        for i, members in enumerate(neigh):
            index[i, : len(members)] = torch.tensor(members)
            mask[i, : len(members)] = True

        scores = F.leaky_relu(
            s_src.unsqueeze(1) + s_dst[index], self.negative_slope
        )  # (n, width, H)
        scores = scores.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        alpha = torch.softmax(scores, dim=1)
        gathered = wz[index]                                   # (n, width, H, d)
        mixed = (alpha.unsqueeze(-1) * gathered).sum(dim=1)    # (n, H, d)
        out = F.elu(mixed.mean(dim=1))
        if return_weights:
            dense = torch.zeros(n, n, self.heads, dtype=alpha.dtype)
            for i, members in enumerate(neigh):
                dense[i, torch.tensor(members)] = alpha[i, : len(members)]
            return out, dense
        return out


@dataclass
class TreeEmbedding:
    node_features: torch.Tensor  # (n, out_width)
    pooled: torch.Tensor         # (out_width,)


class TreeEncoder(nn.Module):
    def __init__(self, config: TreeEncoderConfig):
        super().__init__()
        self.config = config
        dims = [config.n_max] + [config.hidden] * (config.layers - 1) + [config.out_width]
        self.layers = nn.ModuleList(
            GATLayer(dims[k], dims[k + 1], config.heads, config.negative_slope)
            for k in range(config.layers)
        )

    def forward(self, tree: SentenceTree) -> TreeEmbedding:
        dtype = self.layers[0].W.weight.dtype
        z = node_features_from_tree(tree, self.config.n_max, dtype)
        for layer in self.layers:
            z = layer(z, tree)
        return TreeEmbedding(node_features=z, pooled=z.mean(dim=0))


def embed_tree(encoder: TreeEncoder, tree: SentenceTree) -> TreeEmbedding:
    return encoder(tree)
