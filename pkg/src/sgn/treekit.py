"""Sentence trees, canonical node ordering, and the lower-triangular adjacency codec.

Trees are stored as parent arrays under a hierarchical ordering: every parent id
is smaller than its children's ids, node 0 is the root. Only leaves carry
sentence indices. The adjacency codec flattens the strictly-lower-triangular
part of the (hierarchically ordered) adjacency matrix row by row, so a tree
with n nodes serializes to n*(n-1)/2 bits with exactly one set bit per row.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import cached_property

from .errors import AdjacencyShapeError, ComparabilityError, InvalidTreeError


@dataclass(frozen=True)
class SentenceTree:
    """Rooted tree whose leaves are the sentences of a paragraph.

    parents[0] == -1 marks the root; parents[i] < i for every other node.
    leaf_labels maps leaf node id -> sentence index (a bijection onto
    0..leaf_count-1).
    """

    parents: tuple[int, ...]
    leaf_labels: tuple[tuple[int, int], ...]  # sorted (node id, sentence index) pairs

    def __post_init__(self):
        n = len(self.parents)
        if n == 0:
            raise InvalidTreeError("tree must have at least one node")
        if self.parents[0] != -1:
            raise InvalidTreeError("node 0 must be the root (parent -1)")
        for i in range(1, n):
            if not 0 <= self.parents[i] < i:
                raise InvalidTreeError(
                    f"node {i} has parent {self.parents[i]}; parents must precede children"
                )
        leaves = set(self.leaf_nodes)
        labelled = {node for node, _ in self.leaf_labels}
        if labelled != leaves:
            raise InvalidTreeError("leaf_labels must cover exactly the leaf nodes")
        sentences = sorted(s for _, s in self.leaf_labels)
        if sentences != list(range(len(leaves))):
            raise InvalidTreeError("sentence indices must be a bijection onto 0..L-1")

    @classmethod
    def from_parents(cls, parents) -> "SentenceTree":
        """Build a tree from a parent array, labelling leaves in reading order.

        Reading order is pre-order DFS with children visited by ascending id,
        matching how decoded adjacency vectors are labelled.
        """
        parents = tuple(parents)
        labels = _reading_order_labels(parents)
        return cls(parents, labels)

    @cached_property
    def n(self) -> int:
        return len(self.parents)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in range(self.n)]
        for i in range(1, self.n):
            kids[self.parents[i]].append(i)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def leaf_nodes(self) -> tuple[int, ...]:
        has_child = [False] * self.n
        for i in range(1, self.n):
            has_child[self.parents[i]] = True
        return tuple(i for i in range(self.n) if not has_child[i])

    @cached_property
    def label_of(self) -> dict[int, int]:
        return dict(self.leaf_labels)

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_labels)

    def is_leaf(self, node: int) -> bool:
        return len(self.children[node]) == 0

    def edges(self) -> set[tuple[int, int]]:
        return {(self.parents[i], i) for i in range(1, self.n)}

    def spans(self) -> set[frozenset[int]]:
        """Sentence-index sets induced by internal nodes (root included)."""
        covered = [set() for _ in range(self.n)]
        for node in range(self.n - 1, -1, -1):
            if self.is_leaf(node):
                covered[node].add(self.label_of[node])
            if node > 0:
                covered[self.parents[node]].update(covered[node])
        return {frozenset(covered[i]) for i in range(self.n) if not self.is_leaf(i)}

    def bracket(self) -> str:
        """Bracketed rendering, e.g. '(s0 ((s1 s2) s3))'."""

        def render(node):
            if self.is_leaf(node):
                return f"s{self.label_of[node]}"
            return "(" + " ".join(render(c) for c in self.children[node]) + ")"

        return render(0)

    def canonical(self) -> "SentenceTree":
        """Renumber into canonical (BFS) hierarchical order."""
        return canonical_order(self.edges(), 0, self.label_of)


def _reading_order_labels(parents) -> tuple[tuple[int, int], ...]:
    n = len(parents)
    kids = [[] for _ in range(n)]
    for i in range(1, n):
        kids[parents[i]].append(i)
    labels = []
    stack = [0]
    while stack:
        node = stack.pop()
        if not kids[node]:
            labels.append((node, len(labels)))
        else:
            stack.extend(reversed(kids[node]))
    return tuple(sorted((node, idx) for node, idx in labels))


@dataclass(frozen=True)
class AdjacencyVector:
    """Flattened lower-triangular adjacency rows; one set bit per row."""

    bits: tuple[int, ...]

    def __post_init__(self):
        n = _node_count_for(len(self.bits))
        pos = 0
        for i in range(1, n):
            row = self.bits[pos : pos + i]
            if sum(row) != 1:
                raise InvalidTreeError(
                    f"row {i} has {sum(row)} set bits; a tree node needs exactly one parent"
                )
            pos += i

    @property
    def n(self) -> int:
        """Node count of the encoded tree."""
        return _node_count_for(len(self.bits))

    def rows(self):
        pos = 0
        for i in range(1, self.n):
            yield self.bits[pos : pos + i]
            pos += i

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, text: str) -> "AdjacencyVector":
        if not set(text) <= {"0", "1"}:
            raise AdjacencyShapeError(f"bit string may contain only 0/1, got {text!r}")
        return cls(tuple(int(c) for c in text))


def _node_count_for(length: int) -> int:
    # length == n*(n-1)/2
    n = int((1 + (1 + 8 * length) ** 0.5) / 2)
    if n * (n - 1) // 2 != length:
        raise AdjacencyShapeError(f"length {length} is not a triangular number")
    return n


def encode_tree(tree: SentenceTree) -> AdjacencyVector:
    """Serialize a tree to its lower-triangular adjacency bits."""
    bits = []
    for i in range(1, tree.n):
        row = [0] * i
        row[tree.parents[i]] = 1
        bits.extend(row)
    return AdjacencyVector(tuple(bits))


def decode_vector(vec: AdjacencyVector) -> SentenceTree:
    """Rebuild the tree a bit sequence describes; leaves labelled in reading order."""
    parents = [-1]
    for row in vec.rows():
        parents.append(row.index(1))
    return SentenceTree.from_parents(parents)


def canonical_order(edges, root, leaf_labels=None) -> SentenceTree:
    """Renumber an undirected edge set into canonical hierarchical (BFS) order.

    Children of each node are ordered by the smallest sentence index among
    their subtree's leaves (leaves win over internal nodes on the defensive
    tie). When leaf_labels is None, leaves are keyed by their original node id
    and afterwards labelled in reading order.
    """
    adj: dict = {}
    for a, b in edges:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    adj.setdefault(root, set())

    nodes = set(adj)
    if len(edges) != len(nodes) - 1:
        raise InvalidTreeError(
            f"{len(edges)} edges over {len(nodes)} nodes cannot form a tree"
        )

    # orient away from the root, checking connectivity
    parent_of = {root: None}
    order = [root]
    frontier = [root]
    while frontier:
        node = frontier.pop()
        for nxt in adj[node]:
            if nxt not in parent_of:
                parent_of[nxt] = node
                order.append(nxt)
                frontier.append(nxt)
    if len(parent_of) != len(nodes):
        raise InvalidTreeError("edge set is disconnected or cyclic")

    kids = {node: [] for node in nodes}
    for node in order[1:]:
        kids[parent_of[node]].append(node)

    def subtree_key(node):
        best = None
        stack = [node]
        is_leaf = not kids[node]
        while stack:
            cur = stack.pop()
            if not kids[cur]:
                key = cur if leaf_labels is None else leaf_labels[cur]
                best = key if best is None else min(best, key)
            else:
                stack.extend(kids[cur])
        return (best, 0 if is_leaf else 1)

    new_id = {root: 0}
    parents = [-1]
    queue = [root]
    while queue:
        node = queue.pop(0)
        for child in sorted(kids[node], key=subtree_key):
            new_id[child] = len(parents)
            parents.append(new_id[node])
            queue.append(child)

    if leaf_labels is None:
        return SentenceTree.from_parents(parents)
    labels = tuple(
        sorted((new_id[node], sent) for node, sent in leaf_labels.items())
    )
    return SentenceTree(tuple(parents), labels)


def unlabeled_f1(predicted: SentenceTree, reference: SentenceTree) -> float:
    """F1 over the sentence-index spans induced by internal nodes."""
    if predicted.leaf_count != reference.leaf_count:
        raise ComparabilityError(
            f"leaf counts differ: {predicted.leaf_count} vs {reference.leaf_count}"
        )
    pred, ref = predicted.spans(), reference.spans()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    hits = len(pred & ref)
    precision = hits / len(pred)
    recall = hits / len(ref)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def random_tree(n: int, rng: random.Random) -> SentenceTree:
    """Uniform random parent array of n nodes, leaves labelled in reading order."""
    parents = [-1] + [rng.randrange(i) for i in range(1, n)]
    return SentenceTree.from_parents(parents)


def random_binary_tree(leaves: int, rng: random.Random) -> SentenceTree:
    """Random binary bracketing over `leaves` sentences (uniform split points)."""

    counter = [0]

    def build(lo, hi, nodes, edges, labels):
        node = counter[0]
        counter[0] += 1
        nodes.append(node)
        if lo == hi:
            labels[node] = lo
            return node
        split = rng.randint(lo, hi - 1)  # last sentence of the left part
        left = build(lo, split, nodes, edges, labels)
        edges.add((node, left))
        right = build(split + 1, hi, nodes, edges, labels)
        edges.add((node, right))
        return node

    nodes, edges, labels = [], set(), {}
    build(0, leaves - 1, nodes, edges, labels)
    if not edges:
        return SentenceTree((-1,), ((0, 0),))
    return canonical_order(edges, 0, labels)
