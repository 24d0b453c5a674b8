import random

import pytest
import torch
import torch.nn.functional as F

from sgn.errors import CapacityError, ShapeError
from sgn.gradcheck import max_gradient_error
from sgn.tree2recipe import (
    GATLayer,
    TreeEncoder,
    TreeEncoderConfig,
    embed_tree,
    node_features_from_tree,
    neighborhoods,
)
from sgn.treekit import SentenceTree, canonical_order, random_tree


def single_node():
    return SentenceTree((-1,), ((0, 0),))


def path3():
    return SentenceTree.from_parents([-1, 0, 1])


def test_node_features_single_node():
    z = node_features_from_tree(single_node(), n_max=5)
    expected = torch.zeros(1, 5)
    expected[0, 0] = 1.0
    assert torch.equal(z, expected)


def test_node_features_path_hand_built():
    z = node_features_from_tree(path3(), n_max=4)
    expected = torch.tensor(
        [[1.0, 1.0, 0.0, 0.0],
         [1.0, 1.0, 1.0, 0.0],
         [0.0, 1.0, 1.0, 0.0]]
    )
    assert torch.equal(z, expected)


def brute_force_adjacency(tree, n_max):
    m = [[0.0] * n_max for _ in range(tree.n)]
    for i in range(tree.n):
        m[i][i] = 1.0
    for child in range(1, tree.n):
        parent = tree.parents[child]
        m[child][parent] = 1.0
        m[parent][child] = 1.0
    return torch.tensor(m)


def test_node_features_match_brute_force():
    rng = random.Random(0)
    for _ in range(25):
        tree = random_tree(10, rng)
        assert torch.equal(
            node_features_from_tree(tree, 12), brute_force_adjacency(tree, 12)
        )


def test_node_features_capacity():
    with pytest.raises(CapacityError):
        node_features_from_tree(random_tree(6, random.Random(1)), n_max=5)


def test_isolated_node_attention_is_identity():
    torch.manual_seed(0)
    layer = GATLayer(4, 6, heads=1)
    tree = single_node()
    z = node_features_from_tree(tree, 4)
    with torch.no_grad():
        out, weights = layer(z, tree, return_weights=True)
        expected = F.elu(layer.W(z).view(1, 1, 6).mean(dim=1))
    assert weights[0, 0, 0] == pytest.approx(1.0)
    assert torch.allclose(out, expected, atol=1e-6)


def test_identical_feature_nodes_split_attention_evenly():
    torch.manual_seed(1)
    layer = GATLayer(3, 6, heads=2)
    # two-node path: with identical input rows, scores to self and neighbour tie
    tree = SentenceTree.from_parents([-1, 0])
    z = torch.ones(2, 3)
    _, weights = layer(z, tree, return_weights=True)
    assert torch.allclose(weights[0, :2], torch.full((2, 2), 0.5), atol=1e-6)
    assert torch.allclose(weights[1, :2], torch.full((2, 2), 0.5), atol=1e-6)


def dense_mask_reference(layer, z, tree):
    """Oracle: dense scores with -inf on non-edges, ordinary softmax."""
    n = tree.n
    wz = layer.W(z).view(n, layer.heads, layer.out_dim)
    s_src = (wz * layer.a_src).sum(-1)
    s_dst = (wz * layer.a_dst).sum(-1)
    scores = torch.full((n, n, layer.heads), float("-inf"), dtype=z.dtype)
    neigh = neighborhoods(tree)
    for i in range(n):
        for j in neigh[i]:
            scores[i, j] = F.leaky_relu(s_src[i] + s_dst[j], layer.negative_slope)
    alpha = torch.softmax(scores, dim=1)
    out = torch.einsum("ijh,jhd->ihd", alpha, wz).mean(dim=1)
    return F.elu(out), alpha


def test_masked_computation_matches_dense_reference():
    rng = random.Random(3)
    for trial in range(10):
        torch.manual_seed(trial)
        layer = GATLayer(8, 6, heads=3).double()
        tree = random_tree(rng.randint(1, 10), rng)
        z = torch.randn(tree.n, 8, dtype=torch.float64)
        out, weights = layer(z, tree, return_weights=True)
        ref_out, ref_alpha = dense_mask_reference(layer, z, tree)
        assert torch.allclose(out, ref_out, atol=1e-9)
        assert torch.allclose(weights, ref_alpha, atol=1e-9)


def test_attention_rows_sum_to_one_and_nonneighbors_zero():
    torch.manual_seed(4)
    layer = GATLayer(6, 4, heads=2)
    rng = random.Random(5)
    tree = random_tree(7, rng)
    z = torch.randn(7, 6)
    _, weights = layer(z, tree, return_weights=True)
    sums = weights.sum(dim=1)
    assert torch.allclose(sums, torch.ones(7, 2), atol=1e-6)
    neigh = neighborhoods(tree)
    for i in range(7):
        for j in range(7):
            if j not in neigh[i]:
                assert torch.all(weights[i, j] == 0)


def test_embed_tree_deterministic_and_label_free():
    torch.manual_seed(6)
    enc = TreeEncoder(TreeEncoderConfig(n_max=10, hidden=8, out_width=8, heads=2))
    tree = random_tree(6, random.Random(7))
    a = embed_tree(enc, tree)
    b = embed_tree(enc, tree)
    assert torch.equal(a.pooled, b.pooled)
    # permuting sentence labels leaves the embedding unchanged (inputs are label-free)
    leaves = [node for node, _ in tree.leaf_labels]
    perm = leaves[1:] + leaves[:1]
    relabeled = SentenceTree(tree.parents, tuple(sorted(zip(perm, range(len(leaves))))))
    c = embed_tree(enc, relabeled)
    assert torch.allclose(a.pooled, c.pooled, atol=0)


def test_neighbor_permutation_invariance():
    # a star: all neighbours of the root share features, so its output must be
    # invariant to which leaf is which
    torch.manual_seed(8)
    layer = GATLayer(5, 4, heads=2)
    star = canonical_order({(0, i) for i in (1, 2, 3)}, 0, {1: 0, 2: 1, 3: 2})
    z = torch.ones(4, 5)
    out = layer(z, star)
    assert torch.allclose(out[1], out[2], atol=1e-6)
    assert torch.allclose(out[2], out[3], atol=1e-6)


def test_gat_gradient_check():
    torch.manual_seed(9)
    layer = GATLayer(6, 4, heads=2).double()
    tree = random_tree(5, random.Random(10))
    z = torch.randn(5, 6, dtype=torch.float64)

    def loss_fn():
        return (layer(z, tree) ** 2).sum()

    assert max_gradient_error(loss_fn, layer.parameters()) < 1e-4


def test_embed_tree_pooled_gradient_check():
    torch.manual_seed(10)
    enc = TreeEncoder(
        TreeEncoderConfig(n_max=8, hidden=4, out_width=4, heads=2)
    ).double()
    tree = random_tree(5, random.Random(11))
    target = torch.randn(4, dtype=torch.float64)

    def loss_fn():
        return ((enc(tree).pooled - target) ** 2).sum()

    assert max_gradient_error(loss_fn, enc.parameters()) < 1e-4


def test_gat_shape_errors():
    with pytest.raises(ShapeError):
        GATLayer(4, 5, heads=2)
    layer = GATLayer(4, 4, heads=2)
    with pytest.raises(ShapeError):
        layer(torch.zeros(3, 4), SentenceTree.from_parents([-1, 0]))


def test_pooled_is_mean_of_node_outputs():
    torch.manual_seed(11)
    enc = TreeEncoder(TreeEncoderConfig(n_max=10, hidden=8, out_width=8, heads=2))
    tree = random_tree(6, random.Random(12))
    emb = enc(tree)
    assert torch.allclose(emb.pooled, emb.node_features.mean(dim=0), atol=1e-7)
