import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from lyapctl.dataset import (
    GraphBundle,
    SplitSpec,
    biased_split,
    load_bundle,
    normalize_adjacency,
    push_ppr,
    reduce_features,
    save_bundle,
    synth_graph,
)
from lyapctl.errors import ValidationError
from lyapctl.numerics import SparseMatrixCsr


def ring_graph(n=8, num_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    dense = np.zeros((n, n))
    for i in range(n):
        dense[i, (i + 1) % n] = dense[(i + 1) % n, i] = 1.0
    return GraphBundle(
        num_nodes=n,
        num_classes=num_classes,
        adjacency=SparseMatrixCsr.from_scipy(sp.csr_array(dense)),
        features=rng.normal(size=(n, 3)),
        labels=np.arange(n) % num_classes,
        name="ring",
    )


def test_bundle_validates_shapes():
    g = ring_graph()
    with pytest.raises(ValidationError):
        dataclasses.replace(g, features=g.features[:-1])
    with pytest.raises(ValidationError):
        dataclasses.replace(g, labels=np.full(g.num_nodes, g.num_classes))
    bad = np.zeros(g.num_nodes, dtype=bool)
    bad[0] = True
    with pytest.raises(ValidationError):
        dataclasses.replace(g, train_mask=bad, val_mask=bad)


def test_save_load_round_trip(tmp_path):
    g = ring_graph()
    train = np.zeros(g.num_nodes, dtype=bool)
    train[[0, 3]] = True
    g = dataclasses.replace(g, train_mask=train)
    save_bundle(g, tmp_path / "ring")
    back = load_bundle(tmp_path / "ring")
    assert back.num_nodes == g.num_nodes
    assert back.num_classes == g.num_classes
    assert back.name == "ring"
    np.testing.assert_array_equal(back.adjacency.to_dense(), g.adjacency.to_dense())
    np.testing.assert_allclose(back.features, g.features, rtol=0, atol=0)
    np.testing.assert_array_equal(back.labels, g.labels)
    np.testing.assert_array_equal(back.train_mask, g.train_mask)
    assert not back.val_mask.any()


def test_save_bundle_deterministic_bytes(tmp_path):
    g = synth_graph(blocks=2, nodes_per_block=6, p_in=0.6, p_out=0.1,
                    feature_dim=4, seed=1)
    save_bundle(g, tmp_path / "a")
    save_bundle(g, tmp_path / "b")
    for fname in ("meta.json", "edges.tsv", "features.tsv", "labels.tsv"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


def test_load_bundle_rejects_corruption(tmp_path):
    g = ring_graph()
    root = tmp_path / "g"
    save_bundle(g, root)

    (root / "edges.tsv").write_text("0\t1\t2\n")
    with pytest.raises(ValidationError, match="pairs"):
        load_bundle(root)

    (root / "edges.tsv").write_text("0\t99\n")
    with pytest.raises(ValidationError, match="out of range"):
        load_bundle(root)

    (root / "edges.tsv").write_text("3\t3\n")
    with pytest.raises(ValidationError, match="self-loop"):
        load_bundle(root)


def test_load_bundle_missing_files(tmp_path):
    with pytest.raises(ValidationError, match="meta.json"):
        load_bundle(tmp_path)


def test_normalize_adjacency_matches_dense():
    g = synth_graph(blocks=2, nodes_per_block=5, p_in=0.8, p_out=0.2,
                    feature_dim=3, seed=4)
    a = g.adjacency.to_dense()
    a_tilde = a + np.eye(len(a))
    d = np.diag(1.0 / np.sqrt(a_tilde.sum(axis=1)))
    np.testing.assert_allclose(normalize_adjacency(g.adjacency).to_dense(),
                               d @ a_tilde @ d, rtol=1e-12, atol=1e-12)


def test_normalize_adjacency_requires_symmetry():
    dense = np.zeros((3, 3))
    dense[0, 1] = 1.0
    s = SparseMatrixCsr.from_scipy(sp.csr_array(dense))
    with pytest.raises(ValidationError, match="symmetric"):
        normalize_adjacency(s)


def _dense_ppr(a_dense, seed_node, teleport):
    deg = a_dense.sum(axis=1)
    walk = a_dense / np.maximum(deg, 1.0)[None, :]  # column-stochastic on non-dangling
    e = np.zeros(len(a_dense))
    e[seed_node] = 1.0
    return teleport * np.linalg.solve(np.eye(len(a_dense)) - (1 - teleport) * walk, e)


def test_push_ppr_matches_dense_solve():
    g = synth_graph(blocks=2, nodes_per_block=10, p_in=0.5, p_out=0.1,
                    feature_dim=2, seed=7)
    a = g.adjacency
    tol = 1e-9
    p = push_ppr(a, seed_node=3, teleport=0.15, tol=tol)
    exact = _dense_ppr(a.to_dense(), 3, 0.15)
    # total unpushed residual is below tol per unit degree
    assert np.abs(p - exact).sum() <= tol * (len(a.values) + len(exact))
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-6)


def test_push_ppr_isolated_seed_keeps_mass():
    dense = np.zeros((4, 4))
    dense[0, 1] = dense[1, 0] = 1.0  # node 3 is isolated
    s = SparseMatrixCsr.from_scipy(sp.csr_array(dense))
    p = push_ppr(s, seed_node=3, teleport=0.15)
    np.testing.assert_array_equal(p, [0, 0, 0, 1.0])


def test_biased_split_counts_and_determinism():
    g = synth_graph(blocks=3, nodes_per_block=30, p_in=0.4, p_out=0.02,
                    feature_dim=4, seed=2)
    spec = SplitSpec(per_class_train=10, val_total=20, test_total=30, bias_seed=5)
    s1 = biased_split(g, spec)
    s2 = biased_split(g, spec)
    np.testing.assert_array_equal(s1.train, s2.train)
    np.testing.assert_array_equal(s1.val, s2.val)
    np.testing.assert_array_equal(s1.test, s2.test)

    assert s1.train.sum() == 30
    assert s1.val.sum() == 20
    assert s1.test.sum() == 30
    for c in range(3):
        assert (s1.train & (g.labels == c)).sum() == 10
    assert not (s1.train & s1.val).any()
    assert not (s1.train & s1.test).any()
    assert not (s1.val & s1.test).any()


def test_biased_split_prefers_high_ppr_nodes():
    g = synth_graph(blocks=4, nodes_per_block=25, p_in=0.5, p_out=0.01,
                    feature_dim=4, seed=3)
    spec = SplitSpec(per_class_train=5, val_total=10, test_total=10, bias_seed=1)
    rng = np.random.default_rng(spec.bias_seed)
    seed_node = int(rng.integers(g.num_nodes))
    scores = push_ppr(g.adjacency, seed_node, spec.ppr_teleport)
    s = biased_split(g, spec)
    assert scores[s.train].mean() > scores.mean()


def test_biased_split_tops_up_unreached_classes():
    # two disconnected cliques; the push never leaves the seed's clique,
    # so the other class must fill up from the unreached tail
    n = 12
    dense = np.zeros((n, n))
    for blk in (range(6), range(6, 12)):
        for i in blk:
            for j in blk:
                if i != j:
                    dense[i, j] = 1.0
    g = GraphBundle(
        num_nodes=n,
        num_classes=2,
        adjacency=SparseMatrixCsr.from_scipy(sp.csr_array(dense)),
        features=np.zeros((n, 2)),
        labels=np.repeat([0, 1], 6),
        name="cliques",
    )
    s = biased_split(g, SplitSpec(per_class_train=4, val_total=2, test_total=2,
                                  bias_seed=0))
    assert (s.train & (g.labels == 0)).sum() == 4
    assert (s.train & (g.labels == 1)).sum() == 4


def test_biased_split_infeasible_raises():
    g = ring_graph(n=8, num_classes=2)
    with pytest.raises(ValidationError):
        biased_split(g, SplitSpec(per_class_train=5, val_total=0, test_total=0))
    with pytest.raises(ValidationError):
        biased_split(g, SplitSpec(per_class_train=2, val_total=4, test_total=4))


def test_synth_graph_structure():
    g = synth_graph(blocks=2, nodes_per_block=30, p_in=0.5, p_out=0.05,
                    feature_dim=6, seed=9)
    assert g.num_nodes == 60
    assert g.num_classes == 2
    assert g.name == "sbm-2x30"
    a = g.adjacency.to_dense()
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)
    same = g.labels[:, None] == g.labels[None, :]
    off = ~np.eye(60, dtype=bool)
    assert a[same & off].mean() > 5 * a[~same].mean()

    g2 = synth_graph(blocks=2, nodes_per_block=30, p_in=0.5, p_out=0.05,
                     feature_dim=6, seed=9)
    np.testing.assert_array_equal(g2.features, g.features)
    np.testing.assert_array_equal(g2.adjacency.to_dense(), a)


def test_reduce_features_projects_with_pca():
    from lyapctl.numerics import pca_transform

    g = synth_graph(blocks=2, nodes_per_block=10, p_in=0.5, p_out=0.1,
                    feature_dim=8, seed=6)
    red, pca = reduce_features(g, 3)
    assert red.features.shape == (20, 3)
    assert red.num_classes == g.num_classes
    np.testing.assert_allclose(red.features, pca_transform(pca, g.features),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(red.adjacency.to_dense(), g.adjacency.to_dense())
