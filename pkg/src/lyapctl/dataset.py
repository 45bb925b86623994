"""Graph bundle ingestion, propagation operator, biased splits, synthetic graphs.

On-disk bundle layout (one directory per dataset):

    meta.json      {"num_nodes": int, "num_classes": int, "feature_dim": int, "name": str}
    edges.tsv      one "u<TAB>v" line per edge, 0-indexed, no self-loops
    features.tsv   one whitespace-separated float row per node
    labels.tsv     one integer class id per node
    splits.json    optional: {"train": [ids], "val": [ids], "test": [ids]}
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .numerics import PcaModel, SparseMatrixCsr, pca_fit, pca_transform


@dataclass
class GraphBundle:
    """An undirected graph with node features, labels, and split masks.

    Immutable by convention: operations return new bundles instead of
    mutating, so a loaded bundle can be shared across threads.
    """

    num_nodes: int
    num_classes: int
    adjacency: SparseMatrixCsr
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray = field(default=None)
    val_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        n = self.num_nodes
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for attr in ("train_mask", "val_mask", "test_mask"):
            m = getattr(self, attr)
            m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise ValidationError(f"{attr} must have shape ({n},)")
            setattr(self, attr, m)
        if self.adjacency.n != n:
            raise ValidationError("adjacency size does not match num_nodes")
        if self.features.shape[0] != n:
            raise ValidationError("features row count does not match num_nodes")
        if self.labels.shape != (n,):
            raise ValidationError("labels length does not match num_nodes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels out of range [0, num_classes)")
        if np.any(self.train_mask & self.val_mask) or np.any(self.train_mask & self.test_mask) \
                or np.any(self.val_mask & self.test_mask):
            raise ValidationError("split masks must be disjoint")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


class Splits(NamedTuple):
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class SplitSpec:
    """Parameters of the localized (biased) train/val/test sampler."""

    per_class_train: int = 20
    val_total: int = 500
    test_total: int = 1000
    bias_seed: int = 0
    ppr_teleport: float = 0.15

    def __post_init__(self):
        if not (0.0 < self.ppr_teleport < 1.0):
            raise ValidationError("ppr_teleport must lie in (0, 1)")
        if min(self.per_class_train, self.val_total, self.test_total) < 0:
            raise ValidationError("split sizes must be nonnegative")


def _edges_to_csr(num_nodes: int, edges: np.ndarray) -> SparseMatrixCsr:
    """Symmetrize and deduplicate an edge list into a 0/1 CSR adjacency."""
    if len(edges) == 0:
        return SparseMatrixCsr.from_scipy(sp.csr_array((num_nodes, num_nodes)))
    u, v = edges[:, 0], edges[:, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    a = sp.csr_array((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
    a.sum_duplicates()
    a.data[:] = 1.0  # collapse duplicate edges
    return SparseMatrixCsr.from_scipy(a)


def load_bundle(path) -> GraphBundle:
    """Load and validate a bundle directory."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise ValidationError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    for key in ("num_nodes", "num_classes", "feature_dim"):
        if key not in meta:
            raise ValidationError(f"meta.json missing key {key!r}")
    n, num_classes, d = int(meta["num_nodes"]), int(meta["num_classes"]), int(meta["feature_dim"])

    for fname in ("edges.tsv", "features.tsv", "labels.tsv"):
        if not (root / fname).is_file():
            raise ValidationError(f"missing {root / fname}")

    edge_lines = (root / "edges.tsv").read_text().split()
    if len(edge_lines) % 2:
        raise ValidationError("edges.tsv must contain u/v pairs")
    edges = np.asarray(edge_lines, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        if edges.min() < 0 or edges.max() >= n:
            raise ValidationError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValidationError("edges.tsv contains a self-loop")

    features = np.loadtxt(root / "features.tsv", dtype=np.float64, ndmin=2)
    if features.shape != (n, d):
        raise ValidationError(
            f"features.tsv shape {features.shape} does not match meta ({n}, {d})"
        )
    labels = np.loadtxt(root / "labels.tsv", dtype=np.int64, ndmin=1)
    if labels.shape != (n,):
        raise ValidationError("labels.tsv length does not match meta num_nodes")

    masks = {}
    splits_path = root / "splits.json"
    if splits_path.is_file():
        raw = json.loads(splits_path.read_text())
        for key, attr in (("train", "train_mask"), ("val", "val_mask"), ("test", "test_mask")):
            ids = np.asarray(raw.get(key, []), dtype=np.int64)
            m = np.zeros(n, dtype=bool)
            if len(ids):
                if ids.min() < 0 or ids.max() >= n:
                    raise ValidationError(f"splits.json {key} id out of range")
                m[ids] = True
            masks[attr] = m

    return GraphBundle(
        num_nodes=n,
        num_classes=num_classes,
        adjacency=_edges_to_csr(n, edges),
        features=features,
        labels=labels,
        name=str(meta.get("name", root.name)),
        **masks,
    )


def save_bundle(g: GraphBundle, path) -> None:
    """Write a bundle directory in the on-disk format (deterministic bytes)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "num_classes": g.num_classes,
        "feature_dim": g.feature_dim,
        "name": g.name,
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    a = g.adjacency.to_scipy().tocoo()
    mask = a.row < a.col  # emit each undirected edge once
    order = np.lexsort((a.col[mask], a.row[mask]))
    lines = [f"{u}\t{v}" for u, v in zip(a.row[mask][order], a.col[mask][order])]
    (root / "edges.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))

    with open(root / "features.tsv", "w") as fh:
        for row in g.features:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    (root / "labels.tsv").write_text("".join(f"{c}\n" for c in g.labels))

    if g.train_mask.any() or g.val_mask.any() or g.test_mask.any():
        write_splits(Splits(g.train_mask, g.val_mask, g.test_mask), root / "splits.json")


def write_splits(splits: Splits, path) -> None:
    payload = {
        "train": np.flatnonzero(splits.train).tolist(),
        "val": np.flatnonzero(splits.val).tolist(),
        "test": np.flatnonzero(splits.test).tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def normalize_adjacency(a: SparseMatrixCsr) -> SparseMatrixCsr:
    """Symmetric normalization with self-loops: D̃^{-1/2}(A+I)D̃^{-1/2}."""
    s = a.to_scipy()
    if (s != s.T).nnz:
        raise ValidationError("adjacency must be symmetric")
    s = (s + sp.eye_array(a.n, format="csr")).tocsr()
    deg = np.asarray(s.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.dia_array((inv_sqrt[None, :], [0]), shape=(a.n, a.n))
    return SparseMatrixCsr.from_scipy((d @ s @ d).tocsr())


def push_ppr(a: SparseMatrixCsr, seed_node: int, teleport: float, tol: float = 1e-6) -> np.ndarray:
    """Approximate personalized PageRank by the push method.

    Approximates pi = teleport * e_s (I - (1-teleport) D^{-1}A)^{-1}; residual
    at a node is pushed once it exceeds tol * degree. Dangling nodes keep
    their mass.
    """
    n = a.n
    deg = np.diff(a.row_ptr)
    p = np.zeros(n)
    r = np.zeros(n)
    r[seed_node] = 1.0
    queue = deque([seed_node])
    in_queue = np.zeros(n, dtype=bool)
    in_queue[seed_node] = True
    while queue:
        u = queue.popleft()
        in_queue[u] = False
        ru = r[u]
        r[u] = 0.0
        if deg[u] == 0:
            p[u] += ru  # dangling: absorb
            continue
        p[u] += teleport * ru
        push = (1.0 - teleport) * ru / deg[u]
        start, end = a.row_ptr[u], a.row_ptr[u + 1]
        for v in a.col_idx[start:end]:
            r[v] += push
            if not in_queue[v] and r[v] > tol * max(deg[v], 1):
                queue.append(v)
                in_queue[v] = True
    return p


def biased_split(g: GraphBundle, spec: SplitSpec) -> Splits:
    """Localized training split: rank nodes by PPR from a random seed node.

    Per-class training nodes are taken greedily down the ranking; nodes the
    push never reached sit at the tail in seeded-random order, so classes
    without enough localized candidates are topped up uniformly. Validation
    and test sets are sampled uniformly from the remainder.
    """
    n = g.num_nodes
    rng = np.random.default_rng(spec.bias_seed)
    counts = np.bincount(g.labels, minlength=g.num_classes)
    if np.any(counts < spec.per_class_train):
        raise ValidationError(
            f"per_class_train={spec.per_class_train} infeasible: class counts {counts.tolist()}"
        )
    n_train = spec.per_class_train * g.num_classes
    if n_train + spec.val_total + spec.test_total > n:
        raise ValidationError("split totals exceed the number of nodes")

    seed_node = int(rng.integers(n))
    scores = push_ppr(g.adjacency, seed_node, spec.ppr_teleport)
    shuffle_key = rng.permutation(n)  # tie-break: unreached nodes in random order
    ranking = np.lexsort((shuffle_key, -scores))

    train = np.zeros(n, dtype=bool)
    taken = np.zeros(g.num_classes, dtype=np.int64)
    for node in ranking:
        c = g.labels[node]
        if taken[c] < spec.per_class_train:
            train[node] = True
            taken[c] += 1
        if taken.sum() == n_train:
            break

    rest = rng.permutation(np.flatnonzero(~train))
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:spec.val_total]] = True
    test[rest[spec.val_total:spec.val_total + spec.test_total]] = True
    return Splits(train, val, test)


def synth_graph(blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                feature_dim: int, seed: int = 0) -> GraphBundle:
    """Planted-partition graph: class = block, Gaussian class-mean features."""
    if blocks < 1 or nodes_per_block < 1 or feature_dim < 1:
        raise ValidationError("synth_graph sizes must be positive")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValidationError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    means = rng.normal(0.0, 1.0, size=(blocks, feature_dim))
    features = means[labels] + rng.normal(0.0, 1.0, size=(n, feature_dim))

    return GraphBundle(
        num_nodes=n,
        num_classes=blocks,
        adjacency=_edges_to_csr(n, edges),
        features=features,
        labels=labels,
        name=f"sbm-{blocks}x{nodes_per_block}",
    )


def reduce_features(g: GraphBundle, k: int) -> tuple[GraphBundle, PcaModel]:
    """Replace features by their PCA-k projection (fit on all nodes)."""
    model = pca_fit(g.features, k)
    reduced = pca_transform(model, g.features)
    bundle = GraphBundle(
        num_nodes=g.num_nodes,
        num_classes=g.num_classes,
        adjacency=g.adjacency,
        features=reduced,
        labels=g.labels,
        train_mask=g.train_mask,
        val_mask=g.val_mask,
        test_mask=g.test_mask,
        name=g.name,
    )
    return bundle, model
