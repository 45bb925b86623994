"""Citation-network archive conversion.

Upstream releases ship eight pickled parts per dataset:

    ind.<name>.x      csr matrix, features of the labeled training rows
    ind.<name>.y      one-hot labels for those rows
    ind.<name>.allx   csr matrix, features of all non-test rows (superset of x)
    ind.<name>.ally   one-hot labels for allx rows
    ind.<name>.tx     csr matrix, features of the test rows
    ind.<name>.ty     one-hot labels for the test rows
    ind.<name>.graph  dict {node: [neighbor, ...]} with directed duplicates
    ind.<name>.test.index  one global node id per line, the row order of tx

Non-test rows occupy global ids 0..len(allx)-1; test row i lives at
test.index[i]. Some releases leave gaps in the test id range (isolated
nodes); those get all-zero features and, lacking a one-hot row, label 0.

The output is the bundle directory format of lyapctl.dataset, written
through its own serializer so the bytes match exactly what the consumer
expects: meta.json, edges.tsv (unique undirected pairs, u < v), a dense
features.tsv, and labels.tsv.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from lyapctl.dataset import GraphBundle, save_bundle
from lyapctl.numerics import SparseMatrixCsr

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")
EMITTED = ("meta.json", "edges.tsv", "features.tsv", "labels.tsv")

# published statistics for the standard citation benchmarks; node, feature
# and class counts are exact, edge counts follow the source's convention
# and may deviate from a deduplicated undirected pair count
REFERENCE_STATS = {
    "cora": {"nodes": 2708, "edges": 5429, "features": 1433, "classes": 7},
    "citeseer": {"nodes": 3327, "edges": 4732, "features": 3703, "classes": 6},
    "pubmed": {"nodes": 19717, "edges": 44338, "features": 500, "classes": 3},
}


class ConversionError(Exception):
    """Raised for missing or corrupt sources and reference-count mismatches."""


@dataclass
class ConversionManifest:
    """What a conversion read, wrote, and measured."""

    dataset: str
    source_files: list
    emitted_files: list
    num_nodes: int
    num_edges: int
    num_features: int
    num_classes: int
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "source_files": list(self.source_files),
            "emitted_files": list(self.emitted_files),
            "num_nodes": self.num_nodes,
            "num_edges": self.num_edges,
            "num_features": self.num_features,
            "num_classes": self.num_classes,
            "notes": list(self.notes),
        }

    def summary(self) -> str:
        lines = [f"{self.dataset}: {self.num_nodes} nodes, {self.num_edges} edges, "
                 f"{self.num_features} features, {self.num_classes} classes"]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _load_part(path: Path):
    if not path.is_file():
        raise ConversionError(f"missing source file {path}")
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except Exception as exc:
        raise ConversionError(f"corrupt source file {path}: {exc}") from exc


def _read_sources(dataset_name: str, source_dir: Path):
    raw = {}
    paths = []
    for part in PARTS:
        path = source_dir / f"ind.{dataset_name}.{part}"
        raw[part] = _load_part(path)
        paths.append(path)
    idx_path = source_dir / f"ind.{dataset_name}.test.index"
    if not idx_path.is_file():
        raise ConversionError(f"missing source file {idx_path}")
    try:
        test_idx = np.loadtxt(idx_path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise ConversionError(f"corrupt source file {idx_path}: {exc}") from exc
    paths.append(idx_path)
    return raw, test_idx, paths


def _assemble_nodes(raw, test_idx):
    """Place allx and tx rows at their global ids; returns features, labels, notes."""
    allx, tx = raw["allx"], raw["tx"]
    ally = np.asarray(raw["ally"], dtype=np.float64)
    ty = np.asarray(raw["ty"], dtype=np.float64)
    if not (sp.issparse(allx) and sp.issparse(tx)):
        raise ConversionError("feature parts must be sparse matrices")
    d, c = allx.shape[1], ally.shape[1]
    if tx.shape[1] != d:
        raise ConversionError(f"tx has {tx.shape[1]} features, allx has {d}")
    if ty.shape[1] != c:
        raise ConversionError(f"ty has {ty.shape[1]} classes, ally has {c}")
    if len(test_idx) != tx.shape[0]:
        raise ConversionError(
            f"test.index has {len(test_idx)} entries for {tx.shape[0]} tx rows")

    base = allx.shape[0]
    if ally.shape[0] != base:
        raise ConversionError("ally row count does not match allx")
    if len(test_idx) == 0 or int(test_idx.min()) < base:
        raise ConversionError("test ids must lie after the allx block")

    n = int(test_idx.max()) + 1
    features = np.zeros((n, d))
    features[:base] = allx.toarray()
    features[test_idx] = tx.toarray()
    onehot = np.zeros((n, c))
    onehot[:base] = ally
    onehot[test_idx] = ty

    notes = []
    unlabeled = int(np.sum(onehot.sum(axis=1) == 0))
    if unlabeled:
        notes.append(f"{unlabeled} test-range node(s) without upstream rows "
                     "kept with zero features and label 0")
    labels = onehot.argmax(axis=1).astype(np.int64)
    return features, labels, notes


def _assemble_adjacency(graph, num_nodes):
    """Symmetrized, deduplicated 0/1 adjacency; self-loops dropped."""
    if not isinstance(graph, dict):
        raise ConversionError("graph part must be a node -> neighbors dict")
    rows, cols = [], []
    for u, vs in graph.items():
        for v in vs:
            rows.append(u)
            cols.append(v)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    ids = [int(k) for k in graph]
    hi = max(max(ids, default=-1),
             int(rows.max(initial=-1)), int(cols.max(initial=-1)))
    lo = min(min(ids, default=0), int(rows.min(initial=0)), int(cols.min(initial=0)))
    if lo < 0 or hi >= num_nodes:
        raise ConversionError(
            f"graph references node {hi if hi >= num_nodes else lo}, "
            f"expected ids in [0, {num_nodes})")

    notes = []
    loops = rows == cols
    if loops.any():
        notes.append(f"dropped {len(np.unique(rows[loops]))} self-loop(s)")
        rows, cols = rows[~loops], cols[~loops]
    a = sp.csr_array((np.ones(len(rows)), (rows, cols)),
                     shape=(num_nodes, num_nodes))
    a = sp.csr_array(((a + a.T) > 0).astype(np.float64))
    return a, notes


def _check_reference(dataset_name, num_nodes, num_edges, num_features, num_classes):
    """Hard-fail on node/feature/class mismatches; edge deviations are notes."""
    ref = REFERENCE_STATS.get(dataset_name.lower())
    if ref is None:
        return []
    diffs = []
    for key, got in (("nodes", num_nodes), ("features", num_features),
                     ("classes", num_classes)):
        if got != ref[key]:
            diffs.append(f"  {key}: expected {ref[key]}, got {got}")
    if diffs:
        raise ConversionError(
            f"converted counts do not match the published statistics for "
            f"{dataset_name}:\n" + "\n".join(diffs))
    if num_edges != ref["edges"]:
        return [f"edge count {num_edges} (unique undirected pairs) vs published "
                f"{ref['edges']}; upstream counting conventions differ"]
    return []


def convert(dataset_name: str, source_dir, out_dir) -> ConversionManifest:
    """Convert one upstream release into a bundle directory.

    Deterministic: re-running over the same sources rewrites byte-identical
    files. Known dataset names are checked against their published node,
    feature, and class counts and a mismatch aborts with a diff.
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    raw, test_idx, paths = _read_sources(dataset_name, source_dir)
    features, labels, notes = _assemble_nodes(raw, test_idx)
    adjacency, adj_notes = _assemble_adjacency(raw["graph"], len(features))
    notes += adj_notes

    num_edges = int(adjacency.nnz) // 2
    num_classes = int(np.asarray(raw["ally"]).shape[1])
    notes += _check_reference(dataset_name, len(features), num_edges,
                              features.shape[1], num_classes)

    bundle = GraphBundle(
        num_nodes=len(features),
        num_classes=num_classes,
        adjacency=SparseMatrixCsr.from_scipy(adjacency),
        features=features,
        labels=labels,
        name=dataset_name,
    )
    save_bundle(bundle, out_dir)
    return ConversionManifest(
        dataset=dataset_name,
        source_files=[str(p) for p in paths],
        emitted_files=[str(out_dir / f) for f in EMITTED],
        num_nodes=bundle.num_nodes,
        num_edges=num_edges,
        num_features=bundle.feature_dim,
        num_classes=bundle.num_classes,
        notes=notes,
    )
