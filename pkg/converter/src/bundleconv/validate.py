"""Standalone bundle directory validation.

Checks are collected rather than raised so a broken bundle reports every
problem at once: file presence, meta schema, edge canonicalization (each
undirected pair stored once as u < v, no self-loops, endpoints in range),
feature/label shapes, label range, and split id sanity. As a final step the
consumer's own loader is invoked, so anything this checklist misses still
surfaces as a violation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lyapctl.dataset import load_bundle
from lyapctl.errors import ValidationError

REQUIRED = ("meta.json", "edges.tsv", "features.tsv", "labels.tsv")
META_KEYS = ("num_nodes", "num_classes", "feature_dim")


@dataclass
class ValidationReport:
    path: str
    manifest: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def render(self) -> str:
        m = self.manifest
        head = f"bundle {self.path}"
        if m:
            head += (f": {m.get('num_nodes', '?')} nodes, "
                     f"{m.get('num_edges', '?')} edges, "
                     f"{m.get('feature_dim', '?')} features, "
                     f"{m.get('num_classes', '?')} classes")
        if self.ok:
            return head + "\nOK"
        return "\n".join([head] + [f"violation: {v}" for v in self.violations])

    def __str__(self) -> str:
        return self.render()


def _check_edges(text, n, violations):
    tokens = text.split()
    if len(tokens) % 2:
        violations.append("edges.tsv must contain u/v pairs")
        return 0
    try:
        pairs = np.asarray(tokens, dtype=np.int64).reshape(-1, 2)
    except ValueError:
        violations.append("edges.tsv contains a non-integer endpoint")
        return 0
    if len(pairs) == 0:
        return 0
    if n is not None and (pairs.min() < 0 or pairs.max() >= n):
        violations.append(f"edge endpoint out of range [0, {n})")
    loops = pairs[:, 0] == pairs[:, 1]
    for u in pairs[loops, 0][:5]:
        violations.append(f"self-loop on node {u}")
    swapped = pairs[:, 0] > pairs[:, 1]
    for u, v in pairs[swapped][:5]:
        violations.append(f"edge ({u}, {v}) not stored in u < v order")
    canon = np.sort(pairs, axis=1)
    uniq, counts = np.unique(canon, axis=0, return_counts=True)
    for (u, v), k in zip(uniq[counts > 1][:5], counts[counts > 1][:5]):
        violations.append(f"undirected pair ({u}, {v}) stored {k} times")
    return len(uniq[uniq[:, 0] != uniq[:, 1]])


def validate_bundle(path) -> ValidationReport:
    """Inspect a bundle directory and list every violation found."""
    root = Path(path)
    report = ValidationReport(path=str(root))
    violations = report.violations
    if not root.is_dir():
        violations.append(f"not a directory: {root}")
        return report
    for fname in REQUIRED:
        if not (root / fname).is_file():
            violations.append(f"missing {fname}")

    n = d = c = None
    if (root / "meta.json").is_file():
        try:
            meta = json.loads((root / "meta.json").read_text())
        except json.JSONDecodeError as exc:
            violations.append(f"meta.json does not parse: {exc}")
            meta = {}
        for key in META_KEYS:
            if key not in meta:
                violations.append(f"meta.json missing key {key!r}")
        report.manifest.update({k: meta[k] for k in meta if k != "name"})
        if "name" in meta:
            report.manifest["name"] = meta["name"]
        n = meta.get("num_nodes")
        d = meta.get("feature_dim")
        c = meta.get("num_classes")

    if (root / "edges.tsv").is_file():
        n_edges = _check_edges((root / "edges.tsv").read_text(), n, violations)
        report.manifest["num_edges"] = n_edges

    if (root / "features.tsv").is_file() and n is not None:
        try:
            feats = np.loadtxt(root / "features.tsv", dtype=np.float64, ndmin=2)
            if feats.shape != (n, d):
                violations.append(
                    f"features.tsv shape {feats.shape} does not match meta ({n}, {d})")
        except ValueError as exc:
            violations.append(f"features.tsv does not parse: {exc}")

    if (root / "labels.tsv").is_file() and n is not None:
        try:
            labels = np.loadtxt(root / "labels.tsv", dtype=np.int64, ndmin=1)
            if labels.shape != (n,):
                violations.append(
                    f"labels.tsv has {labels.shape[0]} rows, meta says {n}")
            elif len(labels) and (labels.min() < 0 or labels.max() >= c):
                violations.append(
                    f"label {labels.min() if labels.min() < 0 else labels.max()} "
                    f"outside [0, {c})")
        except ValueError as exc:
            violations.append(f"labels.tsv does not parse: {exc}")

    if (root / "splits.json").is_file() and n is not None:
        try:
            raw = json.loads((root / "splits.json").read_text())
            seen = {}
            for key in ("train", "val", "test"):
                ids = np.asarray(raw.get(key, []), dtype=np.int64)
                if len(ids) and (ids.min() < 0 or ids.max() >= n):
                    violations.append(f"splits.json {key} id out of range")
                seen[key] = set(ids.tolist())
            for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
                if seen[a] & seen[b]:
                    violations.append(f"splits.json {a} and {b} overlap")
        except (json.JSONDecodeError, ValueError) as exc:
            violations.append(f"splits.json does not parse: {exc}")

    # the consumer's loader is the final arbiter of compatibility
    try:
        load_bundle(root)
    except ValidationError as exc:
        msg = f"consumer loader rejects the bundle: {exc}"
        if not violations:
            violations.append(msg)
        elif all(str(exc) not in v for v in violations):
            violations.append(msg)
    return report
