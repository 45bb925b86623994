"""Fixed base model: K-step propagation plus a linear softmax classifier.

Also extracts the per-node affine system ("plant") that a feature controller
acts on: with every other node's features frozen, node i's prediction is
softmax(gain * (z @ W) + offset) as a function of its own feature z.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import GraphBundle, normalize_adjacency
from .errors import ValidationError
from .numerics import matrix_from_fragment, matrix_to_fragment, softmax, spmm


@dataclass
class SgcModel:
    """Trained classifier over the cached propagated features."""

    k_steps: int
    propagated: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    graph_hash: str = ""
    history: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.propagated = np.ascontiguousarray(self.propagated, dtype=np.float64)
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.k_steps < 0:
            raise ValidationError("k_steps must be nonnegative")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValidationError("weight/bias shapes inconsistent")
        if self.propagated.shape[1] != self.weight.shape[0]:
            raise ValidationError("propagated width does not match weight rows")
        for a in (self.propagated, self.weight, self.bias):
            if not np.all(np.isfinite(a)):
                raise ValidationError("model parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass
class NodeAffineSystem:
    """Node i's prediction as an affine-then-softmax map of its own feature."""

    node_id: int
    gain: float
    offset: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not (0.0 < self.gain <= 1.0 + 1e-12):
            raise ValidationError(f"gain {self.gain} outside (0, 1]")
        if self.offset.shape != (self.weight.shape[1],):
            raise ValidationError("offset length does not match weight columns")
        if not np.all(np.isfinite(self.offset)):
            raise ValidationError("offset must be finite")

    def logits(self, z: np.ndarray) -> np.ndarray:
        return self.gain * (np.asarray(z, dtype=np.float64) @ self.weight) + self.offset

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(z))


@dataclass
class SgcTrainConfig:
    lr: float = 0.001
    max_epochs: int = 1000
    patience: int = 50
    k_steps: int = 3  # recorded on the model; propagation happens upstream
    val_mask: np.ndarray = None


def propagate(g: GraphBundle, k: int) -> np.ndarray:
    """Return Ŝ^k · X by repeated sparse multiplication."""
    if k < 0:
        raise ValidationError("k must be nonnegative")
    s_hat = normalize_adjacency(g.adjacency)
    x = g.features
    for _ in range(k):
        x = spmm(s_hat, x)
    return x


def bundle_hash(g: GraphBundle) -> str:
    """Content hash binding a checkpoint to the graph it was trained on."""
    h = hashlib.sha256()
    a = g.adjacency
    for arr in (a.row_ptr, a.col_idx, a.values, g.features, g.labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + 1e-300)))


def train_sgc(propagated: np.ndarray, labels: np.ndarray, train_mask: np.ndarray,
              cfg: SgcTrainConfig = None) -> SgcModel:
    """Full-batch Adam on softmax cross-entropy over the training rows.

    Early stopping tracks validation accuracy with the configured patience and
    restores the best weights. Zero initialization makes the run fully
    deterministic (the objective is convex, no symmetry to break).
    """
    cfg = cfg or SgcTrainConfig()
    propagated = np.ascontiguousarray(propagated, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_mask = np.asarray(train_mask, dtype=bool)
    if not train_mask.any():
        raise ValidationError("empty training mask")

    x_tr = propagated[train_mask]
    y_tr = labels[train_mask]
    num_classes = int(labels.max()) + 1
    d = propagated.shape[1]

    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b, v_b = np.zeros_like(b), np.zeros_like(b)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8

    val_mask = cfg.val_mask
    use_val = val_mask is not None and np.asarray(val_mask).any()
    if use_val:
        val_mask = np.asarray(val_mask, dtype=bool)
        x_val, y_val = propagated[val_mask], labels[val_mask]

    history = {"loss": [], "val_acc": []}
    best = (-1.0, 0, w.copy(), b.copy())  # (val_acc, epoch, weights)
    since_best = 0

    for epoch in range(cfg.max_epochs):
        logits = x_tr @ w + b
        probs = softmax(logits)
        history["loss"].append(_cross_entropy(probs, y_tr))

        g_logits = probs.copy()
        g_logits[np.arange(len(y_tr)), y_tr] -= 1.0
        g_logits /= len(y_tr)
        g_w = x_tr.T @ g_logits
        g_b = g_logits.sum(axis=0)

        t = epoch + 1
        for p, gr, m, v in ((w, g_w, m_w, v_w), (b, g_b, m_b, v_b)):
            m += (1 - beta1) * (gr - m)
            v += (1 - beta2) * (gr * gr - v)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p -= cfg.lr * m_hat / (np.sqrt(v_hat) + eps_adam)

        if use_val:
            val_acc = float(np.mean((x_val @ w + b).argmax(axis=1) == y_val))
            history["val_acc"].append(val_acc)
            if val_acc > best[0]:
                best = (val_acc, epoch, w.copy(), b.copy())
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break

    if use_val and best[0] >= 0:
        w, b = best[2], best[3]
        history["best_epoch"] = best[1]

    return SgcModel(k_steps=cfg.k_steps, propagated=propagated, weight=w, bias=b,
                    history=history)


def predict(model: SgcModel, rows=None) -> np.ndarray:
    """Softmax class probabilities for the given node ids (default: all)."""
    feats = model.propagated if rows is None else model.propagated[np.asarray(rows)]
    return softmax(feats @ model.weight + model.bias)


def extract_node_plant(model: SgcModel, g: GraphBundle, node_id: int) -> NodeAffineSystem:
    """Freeze all other features and expose node_id's prediction map.

    gain = (Ŝ^K)ᵢᵢ is computed by propagating a one-hot indicator column
    (Ŝ is symmetric), so Ŝ^K is never materialized. The offset collects the
    frozen neighbor contributions: (Ŝ^K X)ᵢ = gain·xᵢ + Σ_{j≠i}(Ŝ^K)ᵢⱼ xⱼ.
    """
    n = g.num_nodes
    if not (0 <= node_id < n):
        raise ValidationError(f"node_id {node_id} out of range")
    if g.features.shape[1] != model.weight.shape[0]:
        raise ValidationError("bundle features do not match model input width")

    s_hat = normalize_adjacency(g.adjacency)
    col = np.zeros((n, 1))
    col[node_id, 0] = 1.0
    for _ in range(model.k_steps):
        col = spmm(s_hat, col)
    gain = float(col[node_id, 0])

    neighbor_part = model.propagated[node_id] - gain * g.features[node_id]
    offset = neighbor_part @ model.weight + model.bias
    return NodeAffineSystem(node_id=node_id, gain=gain, offset=offset,
                            weight=model.weight)


def save_sgc(model: SgcModel, path) -> None:
    payload = {
        "k_steps": model.k_steps,
        "weight": matrix_to_fragment(model.weight),
        "bias": model.bias.tolist(),
        "graph_hash": model.graph_hash,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_sgc(path, propagated: np.ndarray, expected_hash: str = None) -> SgcModel:
    """Load a checkpoint against a freshly computed propagated cache."""
    try:
        payload = json.loads(Path(path).read_text())
        model = SgcModel(
            k_steps=int(payload["k_steps"]),
            propagated=propagated,
            weight=matrix_from_fragment(payload["weight"]),
            bias=np.asarray(payload["bias"], dtype=np.float64),
            graph_hash=str(payload["graph_hash"]),
        )
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt checkpoint {path}: {exc}") from exc
    if expected_hash is not None and model.graph_hash != expected_hash:
        raise ValidationError("checkpoint graph_hash does not match the prepared graph")
    return model
