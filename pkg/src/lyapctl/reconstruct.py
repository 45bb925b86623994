"""Test-time feature replacement and evaluation.

Once the controller is trained, the class representative h* is its output at
the one-hot target; labeled training nodes of the class get their features
replaced by h*, propagation is recomputed, and test accuracy is compared
before/after.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import GraphBundle
from .errors import ValidationError
from .neuralnet import Mlp, mlp_forward
from .numerics import softmax
from .sgc import NodeAffineSystem, SgcModel, propagate


@dataclass
class EvalReport:
    accuracy_before: float
    accuracy_after: float
    class_id: int = -1
    n_replaced: int = 0
    per_seed: list = field(default_factory=list)
    mean: dict = None
    std: dict = None

    def __post_init__(self):
        for a in (self.accuracy_before, self.accuracy_after):
            if not (0.0 <= a <= 1.0):
                raise ValidationError("accuracy outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "class_id": self.class_id,
            "n_replaced": self.n_replaced,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
        }


def class_representative(controller: Mlp, class_id: int, num_classes: int) -> np.ndarray:
    """h* = controller(one-hot(class_id)); one forward pass, no iteration."""
    if not (0 <= class_id < num_classes):
        raise ValidationError(f"class_id {class_id} out of range")
    y = np.zeros(num_classes)
    y[class_id] = 1.0
    out, _ = mlp_forward(controller, y)
    return out


def replace_and_predict(g: GraphBundle, model: SgcModel, h_star: np.ndarray,
                        class_id: int, only_nodes=None) -> np.ndarray:
    """Swap in h* for the labeled training nodes of the class and re-predict.

    only_nodes restricts the replacement to a subset of those nodes (used to
    report the single-node variant). Propagation is recomputed from scratch,
    so untouched components keep bitwise-identical predictions.
    """
    h_star = np.asarray(h_star, dtype=np.float64)
    if h_star.shape != (g.features.shape[1],):
        raise ValidationError("h_star does not match the feature width")
    mask = g.train_mask & (g.labels == class_id)
    if only_nodes is not None:
        sub = np.zeros(g.num_nodes, dtype=bool)
        sub[np.asarray(only_nodes, dtype=np.int64)] = True
        mask = mask & sub
    if not mask.any():
        warnings.warn(f"no labeled training nodes of class {class_id}; "
                      "predictions unchanged")
        feats = g.features
    else:
        feats = g.features.copy()
        feats[mask] = h_star
    modified = GraphBundle(
        num_nodes=g.num_nodes, num_classes=g.num_classes, adjacency=g.adjacency,
        features=feats, labels=g.labels, train_mask=g.train_mask,
        val_mask=g.val_mask, test_mask=g.test_mask, name=g.name,
    )
    prop = propagate(modified, model.k_steps)
    return softmax(prop @ model.weight + model.bias)


def check_representative(model: SgcModel, plant: NodeAffineSystem,
                         h_star: np.ndarray, class_id: int, eps: float) -> bool:
    """True iff the plant's prediction at h* is within eps (l2) of the one-hot."""
    if not (0 <= class_id < model.num_classes):
        raise ValidationError(f"class_id {class_id} out of range")
    target = np.zeros(model.num_classes)
    target[class_id] = 1.0
    pred = plant.predict_proba(np.asarray(h_star, dtype=np.float64))
    return bool(np.linalg.norm(pred - target) <= eps)


def accuracy(predictions: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Argmax accuracy over masked rows; ties break to the lowest class index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("empty evaluation mask")
    return float(np.mean(predictions[mask].argmax(axis=1) == labels[mask]))


def evaluate(g: GraphBundle, predictions_before: np.ndarray,
             predictions_after: np.ndarray) -> EvalReport:
    """Test-mask accuracy before/after replacement (aggregation happens upstream)."""
    for p in (predictions_before, predictions_after):
        if p.shape != (g.num_nodes, g.num_classes):
            raise ValidationError("prediction matrix shape mismatch")
    return EvalReport(
        accuracy_before=accuracy(predictions_before, g.labels, g.test_mask),
        accuracy_after=accuracy(predictions_after, g.labels, g.test_mask),
    )


def export_embeddings(g: GraphBundle, model: SgcModel, path) -> None:
    """CSV of propagated embeddings: node_id, split, label, then one column per dim."""
    d = model.propagated.shape[1]
    split_names = np.full(g.num_nodes, "none", dtype=object)
    split_names[g.train_mask] = "train"
    split_names[g.val_mask] = "val"
    split_names[g.test_mask] = "test"
    header = "node_id,split,label," + ",".join(f"e{j}" for j in range(d))
    with open(Path(path), "w") as fh:
        fh.write(header + "\n")
        for i in range(g.num_nodes):
            row = ",".join(f"{v:.17g}" for v in model.propagated[i])
            fh.write(f"{i},{split_names[i]},{g.labels[i]},{row}\n")
