"""Certified test-time feature reconstruction for graph neural networks.

A fixed graph classifier is viewed as a discrete-time control system over one
node's prediction; a neural controller and a neural Lyapunov candidate are
trained together under counterexample guidance until a branch-and-bound
verifier certifies stability, and the controller's output at the target
one-hot becomes the replacement feature for that class.
"""

from .cegis import CegisConfig, CegisState, cegis_loop, init_training_set
from .dataset import GraphBundle, SplitSpec, biased_split, load_bundle, synth_graph
from .errors import (DivergenceError, InconclusiveError, LyapctlError,
                     ValidationError)
from .neuralnet import ClosedLoop, Mlp, closed_loop_step, delta_v, lyapunov_loss
from .reconstruct import class_representative, replace_and_predict
from .sgc import NodeAffineSystem, SgcModel, extract_node_plant, predict, train_sgc
from .verifier import Box, Counterexample, VerifierOutcome, branch_and_bound

__version__ = "0.1.0"

__all__ = [
    "Box", "CegisConfig", "CegisState", "ClosedLoop", "Counterexample",
    "DivergenceError", "GraphBundle", "InconclusiveError", "LyapctlError",
    "Mlp", "NodeAffineSystem", "SgcModel", "SplitSpec", "ValidationError",
    "VerifierOutcome", "biased_split", "branch_and_bound", "cegis_loop",
    "class_representative", "closed_loop_step", "delta_v", "extract_node_plant",
    "init_training_set", "load_bundle", "lyapunov_loss", "predict",
    "replace_and_predict", "synth_graph", "train_sgc",
]
