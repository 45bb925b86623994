"""Counterexample-guided training of the controller and Lyapunov candidate.

Each round trains both networks on the accumulated state set, then searches
for violations (cheap gradient falsifier first, branch-and-bound second) and
feeds any found states back into the training set. Terminates when the
verifier certifies or the round budget runs out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import GraphBundle
from .errors import DivergenceError, InconclusiveError, ValidationError
from .neuralnet import (AdamState, ClosedLoop, adam_step, lyapunov_loss,
                        mlp_init, mlp_params)
from .numerics import spectral_norm
from .sgc import SgcModel, extract_node_plant, predict
from .verifier import branch_and_bound, falsify_gradient, unit_box


@dataclass
class CegisConfig:
    max_rounds: int = 50
    epochs_per_round: int = 500
    lr: float = 0.001
    eps: float = 0.1
    delta: float = 1e-3
    lambda_eq: float = 1.0
    seed: int = 0
    loss_stop: float = 1e-6
    n_aug: int = 64
    hidden: int = 16
    falsify_restarts: int = 16
    falsify_steps: int = 60
    max_ce: int = 32
    max_boxes: int = 2_000_000
    threads: int = None

    def __post_init__(self):
        if self.max_rounds < 0 or self.epochs_per_round < 0 or self.n_aug < 0:
            raise ValidationError("budgets must be nonnegative")
        if self.eps <= 0 or self.delta <= 0 or self.lr <= 0:
            raise ValidationError("eps, delta, and lr must be positive")


@dataclass
class CegisState:
    """Accumulated training states plus optimizer state carried across rounds."""

    training_states: np.ndarray
    round: int = 0
    history: list = field(default_factory=list)
    adam_theta: AdamState = None
    adam_phi: AdamState = None

    def append_state(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        """Add a state unless an existing one matches within tol (l-inf)."""
        x = np.asarray(x, dtype=np.float64)
        if len(self.training_states):
            if np.min(np.max(np.abs(self.training_states - x), axis=1)) <= tol:
                return False
        self.training_states = np.vstack([self.training_states, x])
        return True


def init_training_set(model: SgcModel, g: GraphBundle, node_id: int,
                      class_id: int, cfg: CegisConfig):
    """Build the closed loop for one node and seed its training states.

    The state set starts from the node's current prediction plus n_aug
    uniform draws from the domain box (n_aug=0 keeps just the prediction).
    """
    if not (0 <= class_id < model.num_classes):
        raise ValidationError(f"class_id {class_id} out of range")
    if g.labels[node_id] != class_id:
        raise ValidationError(
            f"node {node_id} has label {g.labels[node_id]}, expected {class_id}")

    plant = extract_node_plant(model, g, node_id)
    c = model.num_classes
    feat_dim = model.weight.shape[0]
    controller = mlp_init([c, cfg.hidden, feat_dim], [cfg.seed, 1])
    lyapunov = mlp_init([c, cfg.hidden, 1], [cfg.seed, 2])
    equilibrium = np.zeros(c)
    equilibrium[class_id] = 1.0
    cl = ClosedLoop(controller=controller, plant=plant, lyapunov=lyapunov,
                    equilibrium=equilibrium)

    states = [predict(model, [node_id])[0]]
    if cfg.n_aug:
        rng = np.random.default_rng([cfg.seed, 3])
        states.append(rng.uniform(0.0, 1.0, size=(cfg.n_aug, c)))
    state = CegisState(training_states=np.vstack(states))
    return cl, state


def train_round(cl: ClosedLoop, state: CegisState, cfg: CegisConfig) -> float:
    """Full-batch Adam on the Lyapunov loss; returns the last loss value.

    Optimizer moments persist across rounds via CegisState. Stops early once
    the loss drops below cfg.loss_stop.
    """
    if not len(state.training_states):
        raise ValidationError("training state set is empty")
    if state.adam_theta is None:
        state.adam_theta = AdamState(lr=cfg.lr)
        state.adam_phi = AdamState(lr=cfg.lr)

    theta = mlp_params(cl.controller)
    phi = mlp_params(cl.lyapunov)
    loss = float("nan")
    for epoch in range(cfg.epochs_per_round):
        loss, g_theta, g_phi = lyapunov_loss(cl, state.training_states, cfg.lambda_eq)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite training loss",
                                  round_index=state.round, epoch=epoch, loss=loss)
        if loss < cfg.loss_stop:
            break
        adam_step(state.adam_theta, theta, [a for lay in g_theta for a in lay])
        adam_step(state.adam_phi, phi, [a for lay in g_phi for a in lay])
    if cfg.epochs_per_round:
        loss, _, _ = lyapunov_loss(cl, state.training_states, cfg.lambda_eq)
    return float(loss)


def cegis_loop(cl: ClosedLoop, state: CegisState, cfg: CegisConfig):
    """Alternate train / falsify / certify until certified or out of rounds.

    Returns (certified, report) where report carries one entry per round:
    {round, loss, n_counterexamples, verdict, wall_time_ms}.
    """
    domain = unit_box(cl.num_classes)
    rounds = []
    certified = False

    for r in range(cfg.max_rounds):
        t0 = time.perf_counter()
        loss = train_round(cl, state, cfg)

        ces = []
        ce = falsify_gradient(cl, domain, cfg.eps, restarts=cfg.falsify_restarts,
                              steps=cfg.falsify_steps, seed=[cfg.seed, 101, r])
        if ce is not None:
            verdict = "violations"
            ces = [ce]
        else:
            try:
                outcome = branch_and_bound(cl, domain, cfg.eps, cfg.delta,
                                           max_ce=cfg.max_ce, max_boxes=cfg.max_boxes,
                                           threads=cfg.threads)
                verdict = outcome.verdict
                ces = outcome.counterexamples
            except InconclusiveError as exc:
                verdict = "inconclusive"
                ces = list(exc.counterexamples)

        for ce_item in ces:
            state.append_state(ce_item.state)

        entry = {
            "round": r,
            "loss": loss,
            "n_counterexamples": len(ces),
            "verdict": verdict,
            "wall_time_ms": (time.perf_counter() - t0) * 1000.0,
        }
        state.history.append(entry)
        state.round = r + 1
        rounds.append(entry)
        if verdict == "certified":
            certified = True
            break

    report = {
        "certified": certified,
        "eps": cfg.eps,
        "delta": cfg.delta,
        "n_training_states": int(len(state.training_states)),
        "rounds": rounds,
    }
    return certified, report


def lipschitz_certificate(cl: ClosedLoop) -> float:
    """Upper bound on the Lipschitz constant of the state -> plant-logits map.

    Product of layer spectral norms (rectifiers are 1-Lipschitz) times the
    plant gain and classifier norm; the trailing softmax only contracts.
    """
    bound = cl.plant.gain
    for w, _ in cl.controller.layers:
        bound *= spectral_norm(w)
    return float(bound * spectral_norm(cl.plant.weight))
