"""Shared fixtures: a desk-scale SBM pipeline and one certified closed loop.

The certified fixture is expensive (~15s) and session-scoped; acceptance
tests and a few unit tests share it. Everything is seeded, so repeated
sessions build the identical object.
"""

import dataclasses
import time
from types import SimpleNamespace

import numpy as np
import pytest

from lyapctl.cegis import CegisConfig, cegis_loop, init_training_set
from lyapctl.dataset import SplitSpec, biased_split, reduce_features, synth_graph
from lyapctl.neuralnet import ClosedLoop, mlp_init
from lyapctl.sgc import (
    NodeAffineSystem,
    SgcTrainConfig,
    extract_node_plant,
    propagate,
    train_sgc,
)

# Pinned desk-scale run: SBM 2 blocks x 20 nodes, class 0, eps=0.1, delta=1e-2.
FIXTURE_K_STEPS = 3
FIXTURE_PCA_DIM = 8
FIXTURE_SPLIT = SplitSpec(per_class_train=5, val_total=10, test_total=20, bias_seed=0)
FIXTURE_CFG = CegisConfig(
    eps=0.1,
    delta=1e-2,
    lambda_eq=1.0,
    seed=0,
    epochs_per_round=80000,
    loss_stop=1e-8,
    n_aug=64,
    hidden=16,
    max_rounds=50,
)


def build_sbm_pipeline():
    g0 = synth_graph(blocks=2, nodes_per_block=20, p_in=0.5, p_out=0.05,
                     feature_dim=16, seed=0)
    g_red, pca = reduce_features(g0, FIXTURE_PCA_DIM)
    sp = biased_split(g_red, FIXTURE_SPLIT)
    g = dataclasses.replace(g_red, train_mask=sp.train, val_mask=sp.val,
                            test_mask=sp.test)
    prop = propagate(g, FIXTURE_K_STEPS)
    model = train_sgc(prop, g.labels, g.train_mask,
                      SgcTrainConfig(k_steps=FIXTURE_K_STEPS, val_mask=g.val_mask))
    return SimpleNamespace(g0=g0, g=g, pca=pca, prop=prop, model=model)


def pick_class_node(g, class_id, seed):
    rng = np.random.default_rng([seed, 11])
    cand = np.flatnonzero(g.train_mask & (g.labels == class_id))
    return int(cand[rng.integers(len(cand))])


@pytest.fixture(scope="session")
def sbm():
    return build_sbm_pipeline()


@pytest.fixture(scope="session")
def certified(sbm):
    """CEGIS run to certification on one class-0 train node."""
    node_id = pick_class_node(sbm.g, 0, FIXTURE_CFG.seed)
    plant = extract_node_plant(sbm.model, sbm.g, node_id)
    cl, state = init_training_set(sbm.model, sbm.g, node_id, 0, FIXTURE_CFG)
    t0 = time.perf_counter()
    ok, report = cegis_loop(cl, state, FIXTURE_CFG)
    wall_s = time.perf_counter() - t0
    return SimpleNamespace(cl=cl, state=state, certified=ok, report=report,
                           node_id=node_id, plant=plant, model=sbm.model,
                           g=sbm.g, wall_s=wall_s, cfg=FIXTURE_CFG)


def random_plant(rng, c, feat, gain=None):
    gain = float(rng.uniform(0.05, 1.0)) if gain is None else gain
    return NodeAffineSystem(node_id=0, gain=gain,
                            offset=rng.normal(size=c),
                            weight=rng.normal(size=(feat, c)))


def random_loop(seed, c=3, hidden=8, feat=5, class_id=0):
    rng = np.random.default_rng(seed)
    eq = np.zeros(c)
    eq[class_id] = 1.0
    return ClosedLoop(controller=mlp_init([c, hidden, feat], [seed, 1]),
                      plant=random_plant(rng, c, feat),
                      lyapunov=mlp_init([c, hidden, 1], [seed, 2]),
                      equilibrium=eq)


@pytest.fixture
def loop_factory():
    return random_loop
