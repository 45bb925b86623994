"""Pipeline driver.

Commands: synth, prepare, train-gnn, cegis, verify, eval, export-embeddings.
Configuration is a flat key=value file plus CLI flag overrides; every command
is deterministic given (config, seeds) in single-threaded mode. Exit codes:
0 success, 2 input/validation error, 3 certification not achieved.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cegis import CegisConfig, cegis_loop, init_training_set
from .dataset import (GraphBundle, SplitSpec, biased_split, load_bundle,
                      reduce_features, save_bundle, synth_graph, write_splits)
from .errors import InconclusiveError, LyapctlError, ValidationError
from .neuralnet import ClosedLoop, load_mlp, save_mlp
from .reconstruct import (EvalReport, accuracy, class_representative,
                          export_embeddings, replace_and_predict)
from .sgc import (SgcTrainConfig, bundle_hash, extract_node_plant, load_sgc,
                  predict, propagate, save_sgc, train_sgc)
from .verifier import branch_and_bound, unit_box

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CERTIFIED = 3

RUN_META = "run_meta.json"
FEATURES_REDUCED = "features_reduced.npy"
PCA_MODEL = "pca.json"
SPLITS = "splits.json"
PROPAGATED = "propagated.npy"
SGC_CKPT = "sgc.json"
TRAIN_METRICS = "train_metrics.json"
CONTROLLER_CKPT = "controller.json"
LYAPUNOV_CKPT = "lyapunov.json"
CEGIS_REPORT = "cegis_report.json"
VERIFIER_REPORT = "verifier_report.json"
RESULTS = "results.json"
EMBEDDINGS = "embeddings.csv"


@dataclass
class RunConfig:
    dataset: str = ""
    run_dir: str = "run"
    pca_dim: int = 20
    k_steps: int = 3
    hidden: int = 16
    lr: float = 0.001
    eps: float = 0.1
    delta: float = 1e-3
    lambda_eq: float = 1.0
    n_aug: int = 64
    max_rounds: int = 50
    epochs_per_round: int = 500
    loss_stop: float = 1e-6
    seeds: list = field(default_factory=lambda: list(range(10)))
    class_id: int = 0
    node_id: int = None
    per_class_train: int = 20
    val_total: int = 500
    test_total: int = 1000
    ppr_teleport: float = 0.15
    max_ce: int = 32
    max_boxes: int = 2_000_000
    parallel_seeds: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seeds must be nonempty")
        for name in ("pca_dim", "k_steps", "hidden", "per_class_train"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        for name in ("lr", "eps", "delta"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")

    def cegis_config(self, seed: int) -> CegisConfig:
        return CegisConfig(
            max_rounds=self.max_rounds, epochs_per_round=self.epochs_per_round,
            lr=self.lr, eps=self.eps, delta=self.delta, lambda_eq=self.lambda_eq,
            seed=seed, loss_stop=self.loss_stop, n_aug=self.n_aug,
            hidden=self.hidden, max_ce=self.max_ce, max_boxes=self.max_boxes,
        )


def _parse_seeds(raw: str) -> list:
    return [int(s) for s in raw.replace(",", " ").split()]


_COERCE = {
    "dataset": str, "run_dir": str,
    "pca_dim": int, "k_steps": int, "hidden": int, "n_aug": int,
    "max_rounds": int, "epochs_per_round": int, "class_id": int,
    "per_class_train": int, "val_total": int, "test_total": int,
    "max_ce": int, "max_boxes": int,
    "lr": float, "eps": float, "delta": float, "lambda_eq": float,
    "loss_stop": float, "ppr_teleport": float,
    "seeds": _parse_seeds,
    "node_id": lambda raw: None if raw.lower() in ("", "none") else int(raw),
    "parallel_seeds": lambda raw: raw.lower() in ("1", "true", "yes", "on"),
}


def parse_config_file(path) -> dict:
    """Flat key = value format; '#' starts a comment; keys match RunConfig."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _COERCE:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _COERCE[key](raw)
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key, coerce in _COERCE.items():
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = coerce(raw) if isinstance(raw, str) else raw
    return RunConfig(**values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key in _COERCE:
        if key == "parallel_seeds":
            p.add_argument("--parallel-seeds", action="store_const", const=True,
                           dest="parallel_seeds", default=None,
                           help="fan seed runs out to worker processes")
        else:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def _load_run(cfg: RunConfig):
    """Rehydrate the prepared bundle (reduced features + splits) and its meta."""
    run = Path(cfg.run_dir)
    for name in (RUN_META, FEATURES_REDUCED, SPLITS, PROPAGATED):
        if not (run / name).is_file():
            raise ValidationError(f"missing {run / name}; run 'prepare' first")
    meta = json.loads((run / RUN_META).read_text())
    original = load_bundle(meta["dataset"])
    features = np.load(run / FEATURES_REDUCED)
    raw_splits = json.loads((run / SPLITS).read_text())
    masks = {}
    for key, attr in (("train", "train_mask"), ("val", "val_mask"), ("test", "test_mask")):
        m = np.zeros(original.num_nodes, dtype=bool)
        m[np.asarray(raw_splits[key], dtype=np.int64)] = True
        masks[attr] = m
    g = GraphBundle(
        num_nodes=original.num_nodes, num_classes=original.num_classes,
        adjacency=original.adjacency, features=features, labels=original.labels,
        name=original.name, **masks,
    )
    if bundle_hash(g) != meta["graph_hash"]:
        raise ValidationError("run directory is stale: graph hash mismatch")
    return g, meta


def cmd_synth(args: argparse.Namespace) -> int:
    g = synth_graph(blocks=args.blocks, nodes_per_block=args.nodes_per_block,
                    p_in=args.p_in, p_out=args.p_out,
                    feature_dim=args.feature_dim, seed=args.seed)
    save_bundle(g, args.out)
    n_edges = g.adjacency.to_scipy().nnz // 2
    print(f"wrote {g.name}: {g.num_nodes} nodes, {n_edges} edges, "
          f"{g.feature_dim} features, {g.num_classes} classes -> {args.out}")
    return EXIT_OK


def cmd_prepare(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg.dataset)
    reduced, pca = reduce_features(bundle, cfg.pca_dim)
    splits = biased_split(reduced, SplitSpec(
        per_class_train=cfg.per_class_train, val_total=cfg.val_total,
        test_total=cfg.test_total, bias_seed=cfg.seeds[0],
        ppr_teleport=cfg.ppr_teleport))
    g = replace(reduced, train_mask=splits.train, val_mask=splits.val,
                test_mask=splits.test)
    prop = propagate(g, cfg.k_steps)

    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    np.save(run / FEATURES_REDUCED, g.features)
    np.save(run / PROPAGATED, prop)
    (run / PCA_MODEL).write_text(json.dumps(pca.to_json(), sort_keys=True) + "\n")
    write_splits(splits, run / SPLITS)
    meta = {
        "dataset": str(cfg.dataset),
        "name": bundle.name,
        "num_nodes": bundle.num_nodes,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "pca_dim": cfg.pca_dim,
        "k_steps": cfg.k_steps,
        "bias_seed": cfg.seeds[0],
        "graph_hash": bundle_hash(g),
    }
    (run / RUN_META).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"prepared {bundle.name}: {int(splits.train.sum())} train / "
          f"{int(splits.val.sum())} val / {int(splits.test.sum())} test -> {run}")
    return EXIT_OK


def cmd_train_gnn(cfg: RunConfig) -> int:
    g, meta = _load_run(cfg)
    prop = np.load(Path(cfg.run_dir) / PROPAGATED)
    val_mask = g.val_mask if g.val_mask.any() else None
    model = train_sgc(prop, g.labels, g.train_mask, SgcTrainConfig(
        lr=cfg.lr, k_steps=meta["k_steps"], val_mask=val_mask))
    model.graph_hash = meta["graph_hash"]
    save_sgc(model, Path(cfg.run_dir) / SGC_CKPT)

    preds = predict(model)
    metrics = {
        "train_acc": accuracy(preds, g.labels, g.train_mask),
        "val_acc": accuracy(preds, g.labels, g.val_mask) if g.val_mask.any() else None,
        "test_acc": accuracy(preds, g.labels, g.test_mask) if g.test_mask.any() else None,
        "epochs": len(model.history["loss"]),
        "best_epoch": model.history.get("best_epoch"),
    }
    (Path(cfg.run_dir) / TRAIN_METRICS).write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in metrics.items()}
    print(f"trained base model: {shown}")
    return EXIT_OK


def _pick_node(g: GraphBundle, class_id: int, seed: int) -> int:
    candidates = np.flatnonzero(g.train_mask & (g.labels == class_id))
    if len(candidates) == 0:
        raise ValidationError(f"no training nodes of class {class_id}")
    rng = np.random.default_rng([seed, 11])
    return int(candidates[rng.integers(len(candidates))])


def cmd_cegis(cfg: RunConfig) -> int:
    g, meta = _load_run(cfg)
    run = Path(cfg.run_dir)
    prop = np.load(run / PROPAGATED)
    model = load_sgc(run / SGC_CKPT, prop, expected_hash=meta["graph_hash"])
    node_id = cfg.node_id if cfg.node_id is not None else _pick_node(
        g, cfg.class_id, cfg.seeds[0])

    ccfg = cfg.cegis_config(cfg.seeds[0])
    cl, state = init_training_set(model, g, node_id, cfg.class_id, ccfg)
    certified, report = cegis_loop(cl, state, ccfg)

    save_mlp(cl.controller, run / CONTROLLER_CKPT)
    save_mlp(cl.lyapunov, run / LYAPUNOV_CKPT)
    report = {"node_id": node_id, "class_id": cfg.class_id, **report}
    (run / CEGIS_REPORT).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")

    n_rounds = len(report["rounds"])
    if certified:
        print(f"certified after {n_rounds} round(s) (node {node_id}, "
              f"class {cfg.class_id})")
        return EXIT_OK
    print(f"not certified within {n_rounds} round(s) (node {node_id}, "
          f"class {cfg.class_id})")
    return EXIT_NOT_CERTIFIED


def cmd_verify(cfg: RunConfig) -> int:
    g, meta = _load_run(cfg)
    run = Path(cfg.run_dir)
    for name in (SGC_CKPT, CONTROLLER_CKPT, LYAPUNOV_CKPT, CEGIS_REPORT):
        if not (run / name).is_file():
            raise ValidationError(f"missing {run / name}; run 'cegis' first")
    prop = np.load(run / PROPAGATED)
    model = load_sgc(run / SGC_CKPT, prop, expected_hash=meta["graph_hash"])
    controller = load_mlp(run / CONTROLLER_CKPT)
    lyapunov = load_mlp(run / LYAPUNOV_CKPT)
    prior = json.loads((run / CEGIS_REPORT).read_text())
    node_id = int(prior["node_id"])
    class_id = int(prior["class_id"])

    equilibrium = np.zeros(model.num_classes)
    equilibrium[class_id] = 1.0
    cl = ClosedLoop(controller=controller, plant=extract_node_plant(model, g, node_id),
                    lyapunov=lyapunov, equilibrium=equilibrium)
    try:
        outcome = branch_and_bound(cl, unit_box(model.num_classes), cfg.eps,
                                   cfg.delta, max_ce=cfg.max_ce,
                                   max_boxes=cfg.max_boxes)
        report = outcome.to_report()
        verdict = outcome.verdict
    except InconclusiveError as exc:
        verdict = "inconclusive"
        report = {
            "verdict": verdict, "delta": cfg.delta, "eps": cfg.eps,
            "boxes_processed": exc.boxes_processed,
            "remaining_boxes": exc.remaining_boxes,
            "counterexamples": [ce.to_json() for ce in exc.counterexamples],
        }
    (run / VERIFIER_REPORT).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"verdict: {verdict} ({report['boxes_processed']} boxes)")
    return EXIT_OK if verdict == "certified" else EXIT_NOT_CERTIFIED


def _eval_one_seed(g0: GraphBundle, cfg: RunConfig, seed: int) -> dict:
    """Full per-seed experiment: split, base training, synthesis, replacement."""
    splits = biased_split(g0, SplitSpec(
        per_class_train=cfg.per_class_train, val_total=cfg.val_total,
        test_total=cfg.test_total, bias_seed=seed, ppr_teleport=cfg.ppr_teleport))
    g = replace(g0, train_mask=splits.train, val_mask=splits.val,
                test_mask=splits.test)
    prop = propagate(g, cfg.k_steps)
    model = train_sgc(prop, g.labels, g.train_mask, SgcTrainConfig(
        lr=cfg.lr, k_steps=cfg.k_steps, val_mask=g.val_mask))

    preds_before = predict(model)
    node_id = cfg.node_id if cfg.node_id is not None else _pick_node(
        g, cfg.class_id, seed)
    ccfg = cfg.cegis_config(seed)
    cl, state = init_training_set(model, g, node_id, cfg.class_id, ccfg)
    certified, report = cegis_loop(cl, state, ccfg)

    h_star = class_representative(cl.controller, cfg.class_id, model.num_classes)
    preds_after = replace_and_predict(g, model, h_star, cfg.class_id)
    preds_single = replace_and_predict(g, model, h_star, cfg.class_id,
                                       only_nodes=[node_id])
    return {
        "seed": seed,
        "node_id": node_id,
        "certified": certified,
        "rounds": len(report["rounds"]),
        "accuracy_before": accuracy(preds_before, g.labels, g.test_mask),
        "accuracy_after": accuracy(preds_after, g.labels, g.test_mask),
        "accuracy_after_single": accuracy(preds_single, g.labels, g.test_mask),
        "n_replaced": int((g.train_mask & (g.labels == cfg.class_id)).sum()),
    }


def cmd_eval(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg.dataset)
    g0, _ = reduce_features(bundle, cfg.pca_dim)

    if cfg.parallel_seeds and len(cfg.seeds) > 1:
        with ProcessPoolExecutor() as pool:
            per_seed = list(pool.map(_eval_one_seed, [g0] * len(cfg.seeds),
                                     [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_eval_one_seed(g0, cfg, seed) for seed in cfg.seeds]

    def agg(key):
        vals = np.array([r[key] for r in per_seed], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    mean_b, std_b = agg("accuracy_before")
    mean_a, std_a = agg("accuracy_after")
    mean_s, std_s = agg("accuracy_after_single")
    report = EvalReport(
        accuracy_before=mean_b, accuracy_after=mean_a, class_id=cfg.class_id,
        n_replaced=per_seed[0]["n_replaced"], per_seed=per_seed,
        mean={"before": mean_b, "after": mean_a, "after_single": mean_s},
        std={"before": std_b, "after": std_a, "after_single": std_s},
    )
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / RESULTS).write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")

    n = len(cfg.seeds)
    print(f"test accuracy over {n} seed(s), class {cfg.class_id} "
          f"({report.n_replaced} features replaced):")
    print(f"  base                 {100 * mean_b:.2f} ± {100 * std_b:.2f}")
    print(f"  reconstructed        {100 * mean_a:.2f} ± {100 * std_a:.2f}")
    print(f"  reconstructed-single {100 * mean_s:.2f} ± {100 * std_s:.2f}")
    return EXIT_OK


def cmd_export_embeddings(cfg: RunConfig) -> int:
    g, meta = _load_run(cfg)
    run = Path(cfg.run_dir)
    prop = np.load(run / PROPAGATED)
    model = load_sgc(run / SGC_CKPT, prop, expected_hash=meta["graph_hash"])
    export_embeddings(g, model, run / EMBEDDINGS)
    print(f"wrote {run / EMBEDDINGS} ({g.num_nodes} rows)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lyapctl",
        description="certified test-time feature reconstruction for graph models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic planted-partition bundle")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--blocks", type=int, default=2)
    p_synth.add_argument("--nodes-per-block", type=int, default=20)
    p_synth.add_argument("--p-in", type=float, default=0.5)
    p_synth.add_argument("--p-out", type=float, default=0.05)
    p_synth.add_argument("--feature-dim", type=int, default=16)
    p_synth.add_argument("--seed", type=int, default=0)

    commands = {
        "prepare": cmd_prepare,
        "train-gnn": cmd_train_gnn,
        "cegis": cmd_cegis,
        "verify": cmd_verify,
        "eval": cmd_eval,
        "export-embeddings": cmd_export_embeddings,
    }
    for name in commands:
        _add_config_flags(sub.add_parser(name))

    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return commands[args.command](build_config(args))
    except LyapctlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
