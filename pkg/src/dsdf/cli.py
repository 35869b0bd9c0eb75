"""Command-line front end.

Every command works on a model directory (``--model``) holding a
checkpoint. Settings resolve as: built-in defaults, then the run settings
stored in the checkpoint, then ``--config`` (``key=value`` lines, JSON for
lists), then explicit flags. On success one JSON summary line with
``command``, ``seed`` and ``metrics`` is printed to stdout.

Exit status: 0 success, 1 runtime failure, 2 usage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import explain, hierarchy
from ._io import atomic_write
from .backbone import BackboneConfig, SGDConfig, accuracy, init_model, pretrain
from .checkpoint import MANIFEST, load_checkpoint, save_checkpoint
from .data import load_dataset, split_dataset
from .errors import DsdfError, UsageError
from .forest import ForestConfig, evaluate, metrics_csv, predict_infer_batch, topk_accuracy, train

DEFAULTS = {
    "seed": 0,
    "data": None,
    "data_format": None,
    "labels": None,
    "num_classes": None,
    "test_fraction": 0.2,
    "arch": "mlp",
    "hidden_dims": [32],
    "feature_dim": 16,
    "trees": 3,
    "depth": 4,
    "dtype": "float64",
    "head_bias": True,
    "tsm_sigmoid": False,
    "pretrain_epochs": 50,
    "epochs": 100,
    "pretrain_lr": 0.05,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "batch_size": 64,
    "gamma": 10.0,
    "similarity": "cosine",
    "stats_cap": 256,
    "pi_iters": 10,
    "pi_buffer": None,
    "tau": 0.1,
    "checkpoint_every": 0,
}
# settings remembered in the checkpoint so later commands need not repeat them
PERSISTED = ("seed", "data", "data_format", "labels", "num_classes", "test_fraction", "gamma",
             "similarity", "stats_cap", "tau")
OPTION_TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None and not isinstance(v, list)}
OPTION_TYPES.update(test_fraction=float, num_classes=int, pi_buffer=int)


def parse_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment; values may be JSON."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _json_list(text):
    try:
        v = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not JSON: {text!r}") from exc
    if not isinstance(v, list):
        raise argparse.ArgumentTypeError("expected a JSON list")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--model", required=True, help="checkpoint directory")
    g.add_argument("--out", help="artifact directory (default: the model directory)")
    g.add_argument("--config", help="key=value settings file")
    g.add_argument("--seed", type=int)
    g.add_argument("--data", help="dataset path (IDX images, CSV, or synthetic JSON spec)")
    g.add_argument("--data-format", choices=["idx", "csv", "synthetic"])
    g.add_argument("--labels", help="IDX labels file")
    g.add_argument("--num-classes", type=int)
    g.add_argument("--test-fraction", type=float)

    parser = argparse.ArgumentParser(prog="dsdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train extractor and C-way head")
    p.add_argument("--arch", choices=["mlp", "tiny_conv"])
    p.add_argument("--hidden-dims", type=_json_list)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--head-bias", type=_bool)
    p.add_argument("--tsm-sigmoid", type=_bool)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--lr", type=float, dest="pretrain_lr")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("build-hierarchy", parents=[common], help="learn the node/neuron correspondence")
    p.add_argument("--gamma", type=float)
    p.add_argument("--similarity", choices=["cosine", "constant"])
    p.add_argument("--stats-cap", type=int)

    p = sub.add_parser("train", parents=[common], help="alternating forest training")
    for flag, tp in [("--epochs", int), ("--lr", float), ("--momentum", float),
                     ("--weight-decay", float), ("--batch-size", int), ("--pi-iters", int),
                     ("--pi-buffer", int), ("--checkpoint-every", int)]:
        p.add_argument(flag, type=tp)

    p = sub.add_parser("eval", parents=[common], help="top-1/top-5 accuracy")
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("explain", parents=[common], help="deterministic decision paths")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--category", type=int)
    which.add_argument("--sample", type=int)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--tau", type=float)

    p = sub.add_parser("cam", parents=[common], help="tree-based saliency map")
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--tau", type=float)

    p = sub.add_parser("profile-root", parents=[common], help="root routing profile CSV")
    p.add_argument("--window", type=int)
    p.add_argument("--tree", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="train")

    p = sub.add_parser("export", parents=[common], help="hierarchy as DOT or JSON")
    p.add_argument("--format", choices=["dot", "json"], required=True)
    p.add_argument("--output", help="file to write (default: <out>/hierarchy.<format>)")
    return parser


class Run:
    """Resolved settings plus lazily loaded dataset and checkpoint."""

    def __init__(self, args):
        self.args = args
        self.model_dir = Path(args.model)
        self.out_dir = Path(args.out) if args.out else self.model_dir
        self.params = self.topologies = None
        stored = {}
        if (self.model_dir / MANIFEST).exists():
            self.params, self.topologies, ck = load_checkpoint(self.model_dir)
            stored = {k: v for k, v in ck.get("run", {}).items() if k in PERSISTED}
        s = dict(DEFAULTS)
        s.update(stored)
        if args.config:
            s.update(parse_config_file(args.config))
        for key in DEFAULTS:
            v = getattr(args, key, None)
            if v is not None:
                s[key] = v
        for key in ("data", "labels"):
            if s[key] is not None:
                s[key] = str(Path(s[key]).resolve())
        for key, tp in OPTION_TYPES.items():
            if s.get(key) is not None and tp in (int, float):
                s[key] = tp(s[key])
        self.settings = s
        self._data = None

    @property
    def seed(self):
        return int(self.settings["seed"])

    def dataset(self):
        if self._data is None:
            s = self.settings
            if s["data"] is None:
                raise UsageError("no dataset: pass --data (or set data= in --config)")
            ds = load_dataset(s["data"], s["data_format"], s["labels"], s["num_classes"])
            self._data = split_dataset(ds, s["test_fraction"], self.seed)
        return self._data

    def split(self, name):
        train_ds, test_ds = self.dataset()
        return train_ds if name == "train" else test_ds

    def need_model(self, with_hierarchy=False):
        if self.params is None:
            raise UsageError(f"no checkpoint in {self.model_dir}; run 'pretrain' first")
        if with_hierarchy and self.topologies is None:
            raise UsageError("checkpoint has no hierarchy; run 'build-hierarchy' first")

    def save(self, params=None, topologies=None):
        if params is not None:
            self.params = params
        if topologies is not None:
            self.topologies = topologies
        run = {k: self.settings[k] for k in PERSISTED}
        save_checkpoint(self.params, self.topologies, {"gamma": self.settings["gamma"], "run": run},
                        self.model_dir)

    def write(self, name, data):
        return str(atomic_write(self.out_dir / name, data))

    def sgd(self, epochs, lr_key="lr"):
        s = self.settings
        return SGDConfig(lr=s[lr_key], momentum=s["momentum"], weight_decay=s["weight_decay"],
                         epochs=epochs, batch_size=s["batch_size"], seed=self.seed)


def cmd_pretrain(run):
    s = run.settings
    train_ds, test_ds = run.dataset()
    cfg = BackboneConfig(input_shape=train_ds.input_shape, arch=s["arch"], hidden_dims=s["hidden_dims"],
                         feature_dim=s["feature_dim"], num_classes=train_ds.num_classes, seed=run.seed,
                         dtype=s["dtype"], head_bias=bool(s["head_bias"]))
    params = init_model(cfg, int(s["trees"]), int(s["depth"]), seed=run.seed,
                        tsm_normalization="sigmoid" if s["tsm_sigmoid"] else "softmax")
    log = []
    params = pretrain(params, train_ds, run.sgd(int(s["pretrain_epochs"]), "pretrain_lr"), log=log)
    run.topologies = None
    run.save(params)
    metrics = {"train_accuracy": accuracy(params, train_ds.samples, train_ds.labels)}
    if len(test_ds):
        metrics["test_accuracy"] = accuracy(params, test_ds.samples, test_ds.labels)
    return metrics, [str(run.model_dir)]


def cmd_build_hierarchy(run):
    run.need_model()
    s = run.settings
    train_ds, _ = run.dataset()
    res = hierarchy.learn_hierarchy(run.params, train_ds, gamma=s["gamma"], similarity=s["similarity"],
                                    cap=int(s["stats_cap"]), seed=run.seed, return_details=True)
    run.save(topologies=res.topologies)
    diag = {"nodes": [d.to_dict() for d in res.diagnostics],
            "betas": [b.tolist() for b in res.betas]}
    path = run.write("hierarchy_diagnostics.json", json.dumps(diag, indent=1))
    return {"phi": [t.phi.tolist() for t in res.topologies]}, [str(run.model_dir), path]


def cmd_train(run):
    run.need_model(with_hierarchy=True)
    s = run.settings
    train_ds, _ = run.dataset()
    cfg = ForestConfig(T=run.params.num_trees, d=run.params.depth, gamma=s["gamma"], tau=s["tau"],
                       optimizer=run.sgd(int(s["epochs"])), pi_iters=int(s["pi_iters"]),
                       pi_buffer=s["pi_buffer"])
    every = int(s["checkpoint_every"])

    def on_epoch(epoch, params, log):
        if every > 0 and (epoch + 1) % every == 0:
            run.save(params)
            run.write("metrics.csv", metrics_csv(log))

    params, log = train(run.params, run.topologies, train_ds, cfg, on_epoch=on_epoch)
    run.save(params)
    path = run.write("metrics.csv", metrics_csv(log))
    last = log[-1] if log else {}
    return {"epochs": cfg.optimizer.epochs, "nll": last.get("nll"), "accuracy": last.get("accuracy")}, \
        [str(run.model_dir), path]


def cmd_eval(run):
    run.need_model(with_hierarchy=True)
    ds = run.split(run.args.split)
    P, sel = predict_infer_batch(run.params, run.topologies, ds.samples)
    nll, _ = evaluate(run.params, run.topologies, ds.samples, ds.labels, mode="infer")
    return {"split": run.args.split, "n": len(ds), "top1": topk_accuracy(P, ds.labels, 1),
            "top5": topk_accuracy(P, ds.labels, 5), "nll": nll,
            "tree_usage": np.bincount(sel, minlength=run.params.num_trees).tolist()}, []


def cmd_explain(run):
    run.need_model(with_hierarchy=True)
    tau = float(run.settings["tau"])
    ds = run.split(run.args.split)
    names = ds.category_names
    if run.args.category is not None:
        c = run.args.category
        if not 0 <= c < ds.num_classes:
            raise UsageError(f"category must lie in 0..{ds.num_classes - 1}")
        path = explain.explain_category(run.params, run.topologies, ds, c, tau)
        name = f"explain_category_{c}.json"
    else:
        i = run.args.sample
        if not 0 <= i < len(ds):
            raise UsageError(f"sample must lie in 0..{len(ds) - 1}")
        path = explain.sample_path(run.params, run.topologies, ds.samples[i], tau)
        path.category = int(ds.labels[i])
        name = f"explain_sample_{i}.json"
    print(path.describe(names), file=sys.stderr)
    out = run.write(name, json.dumps(path.to_dict(), indent=1))
    return {"path": path.to_dict()}, [out]


def cmd_cam(run):
    run.need_model(with_hierarchy=True)
    ds = run.split(run.args.split)
    i = run.args.sample
    if not 0 <= i < len(ds):
        raise UsageError(f"sample must lie in 0..{len(ds) - 1}")
    sal = explain.tree_cam(run.params, run.topologies, ds.samples[i], float(run.settings["tau"]))
    a = run.write(f"cam_sample_{i}.pgm", explain.saliency_pgm(sal))
    b = run.write(f"cam_sample_{i}.csv", explain.saliency_csv(sal))
    return {"tree": sal.tree, "end_node": sal.source_node, "max": float(sal.grid.max())}, [a, b]


def cmd_profile_root(run):
    run.need_model(with_hierarchy=True)
    ds = run.split(run.args.split)
    window = run.args.window or min(20, ds.num_classes)
    t = run.args.tree
    if not 0 <= t < run.params.num_trees:
        raise UsageError(f"tree must lie in 0..{run.params.num_trees - 1}")
    rows = explain.root_routing_profile(run.params, run.topologies[t], ds, window, tree=t)
    out = run.write(f"root_profile_tree{t}.csv", explain.profile_csv(rows))
    return {"window": window, "points": [p for _, p, _ in rows]}, [out]


def cmd_export(run):
    run.need_model(with_hierarchy=True)
    betas = None
    diag = run.model_dir / "hierarchy_diagnostics.json"
    if diag.exists():
        betas = json.loads(diag.read_text()).get("betas")
    text = explain.export_hierarchy(run.topologies, run.args.format, run.params.leaf_dists, betas)
    if run.args.output:
        out = str(atomic_write(run.args.output, text))
    else:
        out = run.write(f"hierarchy.{run.args.format}", text)
    return {"format": run.args.format, "trees": len(run.topologies)}, [out]


COMMANDS = {
    "pretrain": cmd_pretrain,
    "build-hierarchy": cmd_build_hierarchy,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "cam": cmd_cam,
    "profile-root": cmd_profile_root,
    "export": cmd_export,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors (and --help) this way
        return int(exc.code or 0)
    try:
        run = Run(args)
        metrics, artifacts = COMMANDS[args.command](run)
    except UsageError as exc:
        print(f"dsdf {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except DsdfError as exc:
        print(f"dsdf {args.command}: {exc.category} error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dsdf {args.command}: io error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "seed": run.seed, "metrics": metrics,
                      "artifacts": artifacts}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
