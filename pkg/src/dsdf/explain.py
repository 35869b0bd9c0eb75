"""Decision paths, end-decision nodes, tree-based CAM and hierarchy export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tree as tree_mod
from .backbone import forward, forward_batch
from .errors import ConfigurationError, CoverageError, ParseError, UnsupportedArchitectureError, UsageError
from .forest import forest_predict_infer, predict_infer_batch


@dataclass
class DecisionPath:
    """Root-to-leaf chain of split nodes.

    ``per_node_prob[i]`` is the left-branch probability at ``nodes[i]`` and
    ``branch_probs[i]`` the probability of the branch actually taken.
    """

    tree: int
    nodes: list
    per_node_prob: list
    directions: list
    branch_probs: list
    end_node: int
    terminal_leaf: int | None
    leaf_class: int | None = None
    truncated: bool = False
    category: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def describe(self, category_names=None):
        steps = []
        for n, p, side in zip(self.nodes, self.per_node_prob, self.directions):
            steps.append(f"node {n} (s={p:.3f}) -> {side}")
        tail = ("end-decision node %d; no confident decision below" % self.end_node
                if self.truncated else f"leaf {self.terminal_leaf}")
        if self.leaf_class is not None and not self.truncated:
            name = category_names[self.leaf_class] if category_names else self.leaf_class
            tail += f" (class {name})"
        return f"tree {self.tree}: " + ", ".join(steps) + "; " + tail


def _leaf_chain(depth, leaf):
    """Split nodes and directions from root down to ``leaf``."""
    node = (2 ** (depth - 1) - 1) + leaf
    chain = []
    while node > 0:
        parent = (node - 1) // 2
        chain.append((parent, "L" if node == 2 * parent + 1 else "R"))
        node = parent
    return chain[::-1]


def path_from_split_probs(topology, s, tree=0, pi=None):
    """Deterministic path to the most probable leaf given split probs in node order."""
    s = np.asarray(s, dtype=float)
    mu = tree_mod.route_split_probs(topology.depth, s)
    leaf_mu = mu[topology.num_split:]
    leaf = int(np.argmax(leaf_mu))  # ties -> lowest leaf index
    chain = _leaf_chain(topology.depth, leaf)
    nodes = [n for n, _ in chain]
    dirs = [side for _, side in chain]
    probs = [float(s[n]) for n in nodes]
    branch = [p if side == "L" else 1.0 - p for p, side in zip(probs, dirs)]
    leaf_class = None if pi is None else int(np.argmax(np.asarray(pi)[leaf]))
    return DecisionPath(tree=tree, nodes=nodes, per_node_prob=probs, directions=dirs,
                        branch_probs=branch, end_node=nodes[-1], terminal_leaf=leaf,
                        leaf_class=leaf_class, extra={"leaf_mu": leaf_mu.tolist()})


def end_decision_node(path, tau):
    """Truncate at the first node whose split probability is within tau of 0.5."""
    if not 0 < tau < 0.5:
        raise ConfigurationError("tau must lie in (0, 0.5)")
    for i, p in enumerate(path.per_node_prob):
        if abs(p - 0.5) < tau:
            return DecisionPath(
                tree=path.tree, nodes=path.nodes[:i + 1], per_node_prob=path.per_node_prob[:i + 1],
                directions=path.directions[:i + 1], branch_probs=path.branch_probs[:i + 1],
                end_node=path.nodes[i], terminal_leaf=None, leaf_class=path.leaf_class,
                truncated=True, category=path.category, extra=dict(path.extra))
    return DecisionPath(**{**asdict(path), "end_node": path.nodes[-1], "truncated": False})


def category_split_stats(params, topology, dataset, c, tree=0):
    """Mean split probability per split node over the samples of category ``c``."""
    labels = np.asarray(dataset.labels)
    X = dataset.samples[labels == c]
    if len(X) == 0:
        raise CoverageError(f"no samples of category {c}", missing=[c])
    total = np.zeros(topology.num_split)
    for i in range(0, len(X), 1024):
        f = forward_batch(params, X[i:i + 1024]).neuron_outputs[:, tree]
        total += tree_mod.node_split_probs(topology, f).sum(axis=0)
    return total / len(X)


def category_tree(params, topologies, dataset, c):
    """Tree most often selected at inference for samples of category ``c``."""
    labels = np.asarray(dataset.labels)
    X = dataset.samples[labels == c]
    if len(X) == 0:
        raise CoverageError(f"no samples of category {c}", missing=[c])
    _, sel = predict_infer_batch(params, topologies, X)
    return int(np.argmax(np.bincount(sel, minlength=len(topologies))))


def category_path(stats, topology, pi=None, tree=0, category=None):
    path = path_from_split_probs(topology, stats, tree=tree, pi=pi)
    path.category = category
    return path


def explain_category(params, topologies, dataset, c, tau, tree=None):
    t = category_tree(params, topologies, dataset, c) if tree is None else tree
    stats = category_split_stats(params, topologies[t], dataset, c, tree=t)
    path = category_path(stats, topologies[t], params.leaf_dists[t], tree=t, category=c)
    return end_decision_node(path, tau)


def sample_path(params, topologies, x, tau):
    """Path of one sample through its inference-selected tree, truncated by tau."""
    _, t = forest_predict_infer(params, topologies, x)
    f = forward(params, x).neuron_outputs[t]
    s = tree_mod.node_split_probs(topologies[t], f)
    path = path_from_split_probs(topologies[t], s, tree=t, pi=params.leaf_dists[t])
    return end_decision_node(path, tau)


@dataclass
class SaliencyMap:
    grid: np.ndarray
    source_node: int
    tree: int
    weights: np.ndarray | None = None


def grad_cam(conv_maps, grad_maps):
    """Channel weights g_k (mean gradient over locations) and ReLU(sum_k g_k A^k)."""
    A = np.asarray(conv_maps, dtype=float)
    G = np.asarray(grad_maps, dtype=float)
    g = G.reshape(G.shape[0], -1).mean(axis=1)
    return g, np.maximum(np.tensordot(g, A, axes=1), 0.0)


def tree_cam(params, topologies, x, tau):
    """Saliency of the end-decision node's reach probability on the last conv maps."""
    if params.config.arch != "tiny_conv":
        raise UnsupportedArchitectureError("tree CAM needs a convolutional extractor")
    path = sample_path(params, topologies, x, tau)
    t, e = path.tree, path.end_node
    act = forward(params, x)
    topo = topologies[t]
    onehot = np.zeros(topo.num_nodes)
    onehot[e] = 1.0
    df = tree_mod.tree_backward(topo, act.neuron_outputs[t], params.leaf_dists[t], node_upstream=onehot)
    dz = params.heads[t].T @ df
    K, H, W = act.conv_maps.shape
    # z is the spatial mean of A, so every location receives dz / (H W)
    dA = np.broadcast_to((dz / (H * W))[:, None, None], (K, H, W))
    g, grid = grad_cam(act.conv_maps, dA)
    return SaliencyMap(grid=grid, source_node=e, tree=t, weights=g)


def saliency_pgm(saliency):
    grid = np.asarray(saliency.grid if isinstance(saliency, SaliencyMap) else saliency)
    top = grid.max()
    vals = np.zeros(grid.shape, dtype=int) if top <= 0 else np.rint(255 * grid / top).astype(int)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in vals]
    return "\n".join(lines) + "\n"


def saliency_csv(saliency):
    grid = np.asarray(saliency.grid if isinstance(saliency, SaliencyMap) else saliency)
    return "\n".join(",".join(repr(float(v)) for v in row) for row in grid) + "\n"


# ---------------------------------------------------------------------------
# hierarchy export


def _leaf_classes(leaf_dists, t):
    if leaf_dists is None:
        return None
    return np.argmax(np.asarray(leaf_dists)[t], axis=1)


def export_hierarchy(topologies, fmt="json", leaf_dists=None, betas=None, category_names=None):
    """DOT digraph or JSON document of every tree's hierarchy.

    ``betas[t][n]`` (optional) is the routing-bias vector of split node n.
    """
    if fmt == "json":
        trees = []
        for t, topo in enumerate(topologies):
            classes = _leaf_classes(leaf_dists, t)
            nodes = []
            for n in range(topo.num_split):
                node = {"id": n, "kind": "split", "neuron": int(topo.phi[n]),
                        "left": 2 * n + 1, "right": 2 * n + 2}
                if betas is not None:
                    node["beta"] = [float(b) for b in betas[t][n]]
                nodes.append(node)
            for leaf in range(topo.num_leaves):
                node = {"id": topo.leaf_node(leaf), "kind": "leaf", "leaf": leaf}
                if classes is not None:
                    node["class"] = int(classes[leaf])
                nodes.append(node)
            trees.append({"tree": t, "depth": topo.depth, "phi": topo.phi.tolist(), "nodes": nodes})
        doc = {"format": "dsdf-hierarchy", "version": 1, "trees": trees}
        if category_names:
            doc["category_names"] = list(category_names)
        return json.dumps(doc, indent=1)
    if fmt == "dot":
        out = ["digraph hierarchy {", "  node [fontname=\"Helvetica\"];"]
        for t, topo in enumerate(topologies):
            classes = _leaf_classes(leaf_dists, t)
            out.append(f"  subgraph cluster_tree{t} {{")
            out.append(f"    label=\"tree {t}\";")
            for n in range(topo.num_split):
                label = f"node {n}\\nneuron {int(topo.phi[n])}"
                if betas is not None:
                    label += "\\nbeta " + " ".join(f"{b:+.2f}" for b in betas[t][n])
                out.append(f"    t{t}_n{n} [shape=box, label=\"{label}\"];")
            for leaf in range(topo.num_leaves):
                label = f"leaf {leaf}"
                if classes is not None:
                    c = int(classes[leaf])
                    label += f"\\nclass {category_names[c] if category_names else c}"
                out.append(f"    t{t}_n{topo.leaf_node(leaf)} [shape=ellipse, label=\"{label}\"];")
            for n in range(topo.num_split):
                out.append(f"    t{t}_n{n} -> t{t}_n{2 * n + 1} [label=\"L\"];")
                out.append(f"    t{t}_n{n} -> t{t}_n{2 * n + 2} [label=\"R\"];")
            out.append("  }")
        out.append("}")
        return "\n".join(out) + "\n"
    raise UsageError(f"unknown export format {fmt!r}; use 'dot' or 'json'")


def parse_hierarchy(text):
    """Topologies back from :func:`export_hierarchy` JSON."""
    try:
        doc = json.loads(text)
        return [tree_mod.TreeTopology(int(t["depth"]), np.asarray(t["phi"], dtype=np.int64))
                for t in doc["trees"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"invalid hierarchy document: {exc}") from exc


# ---------------------------------------------------------------------------
# root routing profile


def moving_average(values, window):
    """Centered moving average; the window shrinks at the ends."""
    values = np.asarray(values, dtype=float)
    if window < 1 or window > len(values):
        raise ConfigurationError(f"window must lie in 1..{len(values)}")
    lo = (window - 1) // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    out = np.empty_like(values)
    for i in range(len(values)):
        a, b = max(0, i - lo), min(len(values), i - lo + window)
        out[i] = (csum[b] - csum[a]) / (b - a)
    return out


def root_routing_profile(params, topology, dataset, smoothing_window=20, tree=0):
    """(category, mean root split probability, smoothed) for every category."""
    C = params.config.num_classes
    if smoothing_window > C:
        raise ConfigurationError(f"window {smoothing_window} exceeds the {C} categories")
    labels = np.asarray(dataset.labels)
    missing = [c for c in range(C) if not np.any(labels == c)]
    if missing:
        raise CoverageError(f"no samples for categories {missing}", missing=missing)
    s = np.concatenate([
        tree_mod.node_split_probs(topology, forward_batch(params, dataset.samples[i:i + 1024])
                                  .neuron_outputs[:, tree])[:, 0]
        for i in range(0, len(labels), 1024)])
    points = np.array([s[labels == c].mean() for c in range(C)])
    smooth = moving_average(points, smoothing_window)
    return [(c, float(points[c]), float(smooth[c])) for c in range(C)]


def profile_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category_index", "probability", "smoothed"])
    for c, p, sm in rows:
        w.writerow([c, repr(p), repr(sm)])
    return buf.getvalue()

