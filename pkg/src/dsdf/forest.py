"""Forest of soft trees with a tree selection module (TSM).

Training predicts with the alpha-weighted mixture of all trees; inference
keeps only the tree with the largest alpha. Network weights and leaf
distributions are optimized alternately: momentum SGD with the leaves fixed,
then variational-bounding leaf updates with the network frozen.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import tree as tree_mod
from .backbone import (
    SGD,
    HeadGrads,
    SGDConfig,
    forward_batch,
    minibatches,
    value_and_gradients,
)
from .errors import ConfigurationError, NumericError, TrainingDivergenceError
from .tree import EPS

METRIC_FIELDS = ("epoch", "phase", "nll", "accuracy", "learning_rate")


@dataclass
class ForestConfig:
    T: int = 3
    d: int = 4
    gamma: float = 10.0
    tau: float = 0.1
    optimizer: SGDConfig = field(default_factory=lambda: SGDConfig(epochs=100, lr=0.01))
    pi_iters: int = 10
    pi_buffer: int | None = None
    pi_warm_start: bool = True
    similarity: str = "cosine"
    stats_cap: int = 256
    tsm_sigmoid_then_normalize: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.d < 2:
            raise ConfigurationError("d must be >= 2")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be > 0")
        if not 0 < self.tau < 0.5:
            raise ConfigurationError("tau must lie in (0, 0.5)")
        if self.pi_iters < 0:
            raise ConfigurationError("pi_iters must be >= 0")


# ---------------------------------------------------------------------------
# tree selection module


def _relu(x):
    return np.maximum(x, 0.0)


def tsm_forward(tsm, features, normalization="softmax"):
    """alpha (..., T) plus the intermediates needed by :func:`tsm_backward`."""
    z = np.asarray(features)
    h1 = _relu(z @ tsm["l1.w"].T + tsm["l1.b"])
    h2 = _relu(h1 @ tsm["l2.w"].T + tsm["l2.b"])
    logits = h2 @ tsm["l3.w"].T + tsm["l3.b"]
    if normalization == "softmax":
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        alpha = e / e.sum(axis=-1, keepdims=True)
    elif normalization == "sigmoid":
        u = expit(logits)
        alpha = u / u.sum(axis=-1, keepdims=True)
    else:
        raise ConfigurationError(f"unknown TSM normalization {normalization!r}")
    return alpha, (z, h1, h2, logits, alpha)


def tsm_backward(tsm, cache, d_alpha, normalization="softmax"):
    z, h1, h2, logits, alpha = cache
    if normalization == "softmax":
        dlogits = alpha * (d_alpha - (d_alpha * alpha).sum(axis=-1, keepdims=True))
    else:
        u = expit(logits)
        du = (d_alpha - (d_alpha * alpha).sum(axis=-1, keepdims=True)) / u.sum(axis=-1, keepdims=True)
        dlogits = du * u * (1.0 - u)
    grads = {"tsm/l3.w": dlogits.T @ h2, "tsm/l3.b": dlogits.sum(axis=0)}
    dh2 = (dlogits @ tsm["l3.w"]) * (h2 > 0)
    grads["tsm/l2.w"] = dh2.T @ h1
    grads["tsm/l2.b"] = dh2.sum(axis=0)
    dh1 = (dh2 @ tsm["l2.w"]) * (h1 > 0)
    grads["tsm/l1.w"] = dh1.T @ z
    grads["tsm/l1.b"] = dh1.sum(axis=0)
    return grads, dh1 @ tsm["l1.w"]


def tree_selection(tsm, features, normalization="softmax"):
    return tsm_forward(tsm, features, normalization)[0]


def alphas(params, features):
    return tree_selection(params.tsm, features, params.tsm_normalization)


# ---------------------------------------------------------------------------
# prediction


def tree_outputs(params, topologies, neuron_outputs):
    """Per-tree routing results and predictions; P has shape (..., T, C)."""
    routes = [tree_mod.route(topo, neuron_outputs[..., t, :]) for t, topo in enumerate(topologies)]
    P = np.stack([r.leaf_mu @ params.leaf_dists[t] for t, r in enumerate(routes)], axis=-2)
    return routes, P


def _check_topologies(params, topologies):
    if len(topologies) != params.num_trees:
        raise ConfigurationError(f"need {params.num_trees} topologies, got {len(topologies)}")
    for topo in topologies:
        if topo.depth != params.depth:
            raise ConfigurationError(f"topology depth {topo.depth} != model depth {params.depth}")


def predict_train_batch(params, topologies, X):
    _check_topologies(params, topologies)
    acts = forward_batch(params, X)
    a = alphas(params, acts.features)
    _, P = tree_outputs(params, topologies, acts.neuron_outputs)
    return np.einsum("bt,btc->bc", a, P)


def forest_predict_train(params, topologies, x):
    return predict_train_batch(params, topologies, np.asarray(x)[None])[0]


def predict_infer_batch(params, topologies, X):
    """(P of the selected tree (B, C), selected tree index (B,))."""
    _check_topologies(params, topologies)
    acts = forward_batch(params, X)
    sel = np.argmax(alphas(params, acts.features), axis=-1)
    out = np.empty((len(sel), params.config.num_classes), dtype=acts.features.dtype)
    for t, topo in enumerate(topologies):
        rows = np.flatnonzero(sel == t)
        if len(rows):
            out[rows] = tree_mod.tree_predict(topo, acts.neuron_outputs[rows, t], params.leaf_dists[t])
    return out, sel


def forest_predict_infer(params, topologies, x):
    P, sel = predict_infer_batch(params, topologies, np.asarray(x)[None])
    return P[0], int(sel[0])


def nll_loss(p, y):
    return float(-np.log(max(float(np.asarray(p)[y]), EPS)))


# ---------------------------------------------------------------------------
# loss and gradients


def forest_loss(topologies):
    """Loss callback for :func:`dsdf.backbone.value_and_gradients`: mean forest NLL."""

    def loss_fn(params, acts, y):
        B = len(y)
        z, f = acts.features, acts.neuron_outputs
        a, cache = tsm_forward(params.tsm, z, params.tsm_normalization)
        _, P = tree_outputs(params, topologies, f)
        PF = np.einsum("bt,btc->bc", a, P)
        p_true = PF[np.arange(B), y]
        loss = -np.log(np.maximum(p_true, EPS)).mean()
        dPF = np.zeros_like(PF)
        dPF[np.arange(B), y] = np.where(p_true > EPS, -1.0 / (B * np.maximum(p_true, EPS)), 0.0)
        d_alpha = np.einsum("btc,bc->bt", P, dPF)
        dN = np.zeros_like(f)
        for t, topo in enumerate(topologies):
            dN[:, t] = tree_mod.tree_backward(topo, f[:, t], params.leaf_dists[t],
                                              upstream=a[:, t, None] * dPF)
        tsm_grads, dz = tsm_backward(params.tsm, cache, d_alpha, params.tsm_normalization)
        return loss, HeadGrads(d_features=dz, d_neuron_outputs=dN, param_grads=tsm_grads)

    return loss_fn


def loss_and_gradients(params, topologies, X, y):
    _check_topologies(params, topologies)
    return value_and_gradients(params, (X, y), forest_loss(topologies))


# ---------------------------------------------------------------------------
# training


def frozen_routing(params, topologies, X, batch_size=1024):
    """alpha (B, T) and leaf_mu (B, T, L) with the network frozen."""
    al, mus = [], []
    for i in range(0, len(X), batch_size):
        acts = forward_batch(params, X[i:i + batch_size])
        al.append(alphas(params, acts.features))
        routes, _ = tree_outputs(params, topologies, acts.neuron_outputs)
        mus.append(np.stack([r.leaf_mu for r in routes], axis=1))
    return np.concatenate(al), np.concatenate(mus)


def forest_nll_from_routing(leaf_dists, alpha, leaf_mu, y):
    PF = np.einsum("bt,btl,tlb->b", alpha, leaf_mu, leaf_dists[:, :, y])
    return float(-np.log(np.maximum(PF, EPS)).mean()), PF


def update_forest_leaves(leaf_dists, topologies, alpha, leaf_mu, y):
    """One joint variational-bounding step for every tree's leaves.

    The latent variable is the (tree, leaf) pair with prior alpha_t * mu_l,
    so the forest NLL on these routings cannot increase. With T = 1 this is
    exactly :func:`dsdf.tree.update_leaf_distributions`.
    """
    _, PF = forest_nll_from_routing(leaf_dists, alpha, leaf_mu, y)
    new = np.empty_like(leaf_dists)
    for t, topo in enumerate(topologies):
        new[t] = tree_mod.update_leaf_distributions(
            topo, leaf_dists[t], alpha[:, t, None] * leaf_mu[:, t], y, likelihood=PF)
    return new


def evaluate(params, topologies, X, y, mode="train"):
    """(mean NLL, top-1 accuracy) using the mixture (``train``) or selected tree (``infer``)."""
    y = np.asarray(y)
    chunks = []
    for i in range(0, len(X), 1024):
        if mode == "train":
            chunks.append(predict_train_batch(params, topologies, X[i:i + 1024]))
        else:
            chunks.append(predict_infer_batch(params, topologies, X[i:i + 1024])[0])
    P = np.concatenate(chunks)
    p = P[np.arange(len(y)), y]
    return float(-np.log(np.maximum(p, EPS)).mean()), float((P.argmax(axis=1) == y).mean())


def _pi_phase(params, topologies, X, y, config, rng):
    if config.pi_iters == 0:
        return
    idx = np.arange(len(X))
    if config.pi_buffer is not None and config.pi_buffer < len(X):
        idx = np.sort(rng.choice(len(X), size=config.pi_buffer, replace=False))
    alpha, mu = frozen_routing(params, topologies, X[idx])
    for _ in range(config.pi_iters):
        params.leaf_dists[...] = update_forest_leaves(params.leaf_dists, topologies, alpha, mu, y[idx])


def train(params, topologies, dataset, config, on_epoch=None):
    """Alternating optimization; returns (new params, metrics log).

    Each epoch runs one SGD pass over shuffled mini-batches with the leaves
    fixed, then ``pi_iters`` leaf updates on routings recomputed with the
    network frozen. ``on_epoch(epoch, params, log)`` is called after both.
    """
    _check_topologies(params, topologies)
    opt = config.optimizer
    params = params.copy()
    log = []
    if opt.epochs <= 0:
        return params, log
    X, y = dataset.samples, np.asarray(dataset.labels)
    rng = np.random.default_rng(opt.seed)
    sgd = SGD(params.trainable(groups=("theta", "heads", "tsm")), opt.momentum, opt.weight_decay)
    loss_fn = forest_loss(topologies)
    if config.pi_warm_start:
        # uniform leaves give zero routing gradients, so fit them once up front
        _pi_phase(params, topologies, X, y, config, rng)
    for epoch in range(opt.epochs):
        lr = opt.lr_at(epoch)
        for idx in minibatches(len(X), opt.batch_size, rng):
            try:
                _, grads = value_and_gradients(params, (X[idx], y[idx]), loss_fn)
            except NumericError as exc:
                raise TrainingDivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch) from exc
            sgd.step(grads, lr)
        nll, acc = evaluate(params, topologies, X, y)
        if not np.isfinite(nll):
            raise TrainingDivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch)
        log.append({"epoch": epoch, "phase": "sgd", "nll": nll, "accuracy": acc, "learning_rate": lr})
        _pi_phase(params, topologies, X, y, config, rng)
        nll, acc = evaluate(params, topologies, X, y)
        log.append({"epoch": epoch, "phase": "pi", "nll": nll, "accuracy": acc, "learning_rate": lr})
        if on_epoch is not None:
            on_epoch(epoch, params, log)
    return params, log


def metrics_csv(log):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in log:
        w.writerow({k: row[k] for k in METRIC_FIELDS})
    return buf.getvalue()


def topk_accuracy(P, y, k=5):
    """Fraction of rows whose label is among the k largest entries (ties: lowest index)."""
    y = np.asarray(y)
    order = np.argsort(-P, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))

