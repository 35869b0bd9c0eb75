"""Top-down hierarchy learning: assigning head neurons to split nodes.

Category similarity comes from the cosine between rows of the pretrained
C-way head. Each candidate neuron is scored at a split node by how well its
per-category routing biases agree with those similarities, weighted by the
node's category significance. The walk is breadth-first, every assignment
removes the neuron from the pool, and children inherit a significance
reweighted by ``gamma ** (+/- beta)``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .backbone import forward_batch
from .errors import ConfigurationError, CoverageError, DegenerateWeightsError
from .tree import TreeTopology


@dataclass
class RoutingStats:
    per_category: np.ndarray
    global_mean: float

    @property
    def beta(self):
        return self.per_category - self.global_mean


@dataclass
class SignificanceState:
    lam: np.ndarray
    node: int = 0


def category_similarity(omega, mode="cosine"):
    """C x C similarity of the original head rows; ``mode='constant'`` gives S == 1."""
    omega = np.asarray(omega, dtype=float)
    C = omega.shape[0]
    if mode == "constant":
        return np.ones((C, C))
    if mode != "cosine":
        raise ConfigurationError(f"unknown similarity mode {mode!r}")
    norms = np.linalg.norm(omega, axis=1)
    if np.any(norms == 0):
        raise DegenerateWeightsError(f"zero-norm head rows: {np.flatnonzero(norms == 0).tolist()}")
    u = omega / norms[:, None]
    S = np.clip(u @ u.T, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return (S + S.T) / 2


def subsample_by_category(labels, num_classes, cap=256, seed=0):
    """Indices of at most ``cap`` samples per category, sorted, drawn with a fixed seed."""
    labels = np.asarray(labels)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise CoverageError(f"no samples for categories {missing}", missing=missing)
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if cap is not None and len(idx) > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        picks.append(idx)
    return np.sort(np.concatenate(picks))


def routing_stats_from_probs(probs, labels, num_classes):
    """Stats for every column of ``probs`` (B, M): per_category (M, C) and global (M,)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise CoverageError(f"no samples for categories {missing}", missing=missing)
    per = np.stack([probs[labels == c].mean(axis=0) for c in range(num_classes)], axis=-1)
    return per, probs.mean(axis=0)


def neuron_probs(params, samples, tree=0, batch_size=1024):
    """sigmoid of every neuron of one tree head, shape (B, N)."""
    out = []
    for i in range(0, len(samples), batch_size):
        acts = forward_batch(params, samples[i:i + batch_size])
        out.append(expit(acts.neuron_outputs[:, tree]))
    return np.concatenate(out)


def routing_stats(m, dataset, params, tree=0, cap=256, seed=0):
    C = params.config.num_classes
    idx = subsample_by_category(dataset.labels, C, cap, seed)
    per, glob = routing_stats_from_probs(
        neuron_probs(params, dataset.samples[idx], tree), np.asarray(dataset.labels)[idx], C)
    return RoutingStats(per[m], float(glob[m]))


def pair_consistency(S_ij, stats, ci, cj):
    b = stats.per_category - stats.global_mean
    return max(S_ij, 0.0) * b[ci] * b[cj]


def pair_matrix(S, per_category, global_mean):
    """q[m, i, j] for every neuron; shape (M, C, C)."""
    b = np.asarray(per_category) - np.asarray(global_mean)[..., None]
    return np.maximum(S, 0.0) * b[..., :, None] * b[..., None, :]


def node_criterion(m, significance, pair_q):
    """Sum over ordered pairs i != j of lam_i lam_j q_ij(m).

    ``pair_q`` is either one neuron's (C, C) matrix or the (M, C, C) stack.
    """
    q = np.asarray(pair_q)
    if q.ndim == 3:
        q = q[m]
    lam = np.asarray(significance.lam if isinstance(significance, SignificanceState) else significance)
    return float(lam @ q @ lam - np.sum(lam * lam * np.diagonal(q)))


def all_node_criteria(lam, pair_q):
    q = np.asarray(pair_q)
    full = np.einsum("i,mij,j->m", lam, q, lam)
    return full - np.einsum("i,mii->m", lam * lam, q)


def child_significance(parent, beta, gamma):
    if gamma <= 0:
        raise ConfigurationError("gamma must be > 0")
    lam = parent.lam if isinstance(parent, SignificanceState) else np.asarray(parent)
    node = parent.node if isinstance(parent, SignificanceState) else 0
    beta = np.asarray(beta, dtype=float)
    # gamma ** beta in log space
    lg = np.log(gamma) * beta
    left = lam * np.exp(lg - lg.max())
    right = lam * np.exp(-lg - (-lg).max())
    return (SignificanceState(left / left.sum(), 2 * node + 1),
            SignificanceState(right / right.sum(), 2 * node + 2))


@dataclass
class NodeDiagnostics:
    tree: int
    node: int
    neuron: int
    top_scores: list
    lam: list

    def to_dict(self):
        return {"tree": self.tree, "node": self.node, "chosen_neuron": self.neuron,
                "top5": self.top_scores, "lambda": self.lam}


def assign_neurons(depth, pair_q, per_category, global_mean, gamma, tree=0):
    """Breadth-first neuron assignment for one tree from precomputed stats.

    Returns (phi, betas, diagnostics) where ``betas[n]`` is the routing-bias
    vector of the neuron assigned to split node ``n``.
    """
    M = pair_q.shape[0]
    C = pair_q.shape[1]
    n_split = 2 ** (depth - 1) - 1
    assert M == n_split
    phi = np.full(n_split, -1, dtype=np.int64)
    betas = np.zeros((n_split, C))
    available = np.ones(M, dtype=bool)
    lam = {0: SignificanceState(np.full(C, 1.0 / C), 0)}
    diags = []
    queue = deque([0])
    while queue:
        n = queue.popleft()
        scores = all_node_criteria(lam[n].lam, pair_q)
        masked = np.where(available, scores, -np.inf)
        m = int(np.argmax(masked))  # first maximum: lowest index wins ties
        phi[n] = m
        available[m] = False
        betas[n] = per_category[m] - global_mean[m]
        order = [int(k) for k in np.argsort(-masked, kind="stable")[:5] if np.isfinite(masked[k])]
        diags.append(NodeDiagnostics(tree, n, m, [[k, float(scores[k])] for k in order],
                                     lam[n].lam.tolist()))
        if 2 * n + 1 < n_split:
            left, right = child_significance(lam[n], betas[n], gamma)
            lam[2 * n + 1], lam[2 * n + 2] = left, right
            queue.append(2 * n + 1)
            queue.append(2 * n + 2)
    return phi, betas, diags


@dataclass
class HierarchyResult:
    topologies: list
    betas: list
    diagnostics: list

    def diagnostics_json(self):
        return json.dumps([d.to_dict() for d in self.diagnostics], indent=1)


def learn_hierarchy(params, dataset, T=None, d=None, gamma=10.0, similarity="cosine",
                    cap=256, seed=0, return_details=False):
    """Learn phi for every tree from the pretrained head and the random tree heads."""
    T = params.num_trees if T is None else T
    d = params.depth if d is None else d
    if (T, d) != (params.num_trees, params.depth):
        raise ConfigurationError(
            f"model has T={params.num_trees}, d={params.depth}; asked for T={T}, d={d}")
    if gamma <= 0:
        raise ConfigurationError("gamma must be > 0")
    C = params.config.num_classes
    S = category_similarity(params.omega, similarity)
    idx = subsample_by_category(dataset.labels, C, cap, seed)
    X = dataset.samples[idx]
    y = np.asarray(dataset.labels)[idx]
    acts = []
    for i in range(0, len(X), 1024):
        acts.append(expit(forward_batch(params, X[i:i + 1024]).neuron_outputs))
    probs = np.concatenate(acts)  # B, T, N
    topologies, betas, diags = [], [], []
    for t in range(T):
        per, glob = routing_stats_from_probs(probs[:, t], y, C)
        q = pair_matrix(S, per, glob)
        phi, beta, dg = assign_neurons(d, q, per, glob, gamma, tree=t)
        topologies.append(TreeTopology(d, phi))
        betas.append(beta)
        diags.extend(dg)
    if return_details:
        return HierarchyResult(topologies, betas, diags)
    return topologies
