"""A single soft decision tree laid out heap-style.

Split node ``n`` has children ``2n + 1`` (left) and ``2n + 2`` (right); the
``L = 2**(d-1)`` leaves occupy node indices ``N .. 2N`` where ``N`` is the
number of split nodes. The split probability ``s_n = sigmoid(f[phi[n]])`` is
the probability of taking the LEFT branch.

Every function here accepts a leading batch shape on its array arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateLikelihoodError,
    InputShapeError,
    InvariantViolationError,
)

EPS = 1e-12


@dataclass
class TreeTopology:
    depth: int
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.int64)
        if self.depth < 2:
            raise InputShapeError("tree depth must be >= 2")
        if self.phi.shape != (self.num_split,):
            raise InputShapeError(f"phi must have length {self.num_split}, got {self.phi.shape}")
        if not np.array_equal(np.sort(self.phi), np.arange(self.num_split)):
            raise InvariantViolationError(f"phi is not a permutation: {self.phi.tolist()}")

    @classmethod
    def identity(cls, depth):
        return cls(depth, np.arange(2 ** (depth - 1) - 1))

    @property
    def num_split(self):
        return 2 ** (self.depth - 1) - 1

    @property
    def num_leaves(self):
        return 2 ** (self.depth - 1)

    @property
    def num_nodes(self):
        return 2 ** self.depth - 1

    @property
    def split_nodes(self):
        return np.arange(self.num_split)

    @property
    def leaves(self):
        return np.arange(self.num_leaves)

    def leaf_node(self, leaf):
        """Heap index of leaf ``leaf``."""
        return self.num_split + leaf

    def __eq__(self, other):
        return (isinstance(other, TreeTopology) and self.depth == other.depth
                and np.array_equal(self.phi, other.phi))


@dataclass
class RoutingResult:
    split_probs: np.ndarray
    node_mu: np.ndarray

    @property
    def leaf_mu(self):
        n_split = (self.node_mu.shape[-1] - 1) // 2
        return self.node_mu[..., n_split:]


def split_probability(f_value):
    return expit(f_value)


def _levels(depth):
    """(first, stop) node ranges of each split level, top-down."""
    return [(2 ** l - 1, 2 ** (l + 1) - 1) for l in range(depth - 1)]


def route_split_probs(depth, s):
    """Reach probability of every node from split probabilities in node order."""
    s = np.asarray(s)
    mu = np.empty(s.shape[:-1] + (2 ** depth - 1,), dtype=s.dtype)
    mu[..., 0] = 1.0
    for a, b in _levels(depth):
        parent = mu[..., a:b]
        mu[..., 2 * a + 1:2 * b + 1:2] = parent * s[..., a:b]
        mu[..., 2 * a + 2:2 * b + 1:2] = parent * (1.0 - s[..., a:b])
    return mu


def node_split_probs(topology, neuron_outputs):
    f = np.asarray(neuron_outputs)
    if f.shape[-1] != topology.num_split:
        raise InputShapeError(
            f"expected {topology.num_split} neuron outputs, got {f.shape[-1]}"
        )
    return split_probability(f[..., topology.phi])


def route(topology, neuron_outputs):
    s = node_split_probs(topology, neuron_outputs)
    return RoutingResult(split_probs=s, node_mu=route_split_probs(topology.depth, s))


def check_leaf_dists(pi, tol=1e-6):
    pi = np.asarray(pi)
    if np.any(pi < -tol) or np.any(np.abs(pi.sum(axis=-1) - 1.0) > tol):
        raise InvariantViolationError("leaf distributions must be row-stochastic")
    return pi


def tree_predict(topology, neuron_outputs, pi):
    pi = check_leaf_dists(pi)
    if pi.shape[-2] != topology.num_leaves:
        raise InputShapeError(f"pi needs {topology.num_leaves} rows, got {pi.shape[-2]}")
    return route(topology, neuron_outputs).leaf_mu @ pi


def routing_backward(depth, s, node_mu, d_node_mu):
    """Back-propagate dL/d(node_mu) to dL/d(split probs in node order)."""
    dmu = np.array(d_node_mu, dtype=node_mu.dtype, copy=True)
    ds = np.zeros_like(s)
    for a, b in reversed(_levels(depth)):
        dl = dmu[..., 2 * a + 1:2 * b + 1:2]
        dr = dmu[..., 2 * a + 2:2 * b + 1:2]
        sn = s[..., a:b]
        ds[..., a:b] = node_mu[..., a:b] * (dl - dr)
        dmu[..., a:b] += dl * sn + dr * (1.0 - sn)
    return ds


def tree_backward(topology, neuron_outputs, pi, upstream=None, node_upstream=None):
    """Gradient w.r.t. the neuron outputs (neuron order, not node order).

    ``upstream`` is dL/dP_T with shape (..., C); ``node_upstream`` optionally
    adds dL/dmu for arbitrary nodes, e.g. a one-hot vector selecting mu(e|x).
    """
    r = route(topology, neuron_outputs)
    d_node = np.zeros_like(r.node_mu)
    if upstream is not None:
        d_node[..., topology.num_split:] += np.asarray(upstream) @ np.swapaxes(np.asarray(pi), -1, -2)
    if node_upstream is not None:
        d_node += node_upstream
    ds = routing_backward(topology.depth, r.split_probs, r.node_mu, d_node)
    df_nodes = ds * r.split_probs * (1.0 - r.split_probs)
    df = np.zeros_like(df_nodes)
    df[..., topology.phi] = df_nodes
    return df


def update_leaf_distributions(topology, pi, leaf_mu, labels, likelihood=None):
    """One variational-bounding (EM) fixed-point step for the leaf distributions.

    ``leaf_mu`` is (B, L) and ``labels`` (B,). The per-sample likelihood in the
    denominator defaults to this tree's own P_T[y|x]; a forest passes its
    mixture likelihood together with alpha-weighted routings instead. Leaves
    that no sample reaches keep their previous row.
    """
    pi = check_leaf_dists(pi)
    leaf_mu = np.asarray(leaf_mu)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputShapeError("empty batch")
    if leaf_mu.shape != (len(labels), topology.num_leaves):
        raise InputShapeError(f"leaf_mu must be ({len(labels)}, {topology.num_leaves})")
    C = pi.shape[1]
    if likelihood is None:
        likelihood = np.einsum("bl,lb->b", leaf_mu, pi[:, labels])
    likelihood = np.asarray(likelihood)
    if np.any(~np.isfinite(likelihood)) or np.any(likelihood <= 0.0):
        bad = np.flatnonzero(~(likelihood > 0.0))
        raise DegenerateLikelihoodError(f"zero likelihood for samples {bad[:10].tolist()}")
    w = leaf_mu / np.maximum(likelihood, EPS)[:, None]
    acc = np.zeros_like(pi)
    np.add.at(acc.T, labels, w)
    acc *= pi
    z = acc.sum(axis=1, keepdims=True)
    out = np.where(z > 0, acc / np.where(z > 0, z, 1.0), pi)
    assert out.shape == (topology.num_leaves, C)
    return out


def tree_nll(topology, neuron_outputs, pi, labels):
    p = tree_predict(topology, neuron_outputs, pi)
    labels = np.asarray(labels)
    return float(-np.log(np.maximum(p[np.arange(len(labels)), labels], EPS)).mean())
