import sys

import numpy as np
import pytest

from dsdf import BackboneConfig, SGDConfig, init_model, learn_hierarchy, make_synthetic, pretrain, split_dataset
from dsdf.tree import TreeTopology


def relative_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return g


def random_topologies(rng, T, d):
    n = 2 ** (d - 1) - 1
    return [TreeTopology(d, rng.permutation(n)) for _ in range(T)]


def random_leaf_dists(rng, T, d, C):
    return rng.dirichlet(np.ones(C), size=(T, 2 ** (d - 1)))


@pytest.fixture(scope="session")
def toy_task():
    """Small 4-class / 2-superclass task with a pretrained model and learned hierarchy."""
    ds = make_synthetic({"blobs": 4, "dim": 8, "n_per_class": 80, "seed": 5})
    train_ds, test_ds = split_dataset(ds, 0.25, 0)
    cfg = BackboneConfig(input_shape=(8,), hidden_dims=[16], feature_dim=8, num_classes=4, seed=5)
    params = init_model(cfg, 2, 3)
    params = pretrain(params, train_ds, SGDConfig(epochs=20, seed=5))
    topologies = learn_hierarchy(params, train_ds)
    return params, topologies, train_ds, test_ds


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
