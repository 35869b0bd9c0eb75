import json

import numpy as np
import pytest

from dsdf import BackboneConfig, Dataset, forward, init_model
from dsdf.errors import ConfigurationError, CoverageError, ParseError, UnsupportedArchitectureError, UsageError
from dsdf.explain import (
    DecisionPath,
    category_path,
    category_split_stats,
    end_decision_node,
    explain_category,
    export_hierarchy,
    grad_cam,
    moving_average,
    parse_hierarchy,
    path_from_split_probs,
    profile_csv,
    root_routing_profile,
    saliency_csv,
    saliency_pgm,
    sample_path,
    tree_cam,
)
from dsdf.tree import TreeTopology, route, route_split_probs

from conftest import finite_difference, random_topologies


def mlp(T=1, d=3, C=3, seed=0):
    cfg = BackboneConfig(input_shape=(4,), hidden_dims=[5], feature_dim=3, num_classes=C, seed=seed)
    return init_model(cfg, T=T, d=d)


def conv(T=2, d=3, C=3, seed=0):
    cfg = BackboneConfig(input_shape=(1, 5, 5), arch="tiny_conv", hidden_dims=[3], feature_dim=4,
                         num_classes=C, seed=seed)
    return init_model(cfg, T=T, d=d)


def logit(p):
    return np.log(p / (1 - p))


def test_category_stats_single_sample():
    p = mlp(d=2)
    p.heads[...] = 0.0
    p.head_bias[0, 0] = logit(0.9)
    ds = Dataset(np.zeros((4, 4)), [0, 0, 1, 2], 3, (4,))
    np.testing.assert_allclose(category_split_stats(p, TreeTopology.identity(2), ds.subset([0]), 0), [0.9])


def test_category_stats_two_samples():
    cfg = BackboneConfig(input_shape=(1,), hidden_dims=[1], feature_dim=1, num_classes=2, seed=0)
    p = init_model(cfg, T=1, d=2)
    # identity extractor on non-negative inputs
    p.theta["fc0.w"][...] = 1.0
    p.theta["fc0.b"][...] = 0.0
    p.theta["fc1.w"][...] = 1.0
    p.theta["fc1.b"][...] = 0.0
    p.heads[...] = 1.0
    p.head_bias[...] = 0.0
    ds = Dataset(np.array([[logit(0.9)], [logit(0.7)], [0.0]]), [0, 0, 1], 2, (1,))
    s = category_split_stats(p, TreeTopology.identity(2), ds, 0)
    assert s[0] == pytest.approx(0.8, abs=1e-12)


def test_category_stats_zero_heads_and_coverage():
    p = mlp(d=4)
    p.heads[...] = 0.0
    ds = Dataset(np.random.default_rng(0).normal(size=(6, 4)), [0, 1, 0, 1, 0, 1], 3, (4,))
    np.testing.assert_array_equal(category_split_stats(p, TreeTopology.identity(4), ds, 1), 0.5)
    with pytest.raises(CoverageError):
        category_split_stats(p, TreeTopology.identity(4), ds, 2)


def test_category_path_examples():
    path = category_path(np.array([0.9]), TreeTopology.identity(2))
    assert path.nodes == [0] and path.terminal_leaf == 0
    np.testing.assert_allclose(path.extra["leaf_mu"], [0.9, 0.1])
    tie = category_path(np.full(3, 0.5), TreeTopology.identity(3))
    assert tie.terminal_leaf == 0


def test_category_path_depth_three():
    path = category_path(np.array([0.8, 0.6, 0.9]), TreeTopology.identity(3), pi=np.eye(4))
    np.testing.assert_allclose(path.extra["leaf_mu"], [0.48, 0.32, 0.18, 0.02], atol=1e-15)
    assert path.terminal_leaf == 0 and path.leaf_class == 0
    assert path.nodes == [0, 1] and path.directions == ["L", "L"]


@pytest.mark.parametrize("leaf", range(8))
def test_path_chain_reaches_every_leaf(leaf):
    s = np.full(7, 0.5)
    # push routing toward the requested leaf
    node = 7 + leaf
    while node > 0:
        parent = (node - 1) // 2
        s[parent] = 0.99 if node == 2 * parent + 1 else 0.01
        node = parent
    path = path_from_split_probs(TreeTopology.identity(4), s)
    assert path.terminal_leaf == leaf
    assert path.nodes[0] == 0
    for a, b in zip(path.nodes, path.nodes[1:]):
        assert b in (2 * a + 1, 2 * a + 2)
    mu = route_split_probs(4, s)
    assert np.prod(path.branch_probs) == pytest.approx(mu[7 + leaf], abs=1e-12)


def test_truncation_examples():
    path = category_path(np.array([0.52, 0.9, 0.95]), TreeTopology.identity(3))
    cut = end_decision_node(path, 0.1)
    assert cut.truncated and cut.end_node == 0 and cut.nodes == [0] and cut.terminal_leaf is None
    confident = category_path(np.array([0.95, 0.9, 0.05]), TreeTopology.identity(3))
    kept = end_decision_node(confident, 0.1)
    assert not kept.truncated and kept.end_node == kept.nodes[-1] and kept.terminal_leaf == 0
    with pytest.raises(ConfigurationError):
        end_decision_node(path, 0.5)


def test_truncation_monotone_in_tau():
    rng = np.random.default_rng(0)
    topo = TreeTopology.identity(6)
    for _ in range(200):
        path = category_path(rng.uniform(size=31), topo)
        lengths = [len(end_decision_node(path, tau).nodes) for tau in (0.01, 0.05, 0.1, 0.2, 0.3, 0.49)]
        assert lengths == sorted(lengths, reverse=True)


def test_sample_path_deterministic_routing():
    p = mlp(T=1, d=3)
    p.heads[...] = 0.0
    p.head_bias[0] = [40.0, -40.0, 40.0]
    path = sample_path(p, [TreeTopology.identity(3)], np.ones(4), 0.1)
    assert path.tree == 0 and not path.truncated
    assert np.prod(path.branch_probs) == pytest.approx(1.0, abs=1e-12)


def test_sample_path_product_identity():
    p = mlp(T=2, d=4)
    rng = np.random.default_rng(1)
    p.head_bias[...] = rng.normal(size=p.head_bias.shape)
    topos = random_topologies(rng, 2, 4)
    for x in rng.normal(size=(20, 4)):
        path = sample_path(p, topos, x, 1e-9)
        f = forward(p, x).neuron_outputs[path.tree]
        mu = route(topos[path.tree], f).leaf_mu
        assert np.prod(path.branch_probs) == pytest.approx(mu[path.terminal_leaf], abs=1e-12)
        assert path.terminal_leaf == int(np.argmax(mu))


def test_category_path_matches_sample_path_for_single_sample():
    p = mlp(T=1, d=4)
    p.head_bias[...] = np.linspace(-1, 1, 7)
    topos = [TreeTopology(4, [3, 1, 0, 6, 2, 5, 4])]
    x = np.random.default_rng(2).normal(size=4)
    ds = Dataset(x[None], [1], 3, (4,))
    a = category_path(category_split_stats(p, topos[0], ds, 1), topos[0])
    b = sample_path(p, topos, x, 1e-9)
    assert a.nodes == b.nodes
    np.testing.assert_allclose(a.per_node_prob, b.per_node_prob, atol=1e-15)


def test_explain_category_and_serialization():
    p = mlp(T=2, d=3)
    rng = np.random.default_rng(3)
    ds = Dataset(rng.normal(size=(30, 4)), np.arange(30) % 3, 3, (4,))
    path = explain_category(p, random_topologies(rng, 2, 3), ds, 2, 0.1)
    assert path.category == 2
    d = json.loads(json.dumps(path.to_dict()))
    assert DecisionPath.from_dict(d) == path
    assert path.describe().startswith(f"tree {path.tree}: node 0")


def test_grad_cam_hand_example():
    A = np.array([[[1.0, -1.0], [2.0, 0.0]]])
    g, H = grad_cam(A, np.ones_like(A))
    assert g.tolist() == [1.0]
    np.testing.assert_array_equal(H, [[1.0, 0.0], [2.0, 0.0]])


def test_grad_cam_zero_and_negative():
    A = np.random.default_rng(0).normal(size=(3, 4, 4))
    g, H = grad_cam(A, np.zeros_like(A))
    np.testing.assert_array_equal(H, 0.0)
    _, H = grad_cam(-np.abs(A), np.ones_like(A))
    np.testing.assert_array_equal(H, 0.0)


def test_tree_cam_matches_finite_difference_weights():
    p = conv()
    rng = np.random.default_rng(4)
    topos = random_topologies(rng, 2, 3)
    x = rng.normal(size=(1, 5, 5))
    cam = tree_cam(p, topos, x, 0.1)
    act = forward(p, x)
    A = act.conv_maps.copy()
    t, e = cam.tree, cam.source_node

    def mu_e():
        z = A.mean(axis=(1, 2))
        f = p.heads[t] @ z + p.head_bias[t]
        return route(topos[t], f).node_mu[e]

    numeric = finite_difference(mu_e, A)
    g, H = grad_cam(act.conv_maps, numeric)
    np.testing.assert_allclose(cam.weights, g, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(cam.grid, H, rtol=1e-6, atol=1e-12)
    assert cam.grid.shape == (5, 5)
    assert np.all(cam.grid >= 0)


def test_tree_cam_zero_upstream():
    p = conv()
    p.heads[...] = 0.0
    topos = random_topologies(np.random.default_rng(5), 2, 3)
    cam = tree_cam(p, topos, np.ones((1, 5, 5)), 0.1)
    np.testing.assert_array_equal(cam.grid, 0.0)


def test_tree_cam_needs_conv():
    with pytest.raises(UnsupportedArchitectureError):
        tree_cam(mlp(), [TreeTopology.identity(3)], np.zeros(4), 0.1)


def test_saliency_outputs():
    grid = np.array([[0.0, 0.5], [1.0, 0.25]])
    pgm = saliency_pgm(grid)
    assert pgm.splitlines() == ["P2", "2 2", "255", "0 128", "255 64"]
    assert saliency_pgm(np.zeros((1, 3))).splitlines()[-1] == "0 0 0"
    assert saliency_csv(grid).splitlines() == ["0.0,0.5", "1.0,0.25"]


def test_export_dot_counts():
    dot = export_hierarchy([TreeTopology.identity(2)], "dot")
    assert dot.count("shape=box") == 1
    assert dot.count("shape=ellipse") == 2
    assert dot.count("->") == 2
    assert dot.startswith("digraph")


def test_export_json_round_trip():
    rng = np.random.default_rng(6)
    topos = random_topologies(rng, 3, 5)
    leaves = rng.dirichlet(np.ones(4), size=(3, 16))
    betas = [rng.normal(size=(15, 4)) for _ in range(3)]
    text = export_hierarchy(topos, "json", leaf_dists=leaves, betas=betas)
    back = parse_hierarchy(text)
    assert back == topos
    doc = json.loads(text)
    for t, tree in enumerate(doc["trees"]):
        assert len(tree["nodes"]) == 2 ** 5 - 1
        assert tree["nodes"][0]["beta"] == pytest.approx(betas[t][0].tolist())
        assert tree["nodes"][-1]["class"] == int(np.argmax(leaves[t][-1]))


def test_export_errors():
    with pytest.raises(UsageError):
        export_hierarchy([TreeTopology.identity(2)], "yaml")
    with pytest.raises(ParseError):
        parse_hierarchy("{\"trees\": [{\"depth\": 3}]}")


def test_moving_average():
    v = np.array([1.0, 2.0, 6.0, 3.0])
    np.testing.assert_array_equal(moving_average(v, 1), v)
    np.testing.assert_allclose(moving_average(v, 3), [1.5, 3.0, 11 / 3, 4.5])
    with pytest.raises(ConfigurationError):
        moving_average(v, 5)


def test_root_profile():
    p = mlp(C=3)
    p.heads[...] = 0.0
    ds = Dataset(np.random.default_rng(7).normal(size=(9, 4)), np.arange(9) % 3, 3, (4,))
    rows = root_routing_profile(p, TreeTopology.identity(3), ds, smoothing_window=1)
    assert rows == [(0, 0.5, 0.5), (1, 0.5, 0.5), (2, 0.5, 0.5)]
    assert profile_csv(rows).splitlines()[0] == "category_index,probability,smoothed"
    with pytest.raises(ConfigurationError):
        root_routing_profile(p, TreeTopology.identity(3), ds, smoothing_window=4)


def test_trained_profile_separates_superclasses(toy_task):
    params, topologies, train_ds, _ = toy_task
    from dsdf import ForestConfig, SGDConfig, train
    trained, _ = train(params, topologies, train_ds,
                       ForestConfig(T=2, d=3, optimizer=SGDConfig(epochs=30, lr=0.01)))
    rows = root_routing_profile(trained, topologies[0], train_ds, smoothing_window=1)
    pts = np.array([r[1] for r in rows])
    a, b = train_ds.superclasses
    within = max(np.ptp(pts[a]), np.ptp(pts[b]))
    gap = abs(pts[a].mean() - pts[b].mean())
    assert within < gap
