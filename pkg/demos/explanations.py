"""
Reading decisions off the trees
===============================

Category paths, per-sample paths truncated at the first unsure node, and
the hierarchy exported as DOT.
"""

from dsdf import (BackboneConfig, ForestConfig, SGDConfig, explain_category, export_hierarchy,
                  init_model, learn_hierarchy, make_synthetic, pretrain, sample_path, train)

data = make_synthetic({"blobs": 4, "dim": 8, "n_per_class": 150, "seed": 1})
cfg = BackboneConfig(input_shape=(8,), hidden_dims=[16], feature_dim=8, num_classes=4, seed=1)
params = pretrain(init_model(cfg, T=2, d=3), data, SGDConfig(epochs=20, lr=0.05))
topologies = learn_hierarchy(params, data)
params, _ = train(params, topologies, data, ForestConfig(T=2, d=3, optimizer=SGDConfig(epochs=15)))

names = ["cat", "dog", "car", "truck"]
for c in range(4):
    print(explain_category(params, topologies, data, c, tau=0.1).describe(names))

# a larger tau can only stop earlier
x = data.samples[0]
for tau in (0.05, 0.2, 0.45):
    path = sample_path(params, topologies, x, tau)
    print(f"tau={tau}: {len(path.nodes)} nodes, end node {path.end_node}")

print(export_hierarchy(topologies, "dot", leaf_dists=params.leaf_dists, category_names=names)[:400])
