"""
Training a forest on synthetic blobs
====================================

Four classes in two superclasses. We pretrain a small MLP, learn one tree
hierarchy per head from its weights, then fine-tune the whole forest.
"""

import numpy as np

from dsdf import (BackboneConfig, ForestConfig, SGDConfig, init_model, learn_hierarchy,
                  make_synthetic, pretrain, split_dataset, train)
from dsdf.forest import predict_infer_batch, topk_accuracy

data = make_synthetic({"blobs": 4, "dim": 16, "n_per_class": 300, "seed": 0})
train_ds, test_ds = split_dataset(data, 0.25, seed=0)
print("superclasses:", data.superclasses)

# the pretraining head omega is a plain softmax classifier on z
cfg = BackboneConfig(input_shape=(16,), hidden_dims=[32], feature_dim=16, num_classes=4, seed=0)
params = init_model(cfg, T=3, d=3)
params = pretrain(params, train_ds, SGDConfig(epochs=30, lr=0.05))

# each tree gets its own split-neuron assignment
topologies = learn_hierarchy(params, train_ds)
for t, topo in enumerate(topologies):
    print(f"tree {t} phi:", topo.phi.tolist())

params, log = train(params, topologies, train_ds,
                    ForestConfig(T=3, d=3, optimizer=SGDConfig(epochs=40, lr=0.01)))
print("last epoch:", log[-1])

P, selected = predict_infer_batch(params, topologies, test_ds.samples)
print("test top-1: %.3f" % topk_accuracy(P, test_ds.labels, 1))
print("tree usage:", np.bincount(selected, minlength=3).tolist())
