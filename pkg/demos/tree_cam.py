"""
Saliency maps from a convolutional extractor
============================================

tiny_conv works on small images. The CAM weights each feature map by the
gradient of the end node's reach probability.
"""

from pathlib import Path

import numpy as np

from dsdf import (BackboneConfig, SGDConfig, init_model, learn_hierarchy, make_synthetic,
                  pretrain, save_checkpoint, load_checkpoint, tree_cam)
from dsdf.explain import saliency_pgm

data = make_synthetic({"blobs": 4, "dim": 64, "n_per_class": 40, "seed": 2, "image_size": [8, 8]})
cfg = BackboneConfig(arch="tiny_conv", input_shape=(1, 8, 8), hidden_dims=[4], feature_dim=8,
                     num_classes=4, seed=2)
params = pretrain(init_model(cfg, T=2, d=3), data, SGDConfig(epochs=5, lr=0.05))
topologies = learn_hierarchy(params, data)

cam = tree_cam(params, topologies, data.samples[0], tau=0.1)
print("tree", cam.tree, "node", cam.source_node)
print(np.round(cam.grid, 4))
print(saliency_pgm(cam).splitlines()[:3])

out = Path("tree_cam_ckpt")
save_checkpoint(params, topologies, {"note": "demo"}, out)
again, topos, _ = load_checkpoint(out)
print("round trip equal:", again.equals(params), topos == topologies)
