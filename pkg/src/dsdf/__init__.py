"""Deep dynamic sequential decision forests on a small numpy feature extractor."""

from .backbone import (
    Activation,
    BackboneConfig,
    ModelParams,
    SGDConfig,
    forward,
    forward_batch,
    gradients,
    init_model,
    pretrain,
    value_and_gradients,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, make_synthetic, split_dataset
from .explain import (
    DecisionPath,
    SaliencyMap,
    category_path,
    category_split_stats,
    end_decision_node,
    explain_category,
    export_hierarchy,
    parse_hierarchy,
    root_routing_profile,
    sample_path,
    tree_cam,
)
from .forest import (
    ForestConfig,
    forest_predict_infer,
    forest_predict_train,
    loss_and_gradients,
    nll_loss,
    train,
    tree_selection,
)
from .hierarchy import category_similarity, learn_hierarchy
from .tree import TreeTopology, route, tree_backward, tree_predict, update_leaf_distributions

__version__ = "0.1.0"
