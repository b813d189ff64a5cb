"""foldkit: data-free compression of small neural networks by folding
similar channels onto their cluster means, plus repair strategies that
restore the activation statistics the fold disturbs."""

from . import clustering, folding, harness, nn, pruning, repair
from .clustering import (Assignment, KMeansResult, brute_force_kmeans,
                         cluster_means, cluster_sums, fold_cost,
                         greedy_pair_clustering, hungarian, kmeans)
from .errors import (FoldkitError, ModelFormatError, ShapeError,
                     ValidationError)
from .folding import (FoldPlan, FoldReport, discover_groups, fold_group,
                      fold_network, merge_networks, sparsity_to_k)
from .nn import (BatchNorm, Conv2D, Dense, Network, ReLU, ResidualBlock,
                 forward, forward_trace, load_network, save_network)
from .pruning import magnitude_prune
from .repair import (InversionConfig, apply_fold_ar, ar_scale, deep_inversion,
                     estimate_cluster_correlation, fold_data_repair, fold_dir,
                     fold_naive)

__version__ = "0.1.0"

__all__ = [
    "Assignment", "BatchNorm", "Conv2D", "Dense", "FoldPlan", "FoldReport",
    "FoldkitError", "InversionConfig", "KMeansResult", "ModelFormatError",
    "Network", "ReLU", "ResidualBlock", "ShapeError", "ValidationError",
    "apply_fold_ar", "ar_scale", "brute_force_kmeans", "cluster_means",
    "cluster_sums", "clustering", "deep_inversion", "discover_groups",
    "estimate_cluster_correlation", "fold_cost", "fold_data_repair",
    "fold_dir", "fold_group", "fold_naive", "fold_network", "folding",
    "forward", "forward_trace", "greedy_pair_clustering", "harness",
    "hungarian", "kmeans", "load_network", "magnitude_prune",
    "merge_networks", "nn", "pruning", "repair", "save_network",
    "sparsity_to_k",
]
