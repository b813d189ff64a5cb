from .fold import (REPAIR_MODES, VARIANTS, FoldPlan, FoldReport,
                   GroupFoldRecord, build_fold_matrix, fold_group,
                   fold_network, identity_assignment, permute_group_channels,
                   sparsity_to_k, variant_for)
from .groups import (ConsumerRef, FoldableGroup, ProducerRef, consumer_cols,
                     discover_groups, producer_rows, set_consumer_cols,
                     set_producer_rows)
from .merge import (MERGE_MODES, MergeGroupRecord, MergeReport,
                    doubled_network, merge_networks, merge_rows,
                    weight_matching)

__all__ = [
    "ConsumerRef", "FoldPlan", "FoldReport", "FoldableGroup",
    "GroupFoldRecord", "MERGE_MODES", "MergeGroupRecord", "MergeReport",
    "ProducerRef", "REPAIR_MODES", "VARIANTS", "build_fold_matrix",
    "consumer_cols", "discover_groups", "doubled_network", "fold_group",
    "fold_network", "identity_assignment", "merge_networks", "merge_rows",
    "permute_group_channels", "producer_rows", "set_consumer_cols",
    "set_producer_rows", "sparsity_to_k", "variant_for", "weight_matching",
]
