"""Embedding-space augmentation for pair-based metric learning.

Synthetic points are generated by internal division of same-class pairs;
hard negative pair mining over the expanded batch plugs into triplet,
batch-hard triplet, lifted structured, N-pair, and multi-similarity
losses, all with analytic gradients verified against finite differences.
"""

from .data import FeatureDataset, class_disjoint_split, gaussian_blobs, load_feature_csv, save_feature_csv
from .evaluation import (
    MetricsReport,
    bench_generation,
    export_distance_heatmap,
    kmeans,
    nmi,
    pairwise_f1,
    recall_at_k,
    synthetic_label_certainty,
    synthetic_query_robustness,
)
from .geometry import (
    AugmentedBatch,
    EmbeddingBatch,
    SyntheticPointSet,
    expand_batch,
    generate_internal_points,
    l2_normalize_rows,
    normalize_synthetics,
    pairwise_similarity,
    pairwise_sq_distance,
)
from .losses import (
    ExpansionConfig,
    LossConfig,
    LossResult,
    compute_loss,
    expanded_hphn_triplet_loss,
    expanded_lifted_loss,
    expanded_ms_loss,
    expanded_npair_loss,
    expanded_triplet_loss,
    finite_diff_grad,
    hphn_triplet_loss,
    lifted_loss,
    ms_loss,
    npair_loss,
    triplet_loss,
)
from .mining import (
    MiningTrace,
    PairCatalog,
    batch_hard_pairs,
    build_pair_catalog,
    enumerate_positive_pairs,
    hardest_negative_by_distance,
    hardest_negative_by_similarity,
    ms_select_pairs,
    record_selection_ratio,
)
from .trainer import Adam, Embedder, SGD, TrainConfig, load_checkpoint, pk_sample, save_checkpoint, train

__version__ = "0.1.0"
