"""Counterfactual link prediction on undirected graphs.

Pipeline: binary structural pair treatments, nearest-neighbor
counterfactual matching under a distance budget, a treatment-aware
graph encoder + pair decoder trained on factual and counterfactual
link existence with a distribution-balancing penalty, and ranking /
treatment-effect evaluation.
"""

from ._accel import JIT_ENABLED
from .graph import (
    EdgeSplit,
    Graph,
    TrainBatch,
    load_edge_list,
    load_features,
    load_split,
    sample_negatives,
    save_edge_list,
    save_split,
    split_edges,
)
from .embed import (
    EmbeddingMatrix,
    laplacian_eigenmap,
    load_embeddings,
    save_embeddings,
)
from .matching import (
    CounterfactualTable,
    MatchConfig,
    build_counterfactual_table,
    find_counterfactual,
    gamma_from_percentile,
)
from .metrics import (
    MetricsReport,
    aggregate_reports,
    ate_estimated,
    ate_observed,
    auc,
    average_precision,
    hits_at_k,
    kendall_tau,
)
from .nn import (
    GraphOperators,
    ModelParams,
    init_params,
    load_params,
    normalize_adjacency,
    save_params,
)
from .pipeline import RunConfig, compare_treatments, run_pipeline
from .training import (
    TrainConfig,
    bce_with_logits,
    cyclical_lr,
    disc_loss,
    finetune_decoder,
    predict,
    train_model,
)
from .treatments import (
    TreatmentAssignment,
    commn_treatment,
    katz_treatment,
    kcore_treatment,
    louvain_treatment,
    make_treatment,
    modularity,
    propc_treatment,
    save_labels,
    spectral_treatment,
)

__version__ = "0.1.0"
