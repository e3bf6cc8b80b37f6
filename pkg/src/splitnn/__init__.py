"""splitnn: correlation-clustered split neural networks for tabular data
with missing values.

Pipeline: ingest a delimited file with missing-value markers, cluster
statistically correlated features by complete-linkage hierarchical
clustering on Pearson correlation distance, train a proportionally split
network with a joint loss on mean-imputed inputs, and evaluate with
nested cross-validation or the missing-feature robustness protocol.
"""

from .clustering import (
    ABSOLUTE,
    SIGNED,
    Dendrogram,
    DistanceMatrix,
    FeatureClustering,
    complete_linkage,
    correlation_distance,
    cut_dendrogram,
    fraction_for_k,
    trivial_clustering,
)
from .data import (
    CLASSIFICATION,
    REGRESSION,
    ColumnStats,
    Dataset,
    FoldPlan,
    Schema,
    assign_folds,
    denormalize,
    fit_column_stats,
    impute_and_normalize,
    load_dataset,
    make_fold_plan,
    parse_schema,
)
from .experiments import (
    ExperimentReport,
    TrainedModel,
    aggregate_report,
    double_cross_validate,
    fit_clustering,
    robustness_experiment,
    train_model,
)
from .network import (
    FUSED,
    PER_BRANCH,
    DenseLayer,
    SplitNetwork,
    TrainConfig,
    allocate_hidden,
    backward_and_step,
    build_split_network,
    build_vanilla_network,
    evaluate,
    forward,
    gradient_check,
    joint_loss,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_network,
)

__version__ = "0.1.0"
