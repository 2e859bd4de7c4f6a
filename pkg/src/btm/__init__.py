"""Balanced training and merging for long-tailed classification.

Builds long-tailed datasets, trains a small MLP classifier, fine-tunes it
on balanced few-shot subsets, merges the fine-tuned weights, and
evaluates worst-category performance via generalized-mean metrics.
"""

from .data import (
    LabeledDataset,
    LongTailSpec,
    SamplerSpec,
    downsample_to_longtail,
    generate_gaussian_mixture,
    imbalance_ratio,
    load_dataset,
    load_idx,
    make_synthetic_problem,
    pareto_longtail_counts,
    sample_balanced_fewshot,
    save_dataset,
    union_datasets,
)
from .merging import (
    LambdaCurve,
    MergeStrategy,
    adaptive_merge,
    average_merge,
    greedy_soup,
    interpolate,
    lambda_sweep,
    merge_models,
)
from .metrics import (
    MetricsReport,
    RecallVector,
    evaluate,
    generalized_mean,
    per_class_recall,
    sanitize_recalls,
)
from .nn import (
    Architecture,
    Checkpoint,
    ParamVector,
    TrainConfig,
    cosine_lr,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    make_checkpoint,
    mixup_batch,
    train,
)
from .pipeline import (
    BtmStage,
    ExperimentRecord,
    StagePlan,
    observation_union_experiment,
    run_btm,
    run_experiment,
    run_fc_stage,
    run_posttrain,
    run_pretrain,
)

__version__ = "0.1.0"
