"""Normalize-then-propagate semi-supervised node classification."""

from .graph import (
    Graph,
    SbmParams,
    SplitSpec,
    homophily,
    load_graph,
    propagation_upper_bound,
    renormalized_adjacency,
    sample_few_shot_split,
    save_graph,
    sbm_generate,
)
from .losses import (
    LossConfig,
    LossReport,
    classification_loss,
    confident_set,
    consistent_metric,
    global_bias,
    homophilous_regularization,
    masked_view_check,
    total_loss,
)
from .model import ForwardCache, Hyper, ModelParams, backward, forward, init_params, predict
from .prototypes import PrototypeSet, min_pairwise_cosine, separation_loss, solve_prototypes
from .tensor import AdamState, SparseMatrix, adam_step, make_rng
from .train import ExperimentSummary, RunResult, TrainConfig, evaluate, run_experiment, train

__version__ = "0.1.0"
