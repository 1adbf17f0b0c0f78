"""Automated circuit discovery for small numpy transformers."""
from .acdc import AcdcConfig, DiscoveryResult, acdc_run, log_sweep, prune_disconnected, replay_log, tau_sweep
from .dataset import TaskDataset
from .errors import CircuitKitError, FormatError, UsageError
from .evaluation import (
    edge_confusion, matched_edge_comparison, pessimistic_auc, reset_network, roc_curve, sparsity_curve,
    sparsity_frontier, trapezoid_auc,
)
from .graph import CompGraph, Edge, NodeId, Subgraph, build_graph
from .maskers import SpConfig, hisp_layer_normalize, hisp_scores, hisp_topk_sweep, sp_finalize, sp_train
from .metrics import MetricSpec, eval_metric
from .model import Model, ModelConfig, forward, init_random_model, load_model, save_model
from .patching import IncrementalEvaluator, SubgraphEvaluator, evaluate_subgraph, run_subgraph
from .zoo import TrainConfig, build_task_model, canonical_circuit, gen_dataset, train_induction

__version__ = "0.1.0"
