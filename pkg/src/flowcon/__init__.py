"""Density-estimation toolkit: a coupling flow with a likelihood-contrastive
objective over fixed feature embeddings, plus OOD scoring and evaluation."""

from .datasets import FeatureDataset, gen_blobs, gen_moons, read_features, write_features
from .evalmetrics import EvalReport, ScoredSets, aupr, auroc, evaluate_suite, fpr_at_tpr
from .flow import FlowModel, FlowOutput, flow_forward, flow_inverse, init_model
from .loss import BatchLatent, LossConfig, contrastive_loss, flow_nll, gaussian_logpdf, total_loss
from .ndcore import Graph, Tensor, evaluate, finite_diff_grad, gradients
from .oodscore import ClassPrototypes, classify, compute_prototypes, ood_score
from .train import AdamState, TrainConfig, adam_step, fit, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BatchLatent", "ClassPrototypes", "EvalReport", "FeatureDataset",
    "FlowModel", "FlowOutput", "Graph", "LossConfig", "ScoredSets", "Tensor",
    "TrainConfig", "adam_step", "aupr", "auroc", "classify", "compute_prototypes",
    "contrastive_loss", "evaluate", "evaluate_suite", "finite_diff_grad", "fit",
    "flow_forward", "flow_inverse", "flow_nll", "fpr_at_tpr", "gaussian_logpdf",
    "gen_blobs", "gen_moons", "gradients", "init_model", "ood_score", "read_features",
    "total_loss", "train_epoch", "write_features",
]
