"""Second-order gradient-boosted regression trees.

Squared-error regression, softmax cross-entropy and focal-loss
classification, with L1/L2 leaf regularization and per-tree column
subsampling. Split search and ensemble traversal run in a compiled kernel
when available (see :mod:`._backend`).
"""
from ._backend import BACKEND, BACKENDS, get_kernels
from .losses import focal_loss_grad, softmax
from .model import (
    BaseLearnerConfig,
    Tree,
    TreeEnsembleModel,
    fit_classifier,
    fit_regressor,
    predict,
    predict_proba,
)

__all__ = [
    "BACKEND",
    "BACKENDS",
    "BaseLearnerConfig",
    "Tree",
    "TreeEnsembleModel",
    "fit_classifier",
    "fit_regressor",
    "focal_loss_grad",
    "get_kernels",
    "predict",
    "predict_proba",
    "softmax",
]
