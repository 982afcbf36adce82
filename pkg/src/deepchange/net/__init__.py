"""Differentiation engine, point-convolution backbones, losses, optimizer."""

from . import autodiff
from .autodiff import Tensor
from .backbone import (
    BackboneConfig,
    DegenerateInputError,
    ForwardOut,
    NetParams,
    Pyramid,
    difference_match,
    encode,
    forward,
    init_params,
    nearest_match,
    point_conv,
    set_prototypes,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .kernel import KernelDisposition, influence, make_kernel
from .optim import GradientNaNError, SgdMomentum, sgd_update


def nll_loss(logits: Tensor, pseudo_labels, weights=None) -> Tensor:
    """Weighted negative log-likelihood, mean over points."""
    return autodiff.nll_loss_op(logits, pseudo_labels, weights)


def contrastive_loss(change_feature: Tensor, y_sim) -> Tensor:
    """Pulls pre-normalization change features toward zero on similar points."""
    return autodiff.contrastive_pull_op(change_feature, y_sim)


def combined_loss(nll: Tensor, contrastive: Tensor) -> Tensor:
    """Arithmetic mean of the two loss terms."""
    return autodiff.scale(autodiff.add(nll, contrastive), 0.5)
