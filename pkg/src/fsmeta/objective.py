"""Fit loss, generalization loss and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import functional as F
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")


def nll(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise log-probabilities."""
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(labels, log_probs.shape[1])
    return F.mul(F.mean(F.pick(log_probs, labels)), -1.0)


def fit_loss(aux_logits: Tensor, labels) -> Tensor:
    """Mean multi-class cross-entropy of the auxiliary head on the support set.

    With two classes this is the binary cross-entropy averaged over samples.
    """
    return nll(F.log_softmax(aux_logits), labels)


def generalization_loss(log_post: Tensor, query_labels) -> Tensor:
    """Mean ``-log p(true class)`` over query points, from log-posteriors."""
    return nll(log_post, query_labels)


def balance_loss(l_g: Tensor, l_ce: Tensor, cfg: LossConfig) -> Tensor:
    """``l_g + lambda * l_ce``; with lambda = 0 the fit term is left out of the graph."""
    if cfg.lam == 0.0:
        return l_g
    return F.add(l_g, F.mul(l_ce, cfg.lam))
