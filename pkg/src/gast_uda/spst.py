"""Self-paced self-training: pseudo-label selection and the target-domain objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .net import PROB_FLOOR


@dataclass
class PseudoLabelTable:
    assigned: np.ndarray  # (n_t,) bool
    label: np.ndarray  # (n_t,) int, -1 where unassigned
    confidence: np.ndarray  # (n_t,) max predicted probability

    def __len__(self) -> int:
        return len(self.assigned)

    @property
    def n_assigned(self) -> int:
        return int(self.assigned.sum())

    def accuracy(self, truth) -> float:
        """Fraction of assigned labels matching ``truth`` (nan when nothing is assigned)."""
        if not self.n_assigned:
            return float("nan")
        truth = np.asarray(truth)
        return float((self.label[self.assigned] == truth[self.assigned]).mean())


@dataclass
class SpstConfig:
    gamma: float = 0.05
    lambda_warmup_epochs: int = 12
    lambda_ramp_epochs: int = 12

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.lambda_warmup_epochs < 0 or self.lambda_ramp_epochs < 0:
            raise ValueError("lambda warmup/ramp must be non-negative")


def selection_threshold(gamma: float) -> float:
    return math.exp(-gamma)


def assign_pseudo_labels(probabilities, gamma: float = 0.05) -> PseudoLabelTable:
    """One-hot pseudo label at the argmax wherever the top probability exceeds ``exp(-gamma)``.

    This is the exact minimiser, per sample, of
    ``-(sum_c y_c log p_c + gamma * |y|_1)`` over the one-hot vectors and the
    zero vector. Argmax ties go to the lowest class index.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 1:
        raise ValueError(f"expected an (n, C) probability matrix, got shape {p.shape}")
    if p.size and (
        not np.all(np.isfinite(p)) or p.min() < 0 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6
    ):
        raise ValueError("each row must be a probability vector summing to 1")
    label = p.argmax(axis=1)
    confidence = p[np.arange(len(p)), label]
    assigned = confidence > selection_threshold(gamma)
    return PseudoLabelTable(assigned, np.where(assigned, label, -1), confidence)


def target_self_training_loss(probabilities, table: PseudoLabelTable, gamma: float = 0.05) -> float:
    """``(1/n_t) * sum over assigned samples of (-log p_label - gamma)``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if len(p) != len(table):
        raise ValueError(f"{len(p)} predictions for a table of {len(table)}")
    if not len(p):
        return 0.0
    idx = np.flatnonzero(table.assigned)
    picked = np.maximum(p[idx, table.label[idx]], PROB_FLOOR)
    return float((-np.log(picked) - gamma).sum() / len(p))


def lambda_schedule(epoch: int, config: SpstConfig) -> float:
    """0 during warm-up, then a linear ramp up to 1."""
    if epoch < config.lambda_warmup_epochs:
        return 0.0
    if config.lambda_ramp_epochs == 0:
        return 1.0
    return min(1.0, (epoch - config.lambda_warmup_epochs) / config.lambda_ramp_epochs)


def semantic_loss(source_ce: float, target_st: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return source_ce + lam * target_st
