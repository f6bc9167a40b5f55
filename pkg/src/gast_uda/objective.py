"""Assembly of the joint objective for one mini-batch.

    total = source CE + lam * target self-training + beta * (rotation + location)

All groups of a batch go through the encoder in a single padded pass; each
head sees only its own rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .ssl import DistortionSample, RotationMixupSample

PARTS = ("source_ce", "target_st", "rot_loss", "loc_loss")


@dataclass
class Batch:
    source_clouds: list = field(default_factory=list)
    source_labels: list = field(default_factory=list)
    # assigned target clouds and their pseudo labels
    target_clouds: list = field(default_factory=list)
    target_labels: list = field(default_factory=list)
    # number of target clouds drawn, assigned or not (normalizes the target term)
    n_target_drawn: int = 0
    mixups: list = field(default_factory=list)  # RotationMixupSample
    distortions: list = field(default_factory=list)  # DistortionSample


def pad_stack(clouds) -> np.ndarray:
    """Stack clouds of unequal size by cycling each through its own points.

    Max pooling is unaffected by the repeats and, with lowest-index
    tie-breaking, so is its gradient.
    """
    m = max(len(c) for c in clouds)
    return np.stack([np.asarray(c)[np.arange(m) % len(c)] for c in clouds])


def evaluate_objective(
    state: net.ModelState, batch: Batch, lam: float, beta: float, gamma: float, grad: bool = True
):
    """Return ``(parts, total, grads)``; ``grads`` is None when ``grad`` is False."""
    cfg = state.config
    groups, clouds = {}, []
    for name, items in (
        ("src", batch.source_clouds),
        ("tgt", batch.target_clouds),
        ("rot", [s.mixed_cloud for s in batch.mixups]),
        ("loc", [s.distorted_cloud for s in batch.distortions]),
    ):
        groups[name] = np.arange(len(clouds), len(clouds) + len(items))
        clouds.extend(items)
    parts = dict.fromkeys(PARTS, 0.0)
    if not clouds:
        return parts, 0.0, (net.zero_grads(state) if grad else None)

    feat, enc_cache = net.encoder_forward(state, pad_stack(clouds))
    terms = []

    def head(name, rows, weights, scale):
        pred, hc = net.head_forward(state, name, feat[rows])
        value, d = net.weighted_nll(pred, weights)
        terms.append((hc, scale * d, rows))
        return value

    if len(batch.source_clouds):
        w = net.cross_entropy_weights(batch.source_labels, cfg.n_classes)
        parts["source_ce"] = head("cls", groups["src"], w, 1.0)

    if len(batch.target_clouds):
        n = batch.n_target_drawn or len(batch.target_clouds)
        w = net.one_hot(batch.target_labels, cfg.n_classes) / n
        parts["target_st"] = head("cls", groups["tgt"], w, lam) - gamma * len(batch.target_clouds) / n

    if batch.mixups:
        alpha = np.array([s.alpha for s in batch.mixups])
        la = np.array([s.label_a for s in batch.mixups])
        lb = np.array([s.label_b for s in batch.mixups])
        rows = groups["rot"]
        if cfg.rotation_heads == "joint":
            parts["rot_loss"] = head("rot", rows, net.rotation_mixup_weights(alpha, la, lb, cfg.n_rot), beta)
        else:
            half = cfg.n_rot // 2
            k = len(alpha)
            parts["rot_loss"] = head("rot_x", rows, alpha[:, None] * net.one_hot(la - 1, half) / k, beta) + head(
                "rot_y", rows, (1 - alpha)[:, None] * net.one_hot(lb - 5, half) / k, beta
            )

    if batch.distortions:
        w = net.location_weights(
            [s.location_label for s in batch.distortions], [s.curvature_cost for s in batch.distortions], cfg.n_loc
        )
        parts["loc_loss"] = head("loc", groups["loc"], w, beta)

    total = parts["source_ce"] + lam * parts["target_st"] + beta * (parts["rot_loss"] + parts["loc_loss"])
    grads = net.backward(state, enc_cache, terms) if grad else None
    return parts, total, grads
