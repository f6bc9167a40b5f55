"""
Self-paced pseudo labels
========================

A target sample receives the argmax class as its label only when the top
probability exceeds exp(-gamma); otherwise it stays out of the loss. This is
the exact per-sample minimiser of the self-training objective.
"""

import math

import numpy as np

from gast_uda import spst

probs = np.array([[0.7, 0.2, 0.1], [0.96, 0.03, 0.01], [0.02, 0.97, 0.01], [0.5, 0.49, 0.01]])
for gamma in (0.05, 0.5, math.log(2)):
    t = spst.assign_pseudo_labels(probs, gamma)
    print(f"gamma {gamma:.3f} threshold {spst.selection_threshold(gamma):.4f} labels {t.label.tolist()}")

t = spst.assign_pseudo_labels(probs, 0.05)
print("target loss", spst.target_self_training_loss(probs, t, 0.05))

# larger gamma admits a superset of samples
rng = np.random.default_rng(0)
z = rng.standard_normal((2000, 6)) * 4
p = np.exp(z - z.max(axis=1, keepdims=True))
p /= p.sum(axis=1, keepdims=True)
for gamma in (0.01, 0.05, 0.2, 0.5):
    print(f"gamma {gamma}: {spst.assign_pseudo_labels(p, gamma).n_assigned} of 2000 assigned")

cfg = spst.SpstConfig(lambda_warmup_epochs=12, lambda_ramp_epochs=12)
print("lambda by epoch", [round(spst.lambda_schedule(e, cfg), 2) for e in range(0, 30, 3)])
