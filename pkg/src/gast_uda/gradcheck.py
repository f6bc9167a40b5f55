"""Central finite-difference check of the hand-written gradients.

The reference loss is recomputed from scratch for every perturbation: each
cloud is encoded on its own (no padding, no batching) and the losses are
written out from the probabilities, so the check shares only the forward
layers with the code under test.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, net
from .objective import Batch, evaluate_objective
from .ssl import make_distortion_sample, make_rotation_mixup

LOSSES = ("source_ce", "target_st", "rotation", "location", "composite")
SMALL_NET = dict(encoder_widths=(8, 12, 16), head_hidden=(10,), n_classes=4)


@dataclass
class CheckResult:
    loss: str
    instance: int
    max_rel_error: float
    worst_param: str
    n_checked: int
    # coordinates where +h and -h straddled a ReLU or pooling switch
    n_one_sided: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _encode(state, cloud, trace):
    feat, cache = net.encoder_forward(state, cloud)
    if trace is not None:
        trace.extend(z > 0 for z in cache.pre)
        trace.append(cache.argmax)
    return feat


def head_probs(state, head, feat, trace=None) -> np.ndarray:
    h = feat
    n = state.n_layers(head)
    for i in range(n):
        h = h @ state.params[f"{head}.{i}.W"] + state.params[f"{head}.{i}.b"]
        if i < n - 1:
            if trace is not None:
                trace.append(h > 0)
            h = np.maximum(h, 0)
    e = np.exp(h - h.max())
    return e / e.sum()


def _clouds(batch: Batch) -> list:
    return (
        list(batch.source_clouds)
        + list(batch.target_clouds)
        + [s.mixed_cloud for s in batch.mixups]
        + [s.distorted_cloud for s in batch.distortions]
    )


def reference_features(state, batch: Batch, trace=None) -> list:
    """Encoder output of every cloud of the batch, each encoded on its own."""
    return [_encode(state, c, trace) for c in _clouds(batch)]


def reference_loss(state, batch: Batch, lam: float, beta: float, gamma: float, trace=None, features=None) -> float:
    """Independent evaluation of the batch objective.

    If ``trace`` is a list, every ReLU mask and pooling winner is appended to
    it so callers can tell when a perturbation crossed a kink. ``features``
    (from :func:`reference_features`) skips the encoder when only head
    parameters have changed.
    """
    feats = iter(reference_features(state, batch, trace) if features is None else features)

    def _probs(head):
        return head_probs(state, head, next(feats), trace)

    ce = 0.0
    for y in batch.source_labels:
        ce -= np.log(_probs("cls")[y])
    ce /= max(len(batch.source_clouds), 1)
    st = 0.0
    for y in batch.target_labels:
        st += -np.log(_probs("cls")[y]) - gamma
    st /= max(batch.n_target_drawn, 1)
    rot = 0.0
    for s in batch.mixups:
        if state.config.rotation_heads == "joint":
            p = _probs("rot")
            rot -= s.alpha * np.log(p[s.label_a - 1]) + (1 - s.alpha) * np.log(p[s.label_b - 1])
        else:
            feat = next(feats)
            rot -= s.alpha * np.log(head_probs(state, "rot_x", feat, trace)[s.label_a - 1])
            rot -= (1 - s.alpha) * np.log(head_probs(state, "rot_y", feat, trace)[s.label_b - 5])
    rot /= max(len(batch.mixups), 1)
    loc = 0.0
    for s in batch.distortions:
        loc -= s.curvature_cost * np.log(_probs("loc")[s.location_label])
    loc /= max(len(batch.distortions), 1)
    return float(ce + lam * st + beta * (rot + loc))


def random_instance(rng: np.random.Generator, loss: str, rotation_heads: str = "joint"):
    """A small float64 model and a batch exercising ``loss``."""
    state = net.init_model(net.NetConfig(**SMALL_NET, rotation_heads=rotation_heads), rng, dtype=np.float64)

    def cloud():
        m = int(rng.integers(12, 33))
        return geom.normalize_unit_ball(rng.standard_normal((m, 3)))

    C = state.config.n_classes
    batch = Batch()
    if loss in ("source_ce", "composite"):
        batch.source_clouds = [cloud() for _ in range(2)]
        batch.source_labels = list(rng.integers(0, C, 2))
    if loss in ("target_st", "composite"):
        batch.target_clouds = [cloud() for _ in range(2)]
        batch.target_labels = list(rng.integers(0, C, 2))
        batch.n_target_drawn = 3
    if loss in ("rotation", "composite"):
        batch.mixups = [make_rotation_mixup(cloud(), rng) for _ in range(2)]
    if loss in ("location", "composite"):
        batch.distortions = [make_distortion_sample(cloud(), rng, curvature_k=6) for _ in range(2)]
    lam, beta = (0.7, 1.3) if loss == "composite" else (1.0, 1.0)
    return state, batch, lam, beta


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_instance(state, batch, lam, beta, gamma=0.05, h=1e-5, loss="", instance=0) -> CheckResult:
    """Compare analytic gradients with central differences over every used parameter.

    Where the two probes land on different sides of a kink the central
    difference is meaningless; the one-sided difference from the probe that
    keeps the base activation pattern is used instead.
    """
    _, total, grads = evaluate_objective(state, batch, lam, beta, gamma)
    base_trace = []
    ref = reference_loss(state, batch, lam, beta, gamma, base_trace)
    base_feats = reference_features(state, batch)
    # head-only probes reuse the encoder output, so their traces hold head masks only
    head_trace = []
    reference_loss(state, batch, lam, beta, gamma, head_trace, base_feats)
    if abs(total - ref) > 1e-9 * max(1.0, abs(ref)):
        raise AssertionError(f"{loss}: objective {total} disagrees with reference {ref}")
    used = {"enc"}
    if batch.source_clouds or batch.target_clouds:
        used.add("cls")
    if batch.mixups:
        used.update({"rot", "rot_x", "rot_y"})
    if batch.distortions:
        used.add("loc")
    worst, worst_name, n, one_sided = 0.0, "", 0, 0
    for name, p in state.params.items():
        if name.split(".")[0] not in used:
            # the loss does not reach this head, so its gradient must be exactly zero
            if np.any(grads[name]):
                worst, worst_name = float("inf"), name
            continue
        fd = np.zeros_like(p)
        flat, gflat = p.reshape(-1), fd.reshape(-1)
        is_head = not name.startswith("enc.")
        feats = base_feats if is_head else None
        base = head_trace if is_head else base_trace
        for j in range(flat.size):
            orig = flat[j]
            t_up, t_down = [], []
            flat[j] = orig + h
            up = reference_loss(state, batch, lam, beta, gamma, t_up, feats)
            flat[j] = orig - h
            down = reference_loss(state, batch, lam, beta, gamma, t_down, feats)
            flat[j] = orig
            if _same(t_up, t_down):
                gflat[j] = (up - down) / (2 * h)
            else:
                one_sided += 1
                gflat[j] = (up - ref) / h if _same(t_up, base) else (ref - down) / h
        n += flat.size
        err = relative_error(grads[name], fd)
        if err > worst:
            worst, worst_name = err, name
    return CheckResult(loss, instance, worst, worst_name, n, one_sided)


def run_gradcheck(n_instances: int = 20, seed: int = 0, losses=LOSSES, rotation_heads: str = "joint"):
    results = []
    for loss in losses:
        for k in range(n_instances):
            rng = np.random.default_rng([seed, LOSSES.index(loss), k])
            state, batch, lam, beta = random_instance(rng, loss, rotation_heads)
            results.append(check_instance(state, batch, lam, beta, loss=loss, instance=k))
    return results
