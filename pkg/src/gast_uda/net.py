"""Shared point encoder, classifier heads, losses and optimizer, all in plain numpy.

The encoder is a per-point MLP ``3 -> 64 -> 128 -> d`` (ReLU between layers)
followed by a max over points. Each head is a small MLP on the pooled
feature. Forward functions return a cache that the matching backward call
consumes; gradients are computed by hand and checked against finite
differences in the test-suite.

Every loss in the training objective is a weighted negative log-likelihood
``-sum_c w_c log p_c`` of one softmax head, so they all share
:func:`weighted_nll` and differ only in how the weight matrix is built.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .geom import ContractViolation

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass
class NetConfig:
    n_classes: int = 10
    encoder_widths: tuple[int, ...] = (64, 128, 256)
    head_hidden: tuple[int, ...] = (128,)
    n_rot: int = 8
    n_loc: int = 27
    # "joint": one 8-way rotation head; "split": 4-way x head + 4-way y head
    rotation_heads: str = "joint"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.head_hidden = tuple(int(w) for w in self.head_hidden)
        if self.rotation_heads not in ("joint", "split"):
            raise ValueError(f"rotation_heads must be 'joint' or 'split', got {self.rotation_heads!r}")

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]

    def head_outputs(self) -> dict[str, int]:
        if self.rotation_heads == "joint":
            rot = {"rot": self.n_rot}
        else:
            rot = {"rot_x": self.n_rot // 2, "rot_y": self.n_rot // 2}
        return {"cls": self.n_classes, **rot, "loc": self.n_loc}

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        enc = [3, *self.encoder_widths]
        out = {"enc": list(zip(enc[:-1], enc[1:]))}
        for head, n_out in self.head_outputs().items():
            widths = [self.feature_dim, *self.head_hidden, n_out]
            out[head] = list(zip(widths[:-1], widths[1:]))
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for block, layers in self.layer_shapes().items():
            for i, (fan_in, fan_out) in enumerate(layers):
                shapes[f"{block}.{i}.W"] = (fan_in, fan_out)
                shapes[f"{block}.{i}.b"] = (fan_out,)
        return shapes


@dataclass
class ModelState:
    config: NetConfig
    params: dict[str, np.ndarray]
    # bumped on every parameter update so stale forward caches can be detected
    version: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_layers(self, block: str) -> int:
        return len(self.config.layer_shapes()[block])

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.version)


def init_model(config: NetConfig, rng: np.random.Generator, dtype=np.float32) -> ModelState:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    params = {}
    for name, shape in config.param_shapes().items():
        bound = 1.0 / math.sqrt(shape[0] if len(shape) == 2 else _fan_in(config, name))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelState(config, params)


def _fan_in(config: NetConfig, bias_name: str) -> int:
    return config.param_shapes()[bias_name[:-1] + "W"][0]


# ---------------------------------------------------------------- forward


@dataclass
class EncoderCache:
    inputs: np.ndarray  # (B*m, 3)
    pre: list  # pre-activations of the hidden layers
    post: list  # ReLU outputs of the hidden layers
    argmax: np.ndarray  # (B, d) winning point per feature channel
    batch: int
    m: int
    version: int


@dataclass
class HeadCache:
    head: str
    inputs: list  # input of each layer
    pre: list
    version: int


@dataclass
class Prediction:
    logits: np.ndarray
    log_probs: np.ndarray = field(init=False, repr=False)
    probabilities: np.ndarray = field(init=False)

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        self.log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.probabilities = np.exp(self.log_probs)

    @property
    def n_classes(self) -> int:
        return self.logits.shape[-1]


def encoder_forward(state: ModelState, clouds) -> tuple[np.ndarray, EncoderCache]:
    """Encode one ``(m, 3)`` cloud or a ``(B, m, 3)`` batch into pooled features.

    Max pooling breaks ties toward the lowest point index, so padding a cloud
    with copies of its own points never changes the feature or its gradient.
    """
    x = np.asarray(clouds, dtype=state.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected (m, 3) or (B, m, 3) clouds, got {np.shape(clouds)}")
    if x.shape[1] == 1:
        # BLAS takes a gemv path for single rows that rounds differently; a
        # duplicate point keeps every cloud on the gemm path and pools the same
        x = np.repeat(x, 2, axis=1)
    B, m, _ = x.shape
    h = x.reshape(B * m, 3)
    inputs = h
    pre, post = [], []
    n = state.n_layers("enc")
    for i in range(n - 1):
        z = h @ state.params[f"enc.{i}.W"] + state.params[f"enc.{i}.b"]
        pre.append(z)
        h = np.maximum(z, 0)
        post.append(h)
    # last layer laid out (B, d, m) so the pooling argmax runs over a contiguous axis
    W, b = state.params[f"enc.{n - 1}.W"], state.params[f"enc.{n - 1}.b"]
    zt = np.matmul(W.T, h.reshape(B, m, -1).transpose(0, 2, 1))
    argmax = zt.argmax(axis=2)
    feature = np.take_along_axis(zt, argmax[:, :, None], axis=2)[:, :, 0] + b
    cache = EncoderCache(inputs, pre, post, argmax, B, m, state.version)
    return (feature[0] if single else feature), cache


def head_forward(state: ModelState, head: str, feature) -> tuple[Prediction, HeadCache]:
    feature = np.asarray(feature, dtype=state.dtype)
    d = state.config.feature_dim
    if feature.shape[-1] != d:
        raise ValueError(f"head {head!r} expects {d}-dim features, got {feature.shape[-1]}")
    h = feature
    inputs, pre = [], []
    n = state.n_layers(head)
    for i in range(n):
        inputs.append(h)
        z = h @ state.params[f"{head}.{i}.W"] + state.params[f"{head}.{i}.b"]
        if i < n - 1:
            pre.append(z)
            h = np.maximum(z, 0)
    return Prediction(z), HeadCache(head, inputs, pre, state.version)


def predict(state: ModelState, clouds, head: str = "cls", chunk: int = 64) -> np.ndarray:
    """Class probabilities for a ``(N, m, 3)`` stack, evaluated in chunks."""
    clouds = np.asarray(clouds)
    out = []
    for start in range(0, len(clouds), chunk):
        feat, _ = encoder_forward(state, clouds[start : start + chunk])
        out.append(head_forward(state, head, feat)[0].probabilities)
    return np.concatenate(out) if out else np.zeros((0, state.config.head_outputs()[head]))


# ---------------------------------------------------------------- losses


def weighted_nll(pred: Prediction, weights) -> tuple[float, np.ndarray]:
    """Return ``-sum(weights * log p)`` and its gradient with respect to the logits.

    ``log p`` is floored at ``log(1e-12)`` in the value; the gradient is that of
    the unfloored softmax log-likelihood.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != pred.log_probs.shape:
        raise ValueError(f"weights shape {w.shape} does not match predictions {pred.log_probs.shape}")
    value = -float((w * np.maximum(pred.log_probs, _LOG_FLOOR)).sum())
    dlogits = w.sum(axis=-1, keepdims=True) * pred.probabilities - w
    return value, dlogits


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _batch_shape(pred: Prediction, w: np.ndarray) -> np.ndarray:
    # single predictions carry 1-d probabilities; weights are built 2-d
    return w[0] if pred.log_probs.ndim == 1 else w


def cross_entropy_weights(labels, n_classes: int) -> np.ndarray:
    w = one_hot(labels, n_classes)
    return w / max(len(w), 1)


def rotation_mixup_weights(alpha, label_a, label_b, n_rot: int = 8) -> np.ndarray:
    """Mean-normalized mixup weights; labels use the 1..8 convention."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    w = alpha[:, None] * one_hot(np.asarray(label_a) - 1, n_rot)
    w += (1.0 - alpha)[:, None] * one_hot(np.asarray(label_b) - 1, n_rot)
    return w / len(w)


def location_weights(cell, cost, n_loc: int) -> np.ndarray:
    cost = np.atleast_1d(np.asarray(cost, dtype=np.float64))
    w = cost[:, None] * one_hot(cell, n_loc)
    return w / len(w)


def cross_entropy(pred: Prediction, label) -> float:
    """Mean ``-log p_label`` (single prediction or batch)."""
    w = cross_entropy_weights(label, pred.n_classes)
    return weighted_nll(pred, _batch_shape(pred, w))[0]


def rotation_mixup_loss(pred: Prediction, sample) -> float:
    """``-(alpha log p[a] + (1 - alpha) log p[b])`` averaged over samples.

    ``sample`` is a :class:`~gast.ssl.RotationMixupSample` or a list of them.
    """
    samples = sample if isinstance(sample, (list, tuple)) else [sample]
    w = rotation_mixup_weights(
        [s.alpha for s in samples], [s.label_a for s in samples], [s.label_b for s in samples], pred.n_classes
    )
    return weighted_nll(pred, _batch_shape(pred, w))[0]


def location_loss(pred: Prediction, sample) -> float:
    """Curvature-cost weighted ``-c log p[cell]`` averaged over samples."""
    samples = sample if isinstance(sample, (list, tuple)) else [sample]
    w = location_weights(
        [s.location_label for s in samples], [s.curvature_cost for s in samples], pred.n_classes
    )
    return weighted_nll(pred, _batch_shape(pred, w))[0]


# ---------------------------------------------------------------- backward


def zero_grads(state: ModelState) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in state.params.items()}


def _check_fresh(state: ModelState, cache) -> None:
    if cache.version != state.version:
        raise ContractViolation(
            f"cache from parameter version {cache.version} used with version {state.version}"
        )


def head_backward(state: ModelState, cache: HeadCache, dlogits, grads: dict) -> np.ndarray:
    """Accumulate head parameter gradients into ``grads``; return d(loss)/d(feature)."""
    _check_fresh(state, cache)
    head = cache.head
    dz = np.asarray(dlogits, dtype=state.dtype)
    single = dz.ndim == 1
    for i in reversed(range(len(cache.inputs))):
        x = cache.inputs[i]
        if single:
            grads[f"{head}.{i}.W"] += np.outer(x, dz)
        else:
            grads[f"{head}.{i}.W"] += x.T @ dz
        grads[f"{head}.{i}.b"] += dz if single else dz.sum(axis=0)
        dx = dz @ state.params[f"{head}.{i}.W"].T
        if i > 0:
            dz = dx * (cache.pre[i - 1] > 0)
    return dx


def encoder_backward(state: ModelState, cache: EncoderCache, dfeature, grads: dict) -> None:
    """Accumulate encoder parameter gradients for an upstream ``(B, d)`` feature gradient.

    Only the winning point of each channel receives gradient from the pooling;
    the last layer's weight gradient is gathered from those points directly.
    """
    _check_fresh(state, cache)
    B, m = cache.batch, cache.m
    g = np.asarray(dfeature, dtype=state.dtype).reshape(B, -1)
    last = state.n_layers("enc") - 1
    W = state.params[f"enc.{last}.W"]
    h_prev = cache.post[-1] if last > 0 else cache.inputs
    rows = (np.arange(B)[:, None] * m + cache.argmax).ravel()  # (B*d,)
    winners = h_prev[rows].reshape(B, -1, h_prev.shape[1])  # (B, d, h)
    grads[f"enc.{last}.W"] += np.einsum("bdh,bd->hd", winners, g)
    grads[f"enc.{last}.b"] += g.sum(axis=0)
    if last == 0:
        return
    # (B*m, d) pooling Jacobian with one non-zero per (cloud, channel)
    d = g.shape[1]
    scatter = sparse.csr_matrix((g.ravel(), (rows, np.tile(np.arange(d), B))), shape=(B * m, d))
    dh = np.asarray(scatter @ W.T, dtype=state.dtype)
    for i in reversed(range(last)):
        dz = dh * (cache.pre[i] > 0)
        x = cache.post[i - 1] if i > 0 else cache.inputs
        grads[f"enc.{i}.W"] += x.T @ dz
        grads[f"enc.{i}.b"] += dz.sum(axis=0)
        if i > 0:
            dh = dz @ state.params[f"enc.{i}.W"].T


def backward(state: ModelState, enc_cache: EncoderCache, terms) -> dict[str, np.ndarray]:
    """Parameter gradients of a sum of head losses sharing one encoder pass.

    ``terms`` is a sequence of ``(head_cache, dlogits, rows)`` where ``rows``
    selects the encoder batch entries fed to that head (``None`` for all).
    """
    grads = zero_grads(state)
    dfeat = np.zeros((enc_cache.batch, state.config.feature_dim), dtype=state.dtype)
    for head_cache, dlogits, rows in terms:
        df = head_backward(state, head_cache, dlogits, grads)
        if rows is None:
            dfeat += df.reshape(dfeat.shape)
        else:
            np.add.at(dfeat, rows, df)
    encoder_backward(state, enc_cache, dfeat, grads)
    return grads


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    base_lr: float = 1e-3
    weight_decay: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def init_optimizer(state: ModelState, base_lr: float = 1e-3, weight_decay: float = 5e-5) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in state.params.items()},
        v={k: np.zeros_like(p) for k, p in state.params.items()},
        base_lr=base_lr,
        weight_decay=weight_decay,
    )


def adam_step(state: ModelState, opt: OptimizerState, grads: dict, lr: float) -> ModelState:
    """Adam with bias correction and decoupled weight decay, applied in place."""
    for k, g in grads.items():
        if g.shape != state.params[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter {state.params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}; update rejected")
    b1, b2 = opt.betas
    opt.step += 1
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for k, p in state.params.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        update = lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
        p -= (update + lr * opt.weight_decay * p).astype(p.dtype)
    state.version += 1
    return state


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GASTCKP1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


def save_checkpoint(path, state: ModelState, extra: dict | None = None) -> None:
    """Write ``magic | u32 header length | JSON header | float32 LE parameter blob``."""
    header = {
        "format_version": CKPT_VERSION,
        "config": asdict(state.config),
        "shapes": [[k, list(v.shape)] for k, v in state.params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in state.params.values())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_checkpoint(path) -> tuple[ModelState, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic", 0)
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError("truncated header length", pos)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + n:
        raise CheckpointError("truncated header", pos)
    try:
        header = json.loads(raw[pos : pos + n])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}", pos) from None
    pos += n
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}", len(CKPT_MAGIC) + 4)
    config = NetConfig(**header["config"])
    expected = config.param_shapes()
    shapes = [(k, tuple(s)) for k, s in header["shapes"]]
    if shapes != list(expected.items()):
        raise CheckpointError("shape table does not match the recorded network config", len(CKPT_MAGIC) + 4)
    params = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        if len(raw) < pos + 4 * count:
            raise CheckpointError(f"truncated parameter blob in {name}", pos)
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after parameter blob", pos)
    return ModelState(config, params), header
