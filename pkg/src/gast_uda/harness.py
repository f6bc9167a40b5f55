"""Training loop for the joint objective, evaluation and ablation reporting.

Per epoch the loop refreshes the pseudo-label table over the clean target
training clouds, then walks shuffled source batches. Each step also draws an
equal number of target clouds; the assigned ones enter the target term and
every drawn cloud (source and target) contributes one rotation-mixup and one
distortion sample to the geometric terms. One Adam step is taken per batch on

    source CE + lambda * target self-training + beta * (rotation + location)

All randomness comes from generators keyed by ``(seed, epoch, stream, ...)``
so a run is reproducible bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, net, spst
from .data import Split, load_split
from .objective import Batch, evaluate_objective
from .ssl import make_distortion_sample, make_rotation_mixups

log = logging.getLogger(__name__)

# RNG stream ids
_INIT, _SPLIT, _SHUFFLE_SRC, _SHUFFLE_TGT, _AUG_SRC, _AUG_TGT, _MIXUP, _DISTORT = range(8)

METRIC_FIELDS = [
    "epoch",
    "lr",
    "lambda",
    "source_ce",
    "target_st",
    "rot_loss",
    "loc_loss",
    "total_loss",
    "assigned",
    "mean_confidence",
    "pseudo_label_acc",
    "source_val_acc",
    "source_test_acc",
    "target_test_acc",
]
BATCH_FIELDS = ["epoch", "step", "lambda", "beta", "source_ce", "target_st", "rot_loss", "loc_loss", "total_loss"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 5e-5
    beta: float = 1.0
    gamma: float = 0.05
    # None -> 20% of epochs each
    lambda_warmup_epochs: int | None = None
    lambda_ramp_epochs: int | None = None
    encoder_widths: tuple = (64, 128, 256)
    head_hidden: tuple = (128,)
    rotation_heads: str = "joint"
    grid_k: int = 3
    alpha_range: tuple = (0.1, 0.9)
    distortion_sigma: float = 0.05
    curvature_k: int = 16
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    val_fraction: float = 0.1
    seed: int = 0
    use_spst: bool = True
    use_rot: bool = True
    use_loc: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.head_hidden = tuple(self.head_hidden)
        self.alpha_range = tuple(self.alpha_range)
        for name in ("epochs", "batch_size", "base_lr", "gamma", "grid_k", "curvature_k", "distortion_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.weight_decay < 0:
            raise ValueError("beta and weight_decay must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        sp = self.spst_config()
        if sp.lambda_warmup_epochs + sp.lambda_ramp_epochs > self.epochs:
            raise ValueError("lambda warmup + ramp exceeds the number of epochs")

    def spst_config(self) -> spst.SpstConfig:
        warm = self.lambda_warmup_epochs
        ramp = self.lambda_ramp_epochs
        return spst.SpstConfig(
            gamma=self.gamma,
            lambda_warmup_epochs=round(0.2 * self.epochs) if warm is None else warm,
            lambda_ramp_epochs=round(0.2 * self.epochs) if ramp is None else ramp,
        )

    @property
    def rot_active(self) -> bool:
        return self.use_rot and self.beta > 0

    @property
    def loc_active(self) -> bool:
        return self.use_loc and self.beta > 0

    @property
    def variant(self) -> str:
        return variant_name(self.use_spst, self.rot_active, self.loc_active)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_config(**overrides) -> TrainConfig:
    """The desk-scale default profile: 60 epochs, otherwise the standard defaults."""
    return TrainConfig(**{"epochs": 60, **overrides})


VARIANTS = {
    "w/o Adapt": dict(use_spst=False, use_rot=False, use_loc=False),
    "SPST": dict(use_spst=True, use_rot=False, use_loc=False),
    "RotCls": dict(use_spst=False, use_rot=True, use_loc=False),
    "LocCls": dict(use_spst=False, use_rot=False, use_loc=True),
    "Rot+Loc": dict(use_spst=False, use_rot=True, use_loc=True),
    "SPST+RotCls": dict(use_spst=True, use_rot=True, use_loc=False),
    "SPST+LocCls": dict(use_spst=True, use_rot=False, use_loc=True),
    "GAST": dict(use_spst=True, use_rot=True, use_loc=True),
}
REPORT_ROWS = ["w/o Adapt", "SPST", "RotCls", "LocCls", "Rot+Loc", "GAST"]


def variant_name(use_spst: bool, use_rot: bool, use_loc: bool) -> str:
    key = dict(use_spst=bool(use_spst), use_rot=bool(use_rot), use_loc=bool(use_loc))
    return next(name for name, flags in VARIANTS.items() if flags == key)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def net_config(config: TrainConfig, n_classes: int) -> net.NetConfig:
    return net.NetConfig(
        n_classes=n_classes,
        encoder_widths=config.encoder_widths,
        head_hidden=config.head_hidden,
        n_loc=config.grid_k**3,
        rotation_heads=config.rotation_heads,
    )


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, validation) index split of the source training set."""
    perm = _rng(seed, _SPLIT).permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def accuracy(state: net.ModelState, split: Split) -> float:
    if not len(split):
        return float("nan")
    pred = net.predict(state, split.clouds).argmax(axis=1)
    return float((pred == split.labels).mean())


@dataclass
class TrainResult:
    out_dir: Path
    state: net.ModelState
    metrics: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, fields: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


class Trainer:
    """Data, model and optimizer of one run; :func:`train` drives it epoch by epoch."""

    def __init__(self, config: TrainConfig, source_dir, target_dir):
        self.config = config
        src_train = load_split(source_dir, "train")
        self.source_test = load_split(source_dir, "test")
        self.target_test = load_split(target_dir, "test", diagnostic=True)
        self.classes = src_train.classes
        if self.target_test.classes != self.classes:
            raise ValueError("source and target manifests disagree on classes")
        tr, va = holdout_split(len(src_train), config.val_fraction, config.seed)
        self.source_train = Split(src_train.clouds[tr], src_train.labels[tr], self.classes)
        self.source_val = Split(src_train.clouds[va], src_train.labels[va], self.classes)
        # target-train labels are hidden from training; only the diagnostic
        # pseudo-label accuracy column reads them
        self.target_train = load_split(target_dir, "train")
        self._target_truth = load_split(target_dir, "train", diagnostic=True).labels

        self.netcfg = net_config(config, len(self.classes))
        self.state = net.init_model(self.netcfg, _rng(config.seed, _INIT))
        self.opt = net.init_optimizer(self.state, config.base_lr, config.weight_decay)
        self.spst = config.spst_config()
        self._curvature = {}
        self.batch_log: list = []

    # -- sample construction

    def _curv(self, domain: int, i: int, cloud) -> np.ndarray:
        key = (domain, i)
        if key not in self._curvature:
            self._curvature[key] = geom.pca_curvature(cloud, self.config.curvature_k)
        return self._curvature[key]

    def _jitter(self, cloud, rng):
        return geom.jitter(cloud, rng, self.config.jitter_sigma, self.config.jitter_clip)

    def _ssl_samples(self, epoch: int, drawn):
        """Mixup and distortion samples for ``drawn = [(domain, index, cloud), ...]``."""
        cfg = self.config
        mixes, dists = [], []
        if cfg.rot_active:
            rngs = [_rng(cfg.seed, epoch, _MIXUP, dom, i) for dom, i, _ in drawn]
            mixes = make_rotation_mixups([c for _, _, c in drawn], rngs, cfg.alpha_range)
        if cfg.loc_active:
            dists = [
                make_distortion_sample(
                    cloud,
                    _rng(cfg.seed, epoch, _DISTORT, dom, i),
                    cfg.grid_k,
                    cfg.distortion_sigma,
                    curvature=self._curv(dom, i, cloud),
                )
                for dom, i, cloud in drawn
            ]
        return mixes, dists

    # -- one optimization step

    def make_batch(self, epoch: int, src_ids, tgt_ids, table) -> Batch:
        cfg = self.config
        batch = Batch(
            source_clouds=[
                self._jitter(self.source_train.clouds[i], _rng(cfg.seed, epoch, _AUG_SRC, i)) for i in src_ids
            ],
            source_labels=self.source_train.labels[src_ids],
            n_target_drawn=len(tgt_ids),
        )
        if cfg.use_spst:
            for i in tgt_ids:
                if not table.assigned[i]:
                    continue
                rng = _rng(cfg.seed, epoch, _AUG_TGT, i)
                cloud = geom.rotate_z(self.target_train.clouds[i], rng.uniform(0, 2 * np.pi))
                batch.target_clouds.append(self._jitter(cloud, rng))
                batch.target_labels.append(table.label[i])
        if cfg.rot_active or cfg.loc_active:
            drawn = [(0, i, self.source_train.clouds[i]) for i in src_ids]
            drawn += [(1, i, self.target_train.clouds[i]) for i in tgt_ids]
            batch.mixups, batch.distortions = self._ssl_samples(epoch, drawn)
        return batch

    def step(self, epoch: int, step: int, src_ids, tgt_ids, table, lr: float, lam: float) -> dict:
        cfg = self.config
        batch = self.make_batch(epoch, src_ids, tgt_ids, table)
        parts, total, grads = evaluate_objective(self.state, batch, lam, cfg.beta, cfg.gamma)
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {parts}")
        net.adam_step(self.state, self.opt, grads, lr)
        row = {"epoch": epoch, "step": step, "lambda": lam, "beta": cfg.beta, **parts, "total_loss": total}
        self.batch_log.append(row)
        return row

    # -- epochs

    def refresh_pseudo_labels(self) -> spst.PseudoLabelTable:
        probs = net.predict(self.state, self.target_train.clouds)
        if not np.all(np.isfinite(probs)):
            raise TrainingError("non-finite target predictions while refreshing pseudo labels")
        return spst.assign_pseudo_labels(probs, self.spst.gamma)

    def run_epoch(self, epoch: int) -> dict:
        cfg = self.config
        lr = net.cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        lam = spst.lambda_schedule(epoch, self.spst) if cfg.use_spst else 0.0
        table = self.refresh_pseudo_labels() if cfg.use_spst else None

        n_src, n_tgt, B = len(self.source_train), len(self.target_train), cfg.batch_size
        src_perm = _rng(cfg.seed, epoch, _SHUFFLE_SRC).permutation(n_src)
        tgt_perm = _rng(cfg.seed, epoch, _SHUFFLE_TGT).permutation(n_tgt)
        draw_target = cfg.use_spst or cfg.rot_active or cfg.loc_active
        rows = []
        for step, start in enumerate(range(0, n_src, B)):
            src_ids = src_perm[start : start + B]
            tgt_ids = tgt_perm[np.arange(start, start + len(src_ids)) % n_tgt] if draw_target else []
            try:
                rows.append(self.step(epoch, step, src_ids, tgt_ids, table, lr, lam))
            except TrainingError:
                self._dump_batch(epoch, step, src_ids, tgt_ids)
                raise

        mean = {k: float(np.mean([r[k] for r in rows])) for k in ("source_ce", "target_st", "rot_loss", "loc_loss", "total_loss")}
        return {
            "epoch": epoch,
            "lr": lr,
            "lambda": lam,
            **mean,
            "assigned": table.n_assigned if table is not None else 0,
            "mean_confidence": float(table.confidence.mean()) if table is not None else float("nan"),
            "pseudo_label_acc": table.accuracy(self._target_truth) if table is not None else float("nan"),
            "source_val_acc": accuracy(self.state, self.source_val),
            "source_test_acc": accuracy(self.state, self.source_test),
            "target_test_acc": accuracy(self.state, self.target_test),
        }

    dump_dir: Path | None = None

    def _dump_batch(self, epoch, step, src_ids, tgt_ids):
        if self.dump_dir is None:
            return
        path = self.dump_dir / f"diverged_e{epoch}_s{step}.npz"
        np.savez(
            path,
            source_ids=np.asarray(src_ids),
            target_ids=np.asarray(tgt_ids),
            source_clouds=self.source_train.clouds[np.asarray(src_ids, dtype=int)],
            **{f"param_{k}": v for k, v in self.state.params.items()},
        )
        log.error("non-finite loss; batch dumped to %s", path)


def train(config: TrainConfig, source_dir, target_dir, out_dir) -> TrainResult:
    """Train one run and write ``metrics.csv``, ``batches.csv``, checkpoints and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    tr = Trainer(config, source_dir, target_dir)
    tr.dump_dir = out
    extra = {"classes": tr.classes, "train_config": config.to_dict()}
    best_val, best_epoch, best_target = -1.0, -1, float("nan")
    metrics = []
    for epoch in range(config.epochs):
        row = tr.run_epoch(epoch)
        metrics.append(row)
        log.info(
            "[%s seed %d] epoch %d ce %.4f tot %.4f assigned %d src %.3f tgt %.3f",
            config.variant, config.seed, epoch, row["source_ce"], row["total_loss"],
            row["assigned"], row["source_test_acc"], row["target_test_acc"],
        )
        if row["source_val_acc"] >= best_val:
            best_val, best_epoch, best_target = row["source_val_acc"], epoch, row["target_test_acc"]
            net.save_checkpoint(out / "best.ckpt", tr.state, {**extra, "epoch": epoch})
        _write_csv(out / "metrics.csv", METRIC_FIELDS, metrics)
    _write_csv(out / "batches.csv", BATCH_FIELDS, tr.batch_log)
    net.save_checkpoint(out / "final.ckpt", tr.state, {**extra, "epoch": config.epochs - 1})
    last = metrics[-1]
    summary = {
        "variant": config.variant,
        "seed": config.seed,
        "epochs": config.epochs,
        "final": {
            "source_test_acc": last["source_test_acc"],
            "target_test_acc": last["target_test_acc"],
        },
        "best_source_val": {"epoch": best_epoch, "source_val_acc": best_val, "target_test_acc": best_target},
        "config": config.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return TrainResult(out, tr.state, metrics, summary)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    confusion: np.ndarray  # rows: true class, columns: predicted class
    classes: list


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def summarize_predictions(truth, pred, classes) -> EvalResult:
    cm = confusion_matrix(truth, pred, len(classes))
    support = cm.sum(axis=1)
    per_class = {c: (float(cm[i, i] / support[i]) if support[i] else float("nan")) for i, c in enumerate(classes)}
    return EvalResult(float(np.trace(cm) / cm.sum()), per_class, cm, list(classes))


def evaluate(checkpoint, domain_dir, split: str = "test") -> EvalResult:
    """Classify a split with the category head only (the pretext heads are never read)."""
    if isinstance(checkpoint, net.ModelState):
        state, classes = checkpoint, None
    else:
        state, header = net.load_checkpoint(checkpoint)
        classes = header.get("extra", {}).get("classes")
    data = load_split(domain_dir, split, diagnostic=True)
    if state.config.n_classes != len(data.classes) or (classes is not None and classes != data.classes):
        raise net.CheckpointError(
            f"checkpoint has {state.config.n_classes} classes {classes}, data has {data.classes}"
        )
    pred = net.predict(state, data.clouds).argmax(axis=1)
    return summarize_predictions(data.labels, pred, data.classes)


# ---------------------------------------------------------------- reporting


def find_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if (p / "summary.json").exists():
            runs.append(p)
        else:
            runs.extend(sorted(q.parent for q in p.rglob("summary.json")))
    return runs


def mean_sem(values) -> tuple[float, float | None]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), None
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def report(run_dirs, out_csv=None) -> tuple[str, list[dict]]:
    """Aggregate ``summary.json`` files into an ablation table (accuracies in %).

    Variants without runs are listed as absent.
    """
    by_variant: dict = {}
    for run in find_runs(run_dirs):
        s = json.loads((run / "summary.json").read_text())
        by_variant.setdefault(s["variant"], []).append(s)
    order = REPORT_ROWS + sorted(set(by_variant) - set(REPORT_ROWS))
    rows = []
    for name in order:
        runs = by_variant.get(name, [])
        row = {"variant": name, "n_runs": len(runs)}
        for col, get in (
            ("target_final", lambda s: s["final"]["target_test_acc"]),
            ("target_best_val", lambda s: s["best_source_val"]["target_test_acc"]),
            ("source_final", lambda s: s["final"]["source_test_acc"]),
        ):
            if runs:
                mu, se = mean_sem([100.0 * get(s) for s in runs])
                row[col], row[col + "_sem"] = mu, se
            else:
                row[col] = row[col + "_sem"] = None
        row["seeds"] = " ".join(str(s["seed"]) for s in sorted(runs, key=lambda s: s["seed"]))
        rows.append(row)

    def cell(mu, se):
        if mu is None:
            return "absent"
        return f"{mu:6.2f}" + ("" if se is None else f" ± {se:.2f}")

    lines = [f"{'variant':<12} {'target (final)':>16} {'target (best val)':>18} {'source (final)':>16}  seeds"]
    for r in rows:
        lines.append(
            f"{r['variant']:<12} {cell(r['target_final'], r['target_final_sem']):>16} "
            f"{cell(r['target_best_val'], r['target_best_val_sem']):>18} "
            f"{cell(r['source_final'], r['source_final_sem']):>16}  {r['seeds']}"
        )
    text = "\n".join(lines)
    if out_csv is not None:
        fields = list(rows[0])
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return text, rows


def run_ablation(source_dir, target_dir, out_dir, variants=REPORT_ROWS, seeds=(0, 1, 2), **config) -> list[dict]:
    """Train every ``variant`` x ``seed`` under ``out_dir/<variant>/seed<k>`` and report."""
    out_dir = Path(out_dir)
    for name in variants:
        for seed in seeds:
            cfg = desk_config(**{**config, **VARIANTS[name], "seed": seed})
            train(cfg, source_dir, target_dir, out_dir / name.replace("/", "").replace(" ", "_") / f"seed{seed}")
    text, rows = report([out_dir], out_dir / "ablation.csv")
    (out_dir / "ablation.txt").write_text(text + "\n")
    return rows
