"""
Training, evaluation and the ablation table
===========================================

A short run of the full objective on a small benchmark, followed by
evaluation of the checkpoint and the report over run directories. The
acceptance test runs the full desk profile (6 classes, 100 clouds per class,
256 points, 60 epochs, 3 seeds); this demo is shrunk to run in about a minute.
"""

import tempfile
from pathlib import Path

from gast_uda import data, harness

root = Path(tempfile.mkdtemp())
data.generate_benchmark(root / "bench", classes=4, per_class=30, points=128, seed=0)

runs = []
for variant in ("w/o Adapt", "GAST"):
    cfg = harness.desk_config(epochs=8, seed=0, **harness.VARIANTS[variant])
    out = root / "runs" / variant.replace("/", "").replace(" ", "_")
    res = harness.train(cfg, root / "bench" / "source", root / "bench" / "target", out)
    runs.append(out)
    print(variant, res.summary["final"])

ev = harness.evaluate(runs[-1] / "final.ckpt", root / "bench" / "target")
print("target accuracy", ev.accuracy)
print("per class", {k: round(v, 2) for k, v in ev.per_class.items()})
print(ev.confusion)

text, _ = harness.report(runs)
print(text)
