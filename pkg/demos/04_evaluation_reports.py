"""Evaluate a trained checkpoint and emit the report files.

Loads the checkpoint written by 03_synthetic_training.py (runs it first if
needed), scores the training set, and writes metrics.json, the confusion
matrix, and the precision-recall curve (CSV + SVG).
"""

import json
import os
import runpy

import numpy as np

from dualstage import checkpoint, data, metrics
from dualstage.fusion import predict

HERE = os.path.dirname(__file__)
OUT = os.path.join(HERE, "output", "training")
DATASET = os.path.join(OUT, "dataset")
CKPT = os.path.join(OUT, "model.ckpt")

if not os.path.exists(CKPT):
    runpy.run_path(os.path.join(HERE, "03_synthetic_training.py"))

bundle = checkpoint.load_checkpoint(CKPT)
model = bundle.model
samples = data.load_manifest(os.path.join(DATASET, "manifest.csv"), model.vocabulary)

report = metrics.evaluate(model, samples, bundle.preprocess, image_root=DATASET)
report_dir = os.path.join(HERE, "output", "evaluation")
report.write(report_dir)

print(f"argmax accuracy     : {report.accuracy:.3f}")
print(f"confusion diagonal  : {np.diag(report.confusion).tolist()}")
print(f"pr curve points     : {len(report.pr_points)}")
print("per-label precision :", {
    name: round(entry["precision"], 3) for name, entry in report.per_label.items()
})

# single-image prediction, the same path the CLI predict command takes
sample = samples[0]
img = data.normalize(
    data.decode_and_resize(os.path.join(DATASET, sample.image_path), 32), bundle.preprocess
)
from dualstage.tensor import Tensor
from dualstage.fusion import forward

probs, labels = predict(forward(Tensor(img[None].astype(model.dtype)), model))
print(f"\n{sample.image_path}: predicted {model.vocabulary[labels[0]]}")
print(json.dumps({n: round(float(p), 3) for n, p in zip(model.vocabulary, probs[0])}, indent=2))
print(f"\nreport files in {report_dir}")
