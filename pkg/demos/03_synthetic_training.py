"""Train the toy dual-backbone model on a synthetic dataset.

Generates a small deterministic image set (class = banding frequency plus a
base brightness), trains for a handful of epochs with Adam, and writes the
checkpoint plus the per-epoch loss log under demos/output/.
"""

import os

from dualstage import data, fusion, swin, train, vit

OUT = os.path.join(os.path.dirname(__file__), "output", "training")
DATASET = os.path.join(OUT, "dataset")

manifest, vocabulary = data.generate_synthetic_dataset(
    DATASET, classes=4, per_class=8, seed=7, image_size=32
)
samples = data.load_manifest(manifest, vocabulary)
print(f"dataset: {len(samples)} images, labels {vocabulary}")

counts = data.class_distribution(samples, vocabulary)
data.write_distribution(counts, OUT)
print("class distribution  :", dict(counts))

model = fusion.build_model(vit.ViTConfig(), swin.SwinConfig(), vocabulary, seed=0)
preprocess = data.PreprocessConfig(target_size=32, hflip_probability=0.5)
config = train.TrainConfig(epochs=30, batch_size=8, seed=3)

result = train.train(
    model, samples, config, preprocess,
    image_root=DATASET, out_dir=OUT,
)
for epoch, mean_loss in result.loss_log:
    if epoch % 5 == 0 or epoch == 1:
        print(f"epoch {epoch:3d}  mean loss {mean_loss:.4f}")
print(f"\ncheckpoint and loss_log.csv written to {OUT}")
