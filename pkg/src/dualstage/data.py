"""Dataset ingestion, preprocessing, augmentation, and batching.

Manifests are UTF-8 CSV files with header ``image_path,labels``; the labels
field holds a |-separated subset of the vocabulary, or ``No Finding`` (or an
empty field) for an all-zero target. Images are 8-bit PNG, grayscale or RGB;
grayscale is replicated to three channels.

Reproducibility contract: preprocessing is a pure function of (file,
config); shuffling draws from a stream derived from (seed, "shuffle",
epoch); the horizontal-flip decision for a sample draws exactly once from a
stream derived from (seed, "hflip", epoch, manifest index), so it depends on
neither batch composition nor worker scheduling.
"""

from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import svg
from .errors import ConfigError, DataError
from .rng import Rng, derive_seed
from .tensor import Tensor

NO_FINDING = "No Finding"

DEFAULT_LABELS = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
)


def check_vocabulary(names) -> list[str]:
    names = list(names)
    if not names:
        raise ConfigError("label vocabulary is empty")
    if len(set(names)) != len(names):
        raise ConfigError(f"label vocabulary has duplicates: {names}")
    if NO_FINDING in names:
        raise ConfigError(f"{NO_FINDING!r} is the all-zero target, not a label")
    return names


@dataclass
class Sample:
    image_path: str
    targets: np.ndarray  # multi-hot uint8 [K]


@dataclass
class PreprocessConfig:
    target_size: int = 32
    normalization: str = "unit-range"  # or "dataset-stats"
    hflip_probability: float = 0.5
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None
    on_decode_error: str = "abort"  # or "skip"

    def __post_init__(self):
        if self.target_size <= 0:
            raise ConfigError("preprocess: target_size must be positive")
        if self.normalization not in ("unit-range", "dataset-stats"):
            raise ConfigError(f"preprocess: unknown normalization {self.normalization!r}")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise ConfigError("preprocess: hflip_probability must be in [0, 1]")
        if self.on_decode_error not in ("abort", "skip"):
            raise ConfigError(f"preprocess: unknown on_decode_error {self.on_decode_error!r}")
        if self.normalization == "dataset-stats":
            if self.channel_mean is None or self.channel_std is None:
                raise ConfigError("preprocess: dataset-stats mode needs channel_mean and channel_std")
            if any(s <= 0 for s in self.channel_std):
                raise ConfigError("preprocess: channel_std entries must be positive")


def load_manifest(path: str, vocabulary) -> list[Sample]:
    vocabulary = check_vocabulary(vocabulary)
    index = {name: i for i, name in enumerate(vocabulary)}
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_path", "labels"]:
            raise DataError(f"manifest {path}: expected header 'image_path,labels', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"manifest {path} row {row_no}: expected 2 columns, got {len(row)}")
            image_path, labels_field = row[0].strip(), row[1].strip()
            if not image_path:
                raise DataError(f"manifest {path} row {row_no}: empty image_path")
            if image_path in seen:
                raise DataError(f"manifest {path} row {row_no}: duplicate image_path {image_path!r}")
            seen.add(image_path)
            targets = np.zeros(len(vocabulary), dtype=np.uint8)
            if labels_field and labels_field != NO_FINDING:
                for name in labels_field.split("|"):
                    name = name.strip()
                    if name not in index:
                        raise DataError(
                            f"manifest {path} row {row_no}: unknown label {name!r}"
                        )
                    targets[index[name]] = 1
            samples.append(Sample(image_path=image_path, targets=targets))
    if not samples:
        raise DataError(f"manifest {path} has no data rows")
    return samples


def decode_image(path: str) -> np.ndarray:
    """PNG file -> float64 [3, H, W] with values in [0, 255]."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64)
                arr = np.stack([arr, arr, arr])
            else:
                if img.mode != "RGB":
                    img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise DataError(f"image {path} has a zero dimension")
    return arr


def bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    """[3, H, W] -> [3, size, size] bilinear, half-pixel centers, edge clamp.

    Source sample centers sit at (i + 0.5) * scale - 0.5; neighbor indices
    are clamped to the image, which reduces to edge replication.
    """
    _, h, w = img.shape

    def axis_weights(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.floor(src)
        frac = src - lo
        i0 = np.clip(lo, 0, n_src - 1).astype(int)
        i1 = np.clip(lo + 1, 0, n_src - 1).astype(int)
        return i0, i1, frac

    y0, y1, fy = axis_weights(h, size)
    x0, x1, fx = axis_weights(w, size)
    rows = img[:, y0, :] * (1.0 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1.0 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out


def decode_and_resize(path: str, target_size: int) -> np.ndarray:
    return bilinear_resize(decode_image(path), target_size)


def normalize(x: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Map [0, 255] pixel values to model inputs.

    unit-range: x/255 shifted and scaled to exactly [-1, 1].
    dataset-stats: per-channel (x/255 - mean) / std with provided statistics.
    """
    if config.normalization == "unit-range":
        return (x / 255.0 - 0.5) / 0.5
    mean = np.asarray(config.channel_mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(config.channel_std, dtype=np.float64).reshape(3, 1, 1)
    return (x / 255.0 - mean) / std


def augment_hflip(x: np.ndarray, rng: Rng, probability: float) -> np.ndarray:
    """Reverse the column axis with the given probability.

    Consumes exactly one draw whether or not the flip happens, keeping the
    stream aligned for any augmentation added after it.
    """
    flip = rng.coin(probability)
    if flip:
        return x[:, :, ::-1].copy()
    return x


def class_distribution(samples: list[Sample], vocabulary) -> "OrderedDict[str, int]":
    """Per-label sample counts; multi-label samples count once per set label.

    All-zero targets are tallied under a separate final "No Finding" entry.
    """
    vocabulary = check_vocabulary(vocabulary)
    counts = OrderedDict((name, 0) for name in vocabulary)
    none_count = 0
    for s in samples:
        if not s.targets.any():
            none_count += 1
            continue
        for i, name in enumerate(vocabulary):
            if s.targets[i]:
                counts[name] += 1
    counts[NO_FINDING] = none_count
    return counts


def write_distribution(counts: "OrderedDict[str, int]", out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "class_distribution.csv"), "w", encoding="utf-8") as fh:
        fh.write("label,count\n")
        for name, count in counts.items():
            fh.write(f"{name},{count}\n")
    chart = svg.bar_chart(list(counts), list(counts.values()), "Class distribution")
    with open(os.path.join(out_dir, "distribution.svg"), "w", encoding="utf-8") as fh:
        fh.write(chart)


def _load_one(
    sample: Sample,
    manifest_index: int,
    config: PreprocessConfig,
    image_root: str,
    seed: int,
    epoch: int,
    training: bool,
    cache: dict | None,
) -> np.ndarray:
    path = os.path.join(image_root, sample.image_path) if image_root else sample.image_path
    key = (path, config.target_size)
    if cache is not None and key in cache:
        img = cache[key]
    else:
        img = decode_and_resize(path, config.target_size)
        if cache is not None:
            cache[key] = img
    if training:
        rng = Rng(derive_seed(seed, "hflip", epoch, manifest_index))
        img = augment_hflip(img, rng, config.hflip_probability)
    return normalize(img, config)


def batches(
    samples: list[Sample],
    batch_size: int,
    seed: int,
    training: bool,
    config: PreprocessConfig,
    *,
    epoch: int = 0,
    image_root: str = "",
    dtype=np.float32,
    cache: dict | None = None,
) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (images [B, 3, S, S], targets [B, K]) tensors.

    Training mode shuffles per epoch (seeded Fisher-Yates) and applies
    augmentation; eval mode keeps manifest order and none. The final partial
    batch is kept either way. Decode failures follow
    ``config.on_decode_error``: abort with the file path, or drop the sample.
    """
    if batch_size < 1:
        raise ConfigError("batches: batch_size must be >= 1")
    order = list(range(len(samples)))
    if training:
        Rng(derive_seed(seed, "shuffle", epoch)).shuffle(order)
    images: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for idx in order:
        try:
            img = _load_one(samples[idx], idx, config, image_root, seed, epoch, training, cache)
        except DataError:
            if config.on_decode_error == "skip":
                continue
            raise
        images.append(img)
        targets.append(samples[idx].targets)
        if len(images) == batch_size:
            yield Tensor(np.stack(images).astype(dtype)), Tensor(np.stack(targets).astype(dtype))
            images, targets = [], []
    if images:
        yield Tensor(np.stack(images).astype(dtype)), Tensor(np.stack(targets).astype(dtype))


def split_samples(
    samples: list[Sample], fractions: tuple[float, ...], seed: int
) -> list[list[Sample]]:
    """Seeded disjoint ratio split (fractions must sum to 1)."""
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    order = list(range(len(samples)))
    Rng(derive_seed(seed, "split")).shuffle(order)
    parts: list[list[Sample]] = []
    start = 0
    for i, frac in enumerate(fractions):
        stop = len(samples) if i == len(fractions) - 1 else start + round(frac * len(samples))
        parts.append([samples[j] for j in order[start:stop]])
        start = stop
    return parts


def generate_synthetic_dataset(
    out_dir: str,
    classes: int,
    per_class: int,
    seed: int,
    image_size: int = 32,
    vocabulary=None,
) -> tuple[str, list[str]]:
    """Write a deterministic PNG dataset plus manifest; returns (manifest, vocabulary).

    Class k draws horizontal sinusoidal banding with frequency k+1 on a
    class-specific base brightness; per-image phase and pixel noise come from
    a stream derived from (seed, "synth", class, index). Patterns vary only
    by row, so they are invariant under horizontal flip and stay learnable
    with flip augmentation on.
    """
    if classes < 1 or per_class < 1:
        raise ConfigError("synthetic dataset needs classes >= 1 and per_class >= 1")
    if vocabulary is None:
        if classes > len(DEFAULT_LABELS):
            raise ConfigError(f"at most {len(DEFAULT_LABELS)} default classes available")
        vocabulary = list(DEFAULT_LABELS[:classes])
    else:
        vocabulary = check_vocabulary(vocabulary)
        if len(vocabulary) != classes:
            raise ConfigError("vocabulary size must match the class count")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k in range(classes):
        base = 40.0 + 170.0 * k / classes
        for i in range(per_class):
            rng = Rng(derive_seed(seed, "synth", k, i))
            phase = 2.0 * math.pi * rng.uniform()
            noise = rng.fill_uniform((image_size, image_size), -8.0, 8.0)
            y = np.arange(image_size)[:, None]
            wave = 50.0 * np.sin(2.0 * math.pi * (k + 1) * y / image_size + phase)
            pix = np.clip(base + wave + noise, 0.0, 255.0).astype(np.uint8)
            name = f"class{k:02d}_{i:03d}.png"
            Image.fromarray(pix, mode="L").save(os.path.join(out_dir, name), format="PNG")
            rows.append((name, vocabulary[k]))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "labels"])
        writer.writerows(rows)
    return manifest, vocabulary
