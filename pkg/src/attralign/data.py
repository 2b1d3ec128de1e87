"""Synthetic mask-annotated multi-label image datasets, plus a generic
directory loader for any dataset following the documented on-disk layout.

Layout:
    images/<sample_id>.png        8-bit grayscale (or RGB), /255 on load
    masks/<sample_id>_label<K>.png  0/255 binary, thresholded at 0.5 on load
    labels.csv                    sample_id, one binary column per class
    splits.csv                    sample_id, split
    manifest.json                 generation spec and seed (generated sets)

Generated images are quantized to the 8-bit grid, so generate -> save ->
load round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "finetune", "eval")


@dataclass
class AnnotatedSample:
    image: np.ndarray                 # (C, H, W) floats in [0, 1]
    labels: np.ndarray                # (L,) 0/1
    masks: Dict[int, np.ndarray]      # label index -> (H, W) 0/1
    sample_id: str

    def validate(self):
        c, h, w = self.image.shape
        for k, m in self.masks.items():
            if m.shape != (h, w):
                raise ValueError(f"{self.sample_id}: mask {k} shape {m.shape} != {(h, w)}")
            if m.sum() == 0:
                raise ValueError(f"{self.sample_id}: empty mask for label {k}")


@dataclass
class GenSpec:
    size: int = 64
    channels: int = 1
    classes: tuple = (("square", "solid"), ("disk", "solid"), ("cross", "striped"))
    label_probs: tuple = (0.5, 0.5, 0.5)
    noise: float = 0.08
    confounder: bool = False
    confounder_strength: float = 0.9
    seed: int = 0
    counts: tuple = (2000, 400, 400, 400)  # train / val / finetune / eval

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if len(self.label_probs) != len(self.classes):
            raise ValueError("label_probs must match the class vocabulary")
        if any(not 0 <= p <= 1 for p in self.label_probs):
            raise ValueError("label probabilities must lie in [0, 1]")
        if not 0 <= self.confounder_strength <= 1:
            raise ValueError("confounder_strength must lie in [0, 1]")
        if len(self.counts) != 4 or any(c < 1 for c in self.counts):
            raise ValueError("counts must be four positive split sizes")

    @property
    def class_names(self) -> List[str]:
        return [f"{shape}_{texture}" for shape, texture in self.classes]


@dataclass
class Dataset:
    samples: Dict[str, AnnotatedSample]
    splits: Dict[str, List[str]]
    class_names: List[str]
    spec: Optional[GenSpec] = None
    excluded: List[str] = field(default_factory=list)

    @property
    def num_labels(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> List[AnnotatedSample]:
        return [self.samples[sid] for sid in self.splits[name]]

    @property
    def dataset_id(self) -> str:
        if self.spec is not None:
            blob = json.dumps(asdict(self.spec), sort_keys=True).encode()
        else:
            blob = json.dumps(sorted(self.samples), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------

def _footprint(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary footprint of one shape instance placed away from the border."""
    half_max = size // 6
    margin = half_max + 6  # keeps shapes clear of the confounder corner patch
    cy, cx = rng.integers(margin, size - margin, 2)
    half = int(rng.integers(max(3, half_max // 2), half_max + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half))
    if shape == "disk":
        return ((yy - cy) ** 2 + (xx - cx) ** 2) <= half ** 2
    if shape == "cross":
        thick = max(1, half // 3)
        arm = ((np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= half))
        return arm | ((np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= half))
    raise ValueError(f"unknown shape kind {shape!r}")


def _paint(canvas: np.ndarray, footprint: np.ndarray, texture: str,
           rng: np.random.Generator):
    level = rng.uniform(0.55, 0.95)
    if texture == "solid":
        fill = np.full(canvas.shape, level)
    elif texture == "striped":
        rows = (np.arange(canvas.shape[0]) % 4 < 2).astype(float)
        fill = np.where(rows[:, None] > 0, level, 0.45 * level)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    np.maximum(canvas, np.where(footprint, fill, 0.0), out=canvas)


CONFOUNDER_BOX = (slice(1, 5), slice(1, 5))


def _render_sample(spec: GenSpec, sid: str, rng: np.random.Generator) -> AnnotatedSample:
    size = spec.size
    labels = (rng.uniform(0, 1, len(spec.classes)) < np.asarray(spec.label_probs))
    canvas = rng.uniform(0.0, spec.noise, (size, size))
    masks: Dict[int, np.ndarray] = {}
    for k, (shape, texture) in enumerate(spec.classes):
        if not labels[k]:
            continue
        fp = _footprint(shape, size, rng)
        _paint(canvas, fp, texture, rng)
        masks[k] = fp.astype(np.uint8)
    if spec.confounder:
        agree = rng.uniform() < spec.confounder_strength
        present = bool(labels[0]) if agree else not bool(labels[0])
        if present:
            canvas[CONFOUNDER_BOX] = 1.0
    canvas = np.clip(canvas, 0.0, 1.0)
    canvas = np.round(canvas * 255.0) / 255.0  # 8-bit grid: PNG round-trip exact
    image = np.broadcast_to(canvas, (spec.channels, size, size)).copy()
    return AnnotatedSample(image=image, labels=labels.astype(np.int64),
                           masks=masks, sample_id=sid)


def generate(spec: GenSpec) -> Dataset:
    """Fully seed-determined dataset with four disjoint splits."""
    total = sum(spec.counts)
    children = np.random.SeedSequence(spec.seed).spawn(total)
    samples: Dict[str, AnnotatedSample] = {}
    ids = []
    for i in range(total):
        sid = f"{i:06d}"
        sample = _render_sample(spec, sid, np.random.default_rng(children[i]))
        sample.validate()
        samples[sid] = sample
        ids.append(sid)
    splits: Dict[str, List[str]] = {}
    start = 0
    for name, count in zip(SPLIT_NAMES, spec.counts):
        splits[name] = ids[start:start + count]
        start += count
    return Dataset(samples=samples, splits=splits,
                   class_names=spec.class_names, spec=spec)


# ---------------------------------------------------------------------------
# on-disk round trip
# ---------------------------------------------------------------------------

def _to_png(arr01: np.ndarray) -> Image.Image:
    data = np.round(arr01 * 255.0).astype(np.uint8)
    if data.shape[0] == 1:
        return Image.fromarray(data[0], mode="L")
    return Image.fromarray(np.transpose(data, (1, 2, 0)), mode="RGB")


def save_directory(dataset: Dataset, path: str):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    for sid, s in sorted(dataset.samples.items()):
        _to_png(s.image).save(os.path.join(path, "images", f"{sid}.png"))
        for k, m in sorted(s.masks.items()):
            Image.fromarray((m * 255).astype(np.uint8), mode="L").save(
                os.path.join(path, "masks", f"{sid}_label{k}.png"))
    with open(os.path.join(path, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + list(dataset.class_names))
        for sid, s in sorted(dataset.samples.items()):
            writer.writerow([sid] + [int(v) for v in s.labels])
    with open(os.path.join(path, "splits.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "split"])
        for name in dataset.splits:
            for sid in dataset.splits[name]:
                writer.writerow([sid, name])
    manifest = {"format": 1, "class_names": list(dataset.class_names)}
    if dataset.spec is not None:
        manifest["spec"] = asdict(dataset.spec)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _read_image(path: str) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.transpose(arr, (2, 0, 1))


def load_directory(path: str) -> Dataset:
    """Parse a dataset directory; validates ids, labels, masks, and splits."""
    labels_path = os.path.join(path, "labels.csv")
    with open(labels_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["sample_id"]:
        raise ValueError(f"{labels_path}:1: header must start with 'sample_id'")
    class_names = rows[0][1:]
    if not class_names:
        raise ValueError(f"{labels_path}:1: no class columns")

    image_dir = os.path.join(path, "images")
    mask_dir = os.path.join(path, "masks")
    samples: Dict[str, AnnotatedSample] = {}
    excluded: List[str] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 1 + len(class_names):
            raise ValueError(f"{labels_path}:{lineno}: expected "
                             f"{1 + len(class_names)} columns, got {len(row)}")
        sid = row[0]
        image_path = os.path.join(image_dir, f"{sid}.png")
        if not os.path.exists(image_path):
            image_path = os.path.join(image_dir, f"{sid}.pgm")
        if not os.path.exists(image_path):
            raise ValueError(f"{labels_path}:{lineno}: unknown sample id {sid!r} "
                             "(no image file)")
        try:
            labels = np.array([int(v) for v in row[1:]])
        except ValueError:
            raise ValueError(f"{labels_path}:{lineno}: non-integer label value")
        if not np.all(np.isin(labels, (0, 1))):
            raise ValueError(f"{labels_path}:{lineno}: labels must be 0/1")
        image = _read_image(image_path)
        masks: Dict[int, np.ndarray] = {}
        missing = []
        for k in range(len(class_names)):
            mpath = os.path.join(mask_dir, f"{sid}_label{k}.png")
            if labels[k] == 1:
                if os.path.exists(mpath):
                    masks[k] = (np.asarray(Image.open(mpath), dtype=np.float64)
                                / 255.0 > 0.5).astype(np.uint8)
                else:
                    missing.append(k)
        if missing:
            logger.warning("excluding %s: positive label(s) %s without masks",
                           sid, missing)
            excluded.append(sid)
            continue
        samples[sid] = AnnotatedSample(image=image, labels=labels, masks=masks,
                                       sample_id=sid)

    splits_path = os.path.join(path, "splits.csv")
    splits: Dict[str, List[str]] = {}
    with open(splits_path, newline="") as fh:
        srows = list(csv.reader(fh))
    if not srows or srows[0] != ["sample_id", "split"]:
        raise ValueError(f"{splits_path}:1: header must be sample_id,split")
    for lineno, row in enumerate(srows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{splits_path}:{lineno}: expected 2 columns")
        sid, split_name = row
        if sid in excluded:
            continue
        if sid not in samples:
            raise ValueError(f"{splits_path}:{lineno}: unknown sample id {sid!r}")
        splits.setdefault(split_name, []).append(sid)

    spec = None
    manifest_path = os.path.join(path, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if "spec" in manifest:
            raw = dict(manifest["spec"])
            raw["classes"] = tuple(tuple(c) for c in raw["classes"])
            raw["label_probs"] = tuple(raw["label_probs"])
            raw["counts"] = tuple(raw["counts"])
            spec = GenSpec(**raw)
    return Dataset(samples=samples, splits=splits, class_names=class_names,
                   spec=spec, excluded=excluded)
