"""Training loops: multi-label BCE base training and (mis)alignment
fine-tuning with the decoupled-weight-decay Adam optimizer.

Fine-tuning rebuilds the explanation graph every optimizer step; gradient
explainers route second-order signal into the parameters, relevance
propagation only first-order. All loops are deterministic given
(seed, config, dataset).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage

from . import autodiff as ad, metrics as mt
from .autodiff import Tensor
from .data import AnnotatedSample, Dataset
from .explainers import ExplainerConfig, explanation_maps
from .nn import Model
from .stats import macro_auroc

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    rotation: float = 0.0           # symmetric degree range (-r, r); 0 disables
    scenario: str = "base"          # base | align | misalign
    alpha: float = 1.0
    target_labels: tuple = ()
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    val_subset: int = 64            # per-epoch alignment validation sample cap

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rotation < 0:
            raise ValueError("rotation range must be symmetric and non-negative")
        if self.scenario not in ("base", "align", "misalign"):
            raise ValueError(f"unknown scenario {self.scenario!r}")


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Dict[Tensor, Tensor], lr_scale: float = 1.0):
        for p in self.params:
            g = grads.get(p)
            if g is not None and not np.all(np.isfinite(g.data)):
                raise RuntimeError(
                    f"non-finite gradient for parameter {p.name or '<unnamed>'}; "
                    "aborting optimizer step")
        self.step_count += 1
        t = self.step_count
        lr = self.lr * lr_scale
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            garr = g.data if g is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * garr
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * garr * garr
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            new = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                new = new - lr * self.weight_decay * p.data
            p.data = new


def adamw_step(params: Sequence[Tensor], grads: Dict[Tensor, Tensor],
               state: AdamW) -> AdamW:
    """Apply one optimizer step in place; returns the updated state."""
    if state.params != list(params):
        raise ValueError("state was built for different parameters")
    state.step(grads)
    return state


# ---------------------------------------------------------------------------
# augmentation: images bilinear, masks nearest, same angle
# ---------------------------------------------------------------------------

def rotate_sample(sample: AnnotatedSample, angle: float) -> AnnotatedSample:
    """Rotate image and all masks jointly; exact for multiples of 90 degrees."""
    if angle % 360 == 0:
        return sample
    if angle % 90 == 0:
        k = int(angle // 90) % 4
        image = np.ascontiguousarray(np.rot90(sample.image, k, axes=(1, 2)))
        masks = {lab: np.ascontiguousarray(np.rot90(m, k))
                 for lab, m in sample.masks.items()}
    else:
        image = scipy.ndimage.rotate(sample.image, angle, axes=(2, 1),
                                     reshape=False, order=1, mode="constant")
        image = np.clip(image, 0.0, 1.0)
        masks = {lab: scipy.ndimage.rotate(m, angle, axes=(1, 0), reshape=False,
                                           order=0, mode="constant")
                 for lab, m in sample.masks.items()}
    return AnnotatedSample(image=image, labels=sample.labels, masks=masks,
                           sample_id=sample.sample_id)


def _augment(samples: List[AnnotatedSample], rotation: float,
             rng: np.random.Generator) -> List[AnnotatedSample]:
    if rotation == 0:
        return samples
    return [rotate_sample(s, float(rng.uniform(-rotation, rotation)))
            for s in samples]


# ---------------------------------------------------------------------------
# shared evaluation helpers
# ---------------------------------------------------------------------------

def predict_probs(model: Model, samples: Sequence[AnnotatedSample],
                  batch_size: int = 64) -> np.ndarray:
    probs = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            logits = model.forward(Tensor(np.stack([s.image for s in chunk])))
            probs.append(ad.sigmoid(logits).data)
    return np.vstack(probs)


def model_macro_auroc(model: Model, samples: Sequence[AnnotatedSample]) -> float:
    probs = predict_probs(model, samples)
    targets = np.stack([s.labels for s in samples])
    return macro_auroc(probs, targets)


def evaluate_alignment(model: Model, config: ExplainerConfig,
                       samples: Sequence[AnnotatedSample], label: int,
                       batch_size: int = 32) -> Dict[str, mt.AlignmentScores]:
    """Per-sample alignment scores on min-max scaled explanations."""
    usable = [s for s in samples if label in s.masks]
    scores: Dict[str, mt.AlignmentScores] = {}
    for i in range(0, len(usable), batch_size):
        chunk = usable[i:i + batch_size]
        images = np.stack([s.image for s in chunk])
        maps = explanation_maps(model, images, label, config, record=False).data
        for s, m in zip(chunk, maps):
            scores[s.sample_id] = mt.alignment_scores(
                mt.minmax_scale_array(m), s.masks[label])
    return scores


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def train_base(model: Model, dataset: Dataset, config: TrainConfig,
               train_split: str = "train", val_split: str = "val"):
    """BCE training; returns (model, per-epoch log)."""
    train = dataset.split(train_split)
    if not train:
        raise ValueError(f"split {train_split!r} is empty")
    for s in train:
        if s.labels.size != model.num_labels:
            raise ValueError(f"sample {s.sample_id} has {s.labels.size} labels, "
                             f"model expects {model.num_labels}")
    val = dataset.split(val_split) if val_split in dataset.splits else []
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                eps=config.eps, weight_decay=config.weight_decay)
    log: List[dict] = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.time()
        losses = []
        for idx in _batches(len(train), config.batch_size, rng):
            batch = _augment([train[i] for i in idx], config.rotation, rng)
            images = Tensor(np.stack([s.image for s in batch]))
            targets = Tensor(np.stack([s.labels for s in batch]).astype(np.float64))
            loss = ad.bce_with_logits(model.forward(images), targets)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"training diverged at epoch {epoch}: "
                                   f"loss={loss.item()}")
            grads = ad.backward(loss, model.parameters())
            step += 1
            scale = min(1.0, step / config.warmup_steps) if config.warmup_steps else 1.0
            opt.step(grads, lr_scale=scale)
            losses.append(loss.item())
        record = {"epoch": epoch, "loss": float(np.mean(losses)),
                  "wall_time": round(time.time() - t0, 3)}
        if val:
            record["val_auroc"] = model_macro_auroc(model, val)
        log.append(record)
        logger.info("base epoch %d: loss=%.4f%s", epoch, record["loss"],
                    f" val_auroc={record.get('val_auroc', float('nan')):.3f}"
                    if val else "")
    model.metadata.update({"seed": config.seed, "epochs": config.epochs,
                           "dataset_id": dataset.dataset_id})
    return model, log


def finetune_alignment(model: Model, explainer: ExplainerConfig, dataset: Dataset,
                       config: TrainConfig, finetune_split: str = "finetune",
                       val_split: str = "val"):
    """Fine-tune with classification + alpha * (mis)alignment loss.

    The explanation graph is rebuilt each step; the SG noise seed advances
    per step so no single noise draw can be memorized.
    """
    if config.scenario not in ("align", "misalign"):
        raise ValueError("finetune_alignment needs scenario align or misalign")
    if not config.target_labels:
        raise ValueError("config.target_labels must name at least one label")
    if explainer.method == "lrp" and not hasattr(model, "layers"):
        raise ValueError("LRP cannot fine-tune this architecture: "
                         f"{model.arch.get('kind')!r} is not a plain layer stack")
    labels = list(config.target_labels)
    pool = [s for s in dataset.split(finetune_split)
            if all(lab in s.masks for lab in labels)]
    if not pool:
        raise ValueError(f"no sample in {finetune_split!r} carries masks "
                         f"for labels {labels}")
    val = dataset.split(val_split) if val_split in dataset.splits else []
    val_mask = [s for s in val if labels[0] in s.masks][:config.val_subset]

    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                eps=config.eps, weight_decay=config.weight_decay)
    log: List[dict] = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.time()
        ce_losses, align_losses = [], []
        for idx in _batches(len(pool), config.batch_size, rng):
            batch = _augment([pool[i] for i in idx], config.rotation, rng)
            ce = mt.classification_loss(model, batch)
            extra = None
            for lab in labels:
                term = (mt.loss_align if config.scenario == "align"
                        else mt.loss_misalign)(model, explainer, batch, lab,
                                               seed_offset=step)
                extra = term if extra is None else ad.add(extra, term)
            loss = ad.add(ce, ad.mul(extra, config.alpha))
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"fine-tuning diverged at epoch {epoch}")
            grads = ad.backward(loss, model.parameters())
            step += 1
            scale = min(1.0, step / config.warmup_steps) if config.warmup_steps else 1.0
            opt.step(grads, lr_scale=scale)
            ce_losses.append(ce.item())
            align_losses.append(extra.item())
        record = {"epoch": epoch, "classification_loss": float(np.mean(ce_losses)),
                  "alignment_loss": float(np.mean(align_losses)),
                  "wall_time": round(time.time() - t0, 3)}
        if val_mask:
            scores = evaluate_alignment(model, explainer, val_mask, labels[0])
            masses = [s.mass for s in scores.values() if s.mass is not None]
            record["val_mass"] = float(np.mean(masses)) if masses else None
            record["val_rank"] = float(np.mean([s.rank for s in scores.values()]))
        log.append(record)
        logger.info("%s epoch %d: ce=%.4f align=%.4f val_mass=%s", config.scenario,
                    epoch, record["classification_loss"], record["alignment_loss"],
                    record.get("val_mass"))
    model.metadata.update({"finetune_scenario": config.scenario,
                           "finetune_labels": labels,
                           "finetune_epochs": config.epochs,
                           "explainer": explainer.method})
    return model, log


def write_jsonl(records: Sequence[dict], path: str):
    import json
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
